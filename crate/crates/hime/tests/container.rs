use hime::container::{decode, encode, read_container, write_container, Dtype, Entry};
use hime::{CliError, FormatError};
use proptest::prelude::*;

fn header(count: u32) -> Vec<u8> {
    let mut b = b"HIME".to_vec();
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&count.to_le_bytes());
    b
}

fn entry_head(b: &mut Vec<u8>, name: &str, dtype: u8, dims: &[u64], byte_len: u64) {
    b.extend_from_slice(&(name.len() as u32).to_le_bytes());
    b.extend_from_slice(name.as_bytes());
    b.push(dtype);
    b.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        b.extend_from_slice(&d.to_le_bytes());
    }
    b.extend_from_slice(&byte_len.to_le_bytes());
}

#[test]
fn file_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("nested/a.hime");
    let entries = vec![
        Entry::f64(
            "m",
            vec![2, 3],
            vec![1.0, 2.0, 3.0, -0.0, f64::EPSILON, 7.5],
        ),
        Entry {
            name: "f".into(),
            dtype: Dtype::F32,
            dims: vec![3],
            data: vec![0.25, 1.5, -2.0],
        },
        Entry::f64("scalar", vec![], vec![4.0]),
        Entry::f64("empty", vec![0, 5], vec![]),
    ];
    write_container(&p, &entries).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let back = read_container(&p).unwrap();
    assert_eq!(back, entries);
    assert_eq!(encode(&back).unwrap(), bytes);
    // -0.0 keeps its sign bit.
    assert_eq!(back[0].data[3].to_bits(), (-0.0f64).to_bits());
}

#[test]
fn huge_declared_sizes_fail_without_allocating() {
    let mut b = header(u32::MAX);
    entry_head(&mut b, "x", 2, &[1 << 40, 1 << 40], 0);
    assert!(matches!(decode(&b), Err(FormatError::DimOverflow(n)) if n == "x"));

    let mut b = header(1);
    entry_head(&mut b, "x", 2, &[1 << 30], 8 << 30);
    assert!(matches!(decode(&b), Err(FormatError::Truncated { needed, .. }) if needed == 8 << 30));

    let mut b = header(1);
    b.extend_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(decode(&b), Err(FormatError::Truncated { .. })));
}

#[test]
fn named_errors() {
    assert!(matches!(decode(b"HIM"), Err(FormatError::Truncated { .. })));
    let mut b = header(0);
    b[4] = 9;
    assert_eq!(decode(&b), Err(FormatError::UnsupportedVersion(9)));
    let mut b = header(1);
    entry_head(&mut b, "x", 7, &[1], 8);
    b.extend_from_slice(&[0; 8]);
    assert!(matches!(
        decode(&b),
        Err(FormatError::UnknownDtype { code: 7, .. })
    ));
    let mut b = header(2);
    for _ in 0..2 {
        entry_head(&mut b, "dup", 2, &[1], 8);
        b.extend_from_slice(&1.0f64.to_le_bytes());
    }
    assert_eq!(decode(&b), Err(FormatError::DuplicateName("dup".into())));
    let mut b = encode(&[Entry::f64("a", vec![1], vec![1.0])]).unwrap();
    b.push(0);
    assert_eq!(decode(&b), Err(FormatError::TrailingBytes(1)));
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = read_container(&dir.path().join("nope.hime")).unwrap_err();
    assert!(matches!(e, CliError::Io { .. }));
    assert_eq!(e.exit_code(), 5);
}

#[test]
fn corrupt_file_is_format_error_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.hime");
    std::fs::write(&p, b"XIME\x01\x00\x00\x00\x00\x00").unwrap();
    let e = read_container(&p).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("bad.hime"));
}

fn arb_entries() -> impl Strategy<Value = Vec<Entry>> {
    prop::collection::vec(
        (
            prop::collection::vec(0u64..4, 0..4),
            any::<bool>(),
            any::<u64>(),
        ),
        0..6,
    )
    .prop_map(|specs| {
        specs
            .into_iter()
            .enumerate()
            .map(|(i, (dims, f32, seed))| {
                let n: u64 = dims.iter().product();
                let data: Vec<f64> = (0..n)
                    .map(|j| {
                        let bits = seed.wrapping_mul(j + 1).wrapping_add(0x9E37_79B9_7F4A_7C15);
                        if f32 {
                            f64::from(f32::from_bits((bits >> 32) as u32 & 0x7F7F_FFFF))
                        } else {
                            f64::from_bits(bits & 0x7FEF_FFFF_FFFF_FFFF)
                        }
                    })
                    .collect();
                Entry {
                    name: format!("e{i}"),
                    dtype: if f32 { Dtype::F32 } else { Dtype::F64 },
                    dims,
                    data,
                }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn encode_decode_identity(entries in arb_entries()) {
        let bytes = encode(&entries).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &entries);
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_never_panics(entries in arb_entries(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&entries).unwrap();
        let n = cut.index(bytes.len());
        prop_assert!(decode(&bytes[..n]).is_err());
    }
}
