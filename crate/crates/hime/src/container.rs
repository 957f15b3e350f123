//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "HIME"
//! version      u16      = 1
//! entry_count  u32
//! entry*:
//!   name_len   u32, then name_len bytes of UTF-8
//!   dtype      u8       1 = f32, 2 = f64
//!   ndims      u32      <= MAX_DIMS
//!   dims       u64 * ndims
//!   byte_len   u64      must equal product(dims) * dtype size
//!   payload    byte_len bytes, row-major
//! ```
//!
//! The reader checks every length against the bytes actually present
//! before allocating, so a corrupt header cannot request huge buffers.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{CliError, FormatError};
use crate::io::{read_file, write_atomic};

pub const MAGIC: [u8; 4] = *b"HIME";
pub const VERSION: u16 = 1;
pub const MAX_DIMS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// One named tensor. Values are held as `f64`; `F32` entries are widened on
/// read and narrowed on write.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn f64(name: impl Into<String>, dims: Vec<u64>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dtype: Dtype::F64,
            dims,
            data,
        }
    }

    pub fn element_count(&self) -> Option<u64> {
        self.dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>, FormatError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| FormatError::TooManyEntries)?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(FormatError::DuplicateName(e.name.clone()));
        }
        if e.dims.len() > MAX_DIMS {
            return Err(FormatError::TooManyDims {
                name: e.name.clone(),
                ndims: e.dims.len(),
            });
        }
        let n = e
            .element_count()
            .ok_or_else(|| FormatError::DimOverflow(e.name.clone()))?;
        if n != e.data.len() as u64 {
            return Err(FormatError::LengthMismatch {
                name: e.name.clone(),
                expected: n.saturating_mul(e.dtype.size()),
                found: e.data.len() as u64 * e.dtype.size(),
            });
        }
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.dtype.code());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(n * e.dtype.size()).to_le_bytes());
        match e.dtype {
            Dtype::F64 => e
                .data
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => e
                .data
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64, what: &str) -> Result<&'a [u8], FormatError> {
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n > remaining {
            return Err(FormatError::Truncated {
                what: what.to_string(),
                offset: self.pos as u64,
                needed: n,
                available: remaining,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>, FormatError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic.try_into().unwrap()));
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = c.u32("entry count")?;
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for i in 0..count {
        let name_len = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(u64::from(name_len), "name")?)
            .map_err(|_| FormatError::InvalidName(i))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(FormatError::DuplicateName(name));
        }
        let dtype = match c.u8("dtype")? {
            1 => Dtype::F32,
            2 => Dtype::F64,
            code => return Err(FormatError::UnknownDtype { name, code }),
        };
        let ndims = c.u32("dim count")? as usize;
        if ndims > MAX_DIMS {
            return Err(FormatError::TooManyDims { name, ndims });
        }
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(c.u64("dims")?);
        }
        let bytes_needed = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| FormatError::DimOverflow(name.clone()))?;
        let byte_len = c.u64("payload length")?;
        if byte_len != bytes_needed {
            return Err(FormatError::LengthMismatch {
                name,
                expected: bytes_needed,
                found: byte_len,
            });
        }
        let payload = c.take(byte_len, &format!("payload of {name}"))?;
        let data = match dtype {
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
                .collect(),
        };
        entries.push(Entry {
            name,
            dtype,
            dims,
            data,
        });
    }
    if c.pos != bytes.len() {
        return Err(FormatError::TrailingBytes((bytes.len() - c.pos) as u64));
    }
    Ok(entries)
}

pub fn write_container(path: &Path, entries: &[Entry]) -> Result<(), CliError> {
    let bytes = encode(entries).map_err(|e| CliError::format(path, e))?;
    write_atomic(path, &bytes)
}

pub fn read_container(path: &Path) -> Result<Vec<Entry>, CliError> {
    let bytes = read_file(path)?;
    decode(&bytes).map_err(|e| CliError::format(path, e))
}

/// Looks up an entry by name.
pub fn find<'a>(entries: &'a [Entry], name: &str) -> Option<&'a Entry> {
    entries.iter().find(|e| e.name == name)
}
