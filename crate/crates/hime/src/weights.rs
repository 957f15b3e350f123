//! Decoder weights and subspaces as container entries.
//!
//! Weight entries: `token_embedding`, `position_embedding`, `output`,
//! `layer{l}.{wq,wk,wv,wo_attn,mlp_up,mlp_down}` (l is 1-based),
//! `meta.num_heads` = [H] and `meta.seed` = [hi, lo] as two u32 halves so the
//! seed survives the f64 payload exactly. `layer{l}.mlp_gate` is reserved for
//! gated MLPs and rejected on load.
//!
//! Subspace entries: `layer{l}.basis` (D x k) and `layer{l}.sigma` (k).

use std::collections::BTreeMap;
use std::path::Path;

use hime_core::decoder::{DecoderConfig, DecoderWeights, LayerWeights};
use hime_core::numerics::Matrix;
use hime_core::subspace::HalluSubspace;

use crate::container::{read_container, write_container, Entry};
use crate::error::{schema, CliError, FormatError};

const LAYER_FIELDS: [&str; 6] = ["wq", "wk", "wv", "wo_attn", "mlp_up", "mlp_down"];

fn matrix_entry(name: String, m: &Matrix) -> Entry {
    Entry::f64(
        name,
        vec![m.rows() as u64, m.cols() as u64],
        m.as_slice().to_vec(),
    )
}

fn layer_field<'a>(l: &'a LayerWeights, field: &str) -> &'a Matrix {
    match field {
        "wq" => &l.wq,
        "wk" => &l.wk,
        "wv" => &l.wv,
        "wo_attn" => &l.wo_attn,
        "mlp_up" => &l.mlp_up,
        _ => &l.mlp_down,
    }
}

pub fn weights_to_entries(w: &DecoderWeights) -> Vec<Entry> {
    let mut out = vec![
        Entry::f64("meta.num_heads", vec![1], vec![w.config.num_heads as f64]),
        Entry::f64(
            "meta.seed",
            vec![2],
            vec![
                (w.config.seed >> 32) as f64,
                (w.config.seed & 0xFFFF_FFFF) as f64,
            ],
        ),
        matrix_entry("token_embedding".into(), &w.token_embedding),
        matrix_entry("position_embedding".into(), &w.position_embedding),
    ];
    for (i, l) in w.layers.iter().enumerate() {
        for f in LAYER_FIELDS {
            out.push(matrix_entry(
                format!("layer{}.{f}", i + 1),
                layer_field(l, f),
            ));
        }
    }
    out.push(matrix_entry("output".into(), &w.output));
    out
}

fn take_matrix(map: &mut BTreeMap<String, Entry>, name: &str) -> Result<Matrix, FormatError> {
    let e = map
        .remove(name)
        .ok_or_else(|| schema(format!("missing entry {name}")))?;
    match e.dims[..] {
        [r, c] => Matrix::from_vec(r as usize, c as usize, e.data)
            .map_err(|err| schema(format!("{name}: {err}"))),
        _ => Err(schema(format!(
            "{name}: expected 2 dims, found {}",
            e.dims.len()
        ))),
    }
}

fn take_u32s<const N: usize>(
    map: &mut BTreeMap<String, Entry>,
    name: &str,
) -> Result<[u32; N], FormatError> {
    let e = map
        .remove(name)
        .ok_or_else(|| schema(format!("missing entry {name}")))?;
    if e.dims != [N as u64] {
        return Err(schema(format!("{name}: expected dims [{N}]")));
    }
    let mut out = [0u32; N];
    for (o, v) in out.iter_mut().zip(&e.data) {
        if v.fract() != 0.0 || *v < 0.0 || *v > f64::from(u32::MAX) {
            return Err(schema(format!("{name}: {v} is not a u32")));
        }
        *o = *v as u32;
    }
    Ok(out)
}

pub fn weights_from_entries(entries: Vec<Entry>) -> Result<DecoderWeights, FormatError> {
    let mut map: BTreeMap<String, Entry> =
        entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    let [num_heads] = take_u32s::<1>(&mut map, "meta.num_heads")?;
    let [hi, lo] = take_u32s::<2>(&mut map, "meta.seed")?;
    let token_embedding = take_matrix(&mut map, "token_embedding")?;
    let position_embedding = take_matrix(&mut map, "position_embedding")?;
    let output = take_matrix(&mut map, "output")?;

    let mut layers = Vec::new();
    while map.contains_key(&format!("layer{}.wq", layers.len() + 1)) {
        let n = layers.len() + 1;
        if map.contains_key(&format!("layer{n}.mlp_gate")) {
            return Err(schema(format!(
                "layer{n}.mlp_gate: gated MLPs are not supported"
            )));
        }
        let mut m = |f: &str| take_matrix(&mut map, &format!("layer{n}.{f}"));
        layers.push(LayerWeights {
            wq: m("wq")?,
            wk: m("wk")?,
            wv: m("wv")?,
            wo_attn: m("wo_attn")?,
            mlp_up: m("mlp_up")?,
            mlp_down: m("mlp_down")?,
        });
    }
    if let Some(name) = map.keys().next() {
        return Err(schema(format!("unexpected entry {name}")));
    }
    let mlp_dim = layers.first().map_or(0, |l| l.mlp_up.rows());
    let config = DecoderConfig {
        vocab_size: token_embedding.rows(),
        embed_dim: token_embedding.cols(),
        num_heads: num_heads as usize,
        num_layers: layers.len(),
        mlp_dim,
        max_seq_len: position_embedding.rows(),
        seed: (u64::from(hi) << 32) | u64::from(lo),
    };
    let w = DecoderWeights {
        config,
        token_embedding,
        position_embedding,
        layers,
        output,
    };
    w.validate().map_err(|e| schema(e.to_string()))?;
    Ok(w)
}

pub fn save_weights(path: &Path, w: &DecoderWeights) -> Result<(), CliError> {
    write_container(path, &weights_to_entries(w))
}

/// The only load path for decoder weights, edited or not.
pub fn load_weights(path: &Path) -> Result<DecoderWeights, CliError> {
    let entries = read_container(path)?;
    weights_from_entries(entries).map_err(|e| CliError::format(path, e))
}

pub fn subspaces_to_entries(subspaces: &[HalluSubspace]) -> Vec<Entry> {
    let mut out = Vec::with_capacity(2 * subspaces.len());
    for s in subspaces {
        out.push(matrix_entry(format!("layer{}.basis", s.layer), &s.basis));
        out.push(Entry::f64(
            format!("layer{}.sigma", s.layer),
            vec![s.singular_values.len() as u64],
            s.singular_values.clone(),
        ));
    }
    out
}

/// Subspaces in ascending layer order.
pub fn subspaces_from_entries(entries: Vec<Entry>) -> Result<Vec<HalluSubspace>, FormatError> {
    let mut map: BTreeMap<String, Entry> =
        entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    let mut layers = Vec::new();
    for name in map.keys() {
        let layer = name
            .strip_prefix("layer")
            .and_then(|r| r.split_once('.'))
            .filter(|(_, kind)| *kind == "basis" || *kind == "sigma")
            .and_then(|(l, _)| l.parse::<usize>().ok())
            .filter(|l| *l >= 1)
            .ok_or_else(|| schema(format!("unexpected entry {name}")))?;
        layers.push(layer);
    }
    layers.sort_unstable();
    layers.dedup();
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        let basis = take_matrix(&mut map, &format!("layer{layer}.basis"))?;
        let sigma_name = format!("layer{layer}.sigma");
        let sigma = map
            .remove(&sigma_name)
            .ok_or_else(|| schema(format!("missing entry {sigma_name}")))?;
        if sigma.dims != [basis.cols() as u64] {
            return Err(schema(format!(
                "{sigma_name}: expected {} values",
                basis.cols()
            )));
        }
        out.push(HalluSubspace {
            layer,
            basis,
            singular_values: sigma.data,
        });
    }
    Ok(out)
}
