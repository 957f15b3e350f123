//! Activation traces as container entries.
//!
//! Naming scheme, layers 1-based:
//! `pair{i}.{pos|neg}.layer{l}.attn` (H x J x J) and
//! `pair{i}.{pos|neg}.layer{l}.hidden` (J x D).
//! J may differ between pairs and between the two sides of a pair.

use std::collections::{BTreeMap, BTreeSet};

use hime_core::decoder::{ActivationTrace, LayerTrace};
use hime_core::numerics::{Matrix, Tensor3};
use serde::{Deserialize, Serialize};

use crate::container::Entry;
use crate::error::{schema, FormatError};

/// Row sums further than this from 1 are renormalised and counted.
pub const ROW_SUM_TOL: f64 = 1e-6;

pub type TracePair = (u64, ActivationTrace, ActivationTrace);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLengths {
    pub pair_id: u64,
    pub pos_len: usize,
    pub neg_len: usize,
}

/// JSON sidecar written next to a trace container.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub pairs: Vec<PairLengths>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub pairs: Vec<TracePair>,
    /// Attention rows that were renormalised.
    pub renormalized_rows: usize,
}

fn entry_name(pair: u64, side: &str, layer: usize, kind: &str) -> String {
    format!("pair{pair}.{side}.layer{layer}.{kind}")
}

fn push_trace(out: &mut Vec<Entry>, pair: u64, side: &str, trace: &ActivationTrace) {
    for (i, l) in trace.layers.iter().enumerate() {
        let [h, j, k] = l.head_attention.dims();
        out.push(Entry::f64(
            entry_name(pair, side, i + 1, "attn"),
            vec![h as u64, j as u64, k as u64],
            l.head_attention.as_slice().to_vec(),
        ));
        let (r, c) = l.mlp_input_hidden.shape();
        out.push(Entry::f64(
            entry_name(pair, side, i + 1, "hidden"),
            vec![r as u64, c as u64],
            l.mlp_input_hidden.as_slice().to_vec(),
        ));
    }
}

pub fn traces_to_entries(pairs: &[TracePair]) -> Vec<Entry> {
    let mut out = Vec::new();
    for (id, pos, neg) in pairs {
        push_trace(&mut out, *id, "pos", pos);
        push_trace(&mut out, *id, "neg", neg);
    }
    out
}

pub fn manifest(pairs: &[TracePair]) -> TraceManifest {
    let first = pairs.first().map(|p| &p.1);
    TraceManifest {
        num_layers: first.map_or(0, ActivationTrace::num_layers),
        num_heads: first.map_or(0, ActivationTrace::num_heads),
        hidden_dim: first.map_or(0, ActivationTrace::hidden_dim),
        pairs: pairs
            .iter()
            .map(|(id, p, n)| PairLengths {
                pair_id: *id,
                pos_len: p.seq_len,
                neg_len: n.seq_len,
            })
            .collect(),
    }
}

/// Splits `pair{i}.{side}.layer{l}.{kind}`.
fn parse_name(name: &str) -> Option<(u64, &str, usize, &str)> {
    let mut it = name.split('.');
    let pair = it.next()?.strip_prefix("pair")?.parse().ok()?;
    let side = it.next().filter(|s| *s == "pos" || *s == "neg")?;
    let layer = it
        .next()?
        .strip_prefix("layer")?
        .parse()
        .ok()
        .filter(|l| *l >= 1)?;
    let kind = it.next().filter(|k| *k == "attn" || *k == "hidden")?;
    if it.next().is_some() {
        return None;
    }
    Some((pair, side, layer, kind))
}

struct Shape {
    heads: Option<(usize, String)>,
    dim: Option<(usize, String)>,
}

impl Shape {
    fn agree(
        slot: &mut Option<(usize, String)>,
        what: &str,
        v: usize,
        name: &str,
    ) -> Result<(), FormatError> {
        match slot {
            None => {
                *slot = Some((v, name.to_string()));
                Ok(())
            }
            Some((w, first)) if *w != v => Err(schema(format!(
                "{name}: {what} {v} disagrees with {w} in {first}"
            ))),
            Some(_) => Ok(()),
        }
    }
}

fn side_trace(
    by_name: &BTreeMap<&str, &Entry>,
    pair: u64,
    side: &str,
    num_layers: usize,
    shape: &mut Shape,
    renormalized: &mut usize,
) -> Result<ActivationTrace, FormatError> {
    let mut layers = Vec::with_capacity(num_layers);
    let mut seq_len = None;
    for layer in 1..=num_layers {
        let attn_name = entry_name(pair, side, layer, "attn");
        let hidden_name = entry_name(pair, side, layer, "hidden");
        let attn = by_name
            .get(attn_name.as_str())
            .ok_or_else(|| schema(format!("missing entry {attn_name}")))?;
        let hidden = by_name
            .get(hidden_name.as_str())
            .ok_or_else(|| schema(format!("missing entry {hidden_name}")))?;

        let [h, j, k] = match attn.dims[..] {
            [h, j, k] => [h as usize, j as usize, k as usize],
            _ => {
                return Err(schema(format!(
                    "{attn_name}: expected 3 dims, found {}",
                    attn.dims.len()
                )))
            }
        };
        if j != k || j == 0 || h == 0 {
            return Err(schema(format!(
                "{attn_name}: shape {h}x{j}x{k} is not H x J x J"
            )));
        }
        let (r, d) = match hidden.dims[..] {
            [r, d] => (r as usize, d as usize),
            _ => {
                return Err(schema(format!(
                    "{hidden_name}: expected 2 dims, found {}",
                    hidden.dims.len()
                )))
            }
        };
        if r != j {
            return Err(schema(format!(
                "{hidden_name}: {r} rows, attention has J = {j}"
            )));
        }
        if *seq_len.get_or_insert(j) != j {
            return Err(schema(format!("{attn_name}: J = {j} differs from layer 1")));
        }
        Shape::agree(&mut shape.heads, "head count", h, &attn_name)?;
        Shape::agree(&mut shape.dim, "hidden dim", d, &hidden_name)?;

        let mut data = attn.data.clone();
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(schema(format!(
                "{attn_name}: attention must be finite and nonnegative"
            )));
        }
        for row in data.chunks_exact_mut(j) {
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                return Err(schema(format!("{attn_name}: attention row sums to zero")));
            }
            if (s - 1.0).abs() > ROW_SUM_TOL {
                row.iter_mut().for_each(|v| *v /= s);
                *renormalized += 1;
            }
        }
        if hidden.data.iter().any(|v| !v.is_finite()) {
            return Err(schema(format!("{hidden_name}: non-finite hidden state")));
        }
        let head_attention =
            Tensor3::from_vec([h, j, j], data).map_err(|e| schema(format!("{attn_name}: {e}")))?;
        let mlp_input_hidden = Matrix::from_vec(j, d, hidden.data.clone())
            .map_err(|e| schema(format!("{hidden_name}: {e}")))?;
        layers.push(LayerTrace {
            head_attention,
            mlp_input_hidden,
        });
    }
    Ok(ActivationTrace {
        seq_len: seq_len.unwrap_or(0),
        layers,
    })
}

/// Rebuilds (truthful, hallucinated) traces from container entries.
///
/// The layer count is the largest layer index present; every pair must
/// carry every layer on both sides. Pairs come back in ascending id order.
pub fn ingest_external_trace(entries: &[Entry]) -> Result<Ingested, FormatError> {
    let mut by_name = BTreeMap::new();
    let mut ids = BTreeSet::new();
    let mut num_layers = 0;
    for e in entries {
        let (pair, _, layer, _) =
            parse_name(&e.name).ok_or_else(|| schema(format!("unexpected entry {}", e.name)))?;
        ids.insert(pair);
        num_layers = num_layers.max(layer);
        by_name.insert(e.name.as_str(), e);
    }
    if ids.is_empty() {
        return Err(schema("container holds no trace entries"));
    }
    let mut shape = Shape {
        heads: None,
        dim: None,
    };
    let mut renormalized_rows = 0;
    let mut pairs = Vec::with_capacity(ids.len());
    for id in ids {
        let pos = side_trace(
            &by_name,
            id,
            "pos",
            num_layers,
            &mut shape,
            &mut renormalized_rows,
        )?;
        let neg = side_trace(
            &by_name,
            id,
            "neg",
            num_layers,
            &mut shape,
            &mut renormalized_rows,
        )?;
        pairs.push((id, pos, neg));
    }
    Ok(Ingested {
        pairs,
        renormalized_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse() {
        assert_eq!(
            parse_name("pair12.neg.layer3.hidden"),
            Some((12, "neg", 3, "hidden"))
        );
        assert_eq!(parse_name("pair1.pos.layer0.attn"), None);
        assert_eq!(parse_name("pair1.mid.layer1.attn"), None);
        assert_eq!(parse_name("pair1.pos.layer1.attn.x"), None);
    }
}
