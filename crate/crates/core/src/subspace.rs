//! Attention-weighted contrastive features and the per-layer hallucination
//! subspace (top right singular vectors of the difference matrix).

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::ActivationTrace;
use crate::error::{invalid, Error, Result};
use crate::his::mean_attention;
use crate::numerics::{svd_thin, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionalProfile {
    /// 1-based layer index.
    pub layer: usize,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalluSubspace {
    /// 1-based layer index.
    pub layer: usize,
    /// `D x k`, orthonormal columns.
    pub basis: Matrix,
    /// `k` values, descending.
    pub singular_values: Vec<f64>,
}

impl HalluSubspace {
    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    pub fn dim(&self) -> usize {
        self.basis.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubspaceConfig {
    pub rank: usize,
    /// Subtract the column mean of the difference matrix before the SVD.
    pub center: bool,
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            center: false,
        }
    }
}

/// Singular values at or below this fraction of the largest count as zero.
pub const DEGENERATE_REL_TOL: f64 = 1e-12;

/// Column mean of a head-averaged attention map, renormalised to sum 1.
pub fn positional_profile(mean_attn: &Matrix) -> Vec<f64> {
    let (j, k) = mean_attn.shape();
    let mut pi = alloc::vec![0.0; k];
    for r in 0..j {
        for (p, v) in pi.iter_mut().zip(mean_attn.row(r)) {
            *p += v;
        }
    }
    let total: f64 = pi.iter().sum();
    if total > 0.0 {
        pi.iter_mut().for_each(|p| *p /= total);
    }
    pi
}

/// `sum_j pi[j] * hidden[j, :]`
pub fn attention_weighted_feature(profile: &[f64], hidden: &Matrix) -> Result<Vec<f64>> {
    if profile.len() != hidden.rows() {
        return Err(Error::DimensionMismatch {
            context: "profile length vs hidden rows".into(),
            expected: hidden.rows(),
            found: profile.len(),
        });
    }
    let mut z = alloc::vec![0.0; hidden.cols()];
    for (j, &w) in profile.iter().enumerate() {
        for (o, h) in z.iter_mut().zip(hidden.row(j)) {
            *o += w * h;
        }
    }
    Ok(z)
}

/// Row `i` is `z_pos[i] - z_neg[i]`; both lists are keyed by pair id and
/// must carry the same ids in the same order.
pub fn difference_matrix(z_pos: &[(u64, Vec<f64>)], z_neg: &[(u64, Vec<f64>)]) -> Result<Matrix> {
    if z_pos.len() != z_neg.len() {
        return Err(Error::DimensionMismatch {
            context: "difference matrix pair count".into(),
            expected: z_pos.len(),
            found: z_neg.len(),
        });
    }
    let d = z_pos.first().map_or(0, |(_, z)| z.len());
    let mut out = Matrix::zeros(z_pos.len(), d);
    for (i, ((ip, p), (in_, n))) in z_pos.iter().zip(z_neg).enumerate() {
        if ip != in_ {
            return Err(invalid(format!("row {i}: pair id {ip} aligned with {in_}")));
        }
        if p.len() != d || n.len() != d {
            return Err(Error::DimensionMismatch {
                context: format!("feature width of pair {ip}"),
                expected: d,
                found: if p.len() != d { p.len() } else { n.len() },
            });
        }
        for ((o, a), b) in out.row_mut(i).iter_mut().zip(p).zip(n) {
            *o = a - b;
        }
    }
    Ok(out)
}

/// Top-`k` right singular vectors of `z`.
///
/// Fails with [`Error::DegenerateSubspace`] when `z` has fewer than `k`
/// singular values above `DEGENERATE_REL_TOL * sigma_1` (including `z = 0`).
pub fn extract_subspace(layer: usize, z: &Matrix, k: usize) -> Result<HalluSubspace> {
    let (n, d) = z.shape();
    if k == 0 || k > n.min(d) {
        return Err(invalid(format!("rank {k} outside [1, min(N={n}, D={d})]")));
    }
    let svd = svd_thin(z)?;
    let s1 = svd.sigma[0];
    let sk = svd.sigma[k - 1];
    if s1 <= 0.0 || sk <= DEGENERATE_REL_TOL * s1 {
        return Err(Error::DegenerateSubspace(format!(
            "layer {layer}: sigma_{k} = {sk:e} with sigma_1 = {s1:e}"
        )));
    }
    Ok(HalluSubspace {
        layer,
        basis: svd.right_vectors(k),
        singular_values: svd.sigma[..k].to_vec(),
    })
}

fn feature(trace: &ActivationTrace, layer: usize) -> Result<Vec<f64>> {
    let lt = &trace.layers[layer];
    let pi = positional_profile(&mean_attention(&lt.head_attention));
    attention_weighted_feature(&pi, &lt.mlp_input_hidden)
}

/// Difference matrix of one layer (0-based `layer`), rows ordered like `pairs`.
pub fn layer_difference_matrix(
    pairs: &[(u64, ActivationTrace, ActivationTrace)],
    layer: usize,
    center: bool,
) -> Result<Matrix> {
    let mut pos = Vec::with_capacity(pairs.len());
    let mut neg = Vec::with_capacity(pairs.len());
    for (id, p, q) in pairs {
        if layer >= p.num_layers() || layer >= q.num_layers() {
            return Err(invalid(format!("pair {id} has no layer {}", layer + 1)));
        }
        pos.push((*id, feature(p, layer)?));
        neg.push((*id, feature(q, layer)?));
    }
    let mut z = difference_matrix(&pos, &neg)?;
    if center && z.rows() > 0 {
        let inv = 1.0 / z.rows() as f64;
        for c in 0..z.cols() {
            let mean = z.column(c).iter().sum::<f64>() * inv;
            for r in 0..z.rows() {
                z[(r, c)] -= mean;
            }
        }
    }
    Ok(z)
}

/// One subspace per layer of the traces.
pub fn layer_subspaces(
    pairs: &[(u64, ActivationTrace, ActivationTrace)],
    cfg: &SubspaceConfig,
) -> Result<Vec<HalluSubspace>> {
    let num_layers = pairs
        .first()
        .ok_or_else(|| invalid("no contrastive pairs"))?
        .1
        .num_layers();
    (0..num_layers)
        .map(|l| {
            let z = layer_difference_matrix(pairs, l, cfg.center)?;
            extract_subspace(l + 1, &z, cfg.rank)
        })
        .collect()
}
