//! Per-layer divergence between truthful and hallucinated attention-value
//! histograms, normalised across layers into editing strengths.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::ActivationTrace;
use crate::error::{invalid, Result};
use crate::numerics::{Matrix, Tensor3};

/// Which entries of a `J x J` causal map enter the histogram.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Lower triangle including the diagonal.
    #[default]
    ExcludeMasked,
    /// All `J * J` entries, masked zeros included.
    IncludeAll,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// One histogram per class per layer, pooled over every pair.
    #[default]
    Pooled,
    /// Mean of per-pair divergences.
    PerPairMean,
}

/// Histograms always span `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HisConfig {
    pub num_bins: usize,
    pub smoothing_epsilon: f64,
    pub mask_policy: MaskPolicy,
    pub aggregation: Aggregation,
}

impl Default for HisConfig {
    fn default() -> Self {
        Self {
            num_bins: 100,
            smoothing_epsilon: 1e-10,
            mask_policy: MaskPolicy::ExcludeMasked,
            aggregation: Aggregation::Pooled,
        }
    }
}

impl HisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            return Err(crate::Error::InvalidConfig("num_bins must be >= 2".into()));
        }
        if !(self.smoothing_epsilon > 0.0 && self.smoothing_epsilon.is_finite()) {
            return Err(crate::Error::InvalidConfig(
                "smoothing_epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    /// 1-based layer index.
    pub layer: usize,
    pub his_raw: f64,
    pub his_norm: f64,
    pub his_complement: f64,
}

/// Layers whose raw scores span less than this are treated as all equal.
pub const EQUAL_RANGE_TOL: f64 = 1e-12;

/// Elementwise mean over heads of an `H x J x J` attention tensor.
pub fn mean_attention(trace_layer: &Tensor3) -> Matrix {
    let [h, j, k] = trace_layer.dims();
    let mut out = Matrix::zeros(j, k);
    for head in 0..h {
        for (o, v) in out
            .as_mut_slice()
            .iter_mut()
            .zip(trace_layer.slab_slice(head))
        {
            *o += v;
        }
    }
    if h > 0 {
        let inv = 1.0 / h as f64;
        out.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Raw bin counts, accumulated across any number of maps.
#[derive(Clone, Debug, PartialEq)]
pub struct BinCounts {
    counts: Vec<u64>,
}

impl BinCounts {
    pub fn new(num_bins: usize) -> Self {
        Self {
            counts: vec![0; num_bins],
        }
    }

    /// Bin `floor(v * B)`, clamped so that `1.0` lands in the last bin.
    #[inline]
    pub fn add_value(&mut self, v: f64) {
        let b = self.counts.len();
        let idx = if v >= 1.0 {
            b - 1
        } else if v <= 0.0 {
            0
        } else {
            ((v * b as f64) as usize).min(b - 1)
        };
        self.counts[idx] += 1;
    }

    pub fn add_map(&mut self, map: &Matrix, policy: MaskPolicy) {
        for r in 0..map.rows() {
            let row = map.row(r);
            let valid = match policy {
                MaskPolicy::ExcludeMasked => (r + 1).min(row.len()),
                MaskPolicy::IncludeAll => row.len(),
            };
            for &v in &row[..valid] {
                self.add_value(v);
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Adds `eps` to every count and normalises to a probability vector.
    pub fn to_distribution(&self, eps: f64) -> Result<Vec<f64>> {
        if self.total() == 0 {
            return Err(invalid("histogram selection is empty"));
        }
        let denom = self.total() as f64 + eps * self.counts.len() as f64;
        Ok(self
            .counts
            .iter()
            .map(|&c| (c as f64 + eps) / denom)
            .collect())
    }
}

/// Smoothed value histogram of one head-averaged attention map.
pub fn attention_histogram(mean_attn: &Matrix, cfg: &HisConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if mean_attn.rows() == 0 || mean_attn.cols() == 0 {
        return Err(invalid("attention map is empty"));
    }
    if let Some(v) = mean_attn
        .as_slice()
        .iter()
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(invalid(format!("attention value {v} outside [0, 1]")));
    }
    let mut counts = BinCounts::new(cfg.num_bins);
    counts.add_map(mean_attn, cfg.mask_policy);
    counts.to_distribution(cfg.smoothing_epsilon)
}

const DISTRIBUTION_SUM_TOL: f64 = 1e-9;

/// `KL(p || q)` in nats.
pub fn kl_histogram(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid(format!(
            "histogram lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(invalid("empty histogram"));
    }
    for (name, h) in [("p", p), ("q", q)] {
        if let Some(v) = h.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(invalid(format!("{name} has non-positive entry {v}")));
        }
        let s: f64 = h.iter().sum();
        if (s - 1.0).abs() > DISTRIBUTION_SUM_TOL {
            return Err(invalid(format!("{name} sums to {s}, not 1")));
        }
    }
    let kl: f64 = p.iter().zip(q).map(|(&a, &b)| a * libm::log(a / b)).sum();
    // Rounding can leave tiny negatives for equal inputs.
    Ok(kl.max(0.0))
}

/// Min-max normalisation of raw scores; all-equal profiles map to 0.5.
pub fn normalize_profile(raw: &[f64]) -> Vec<LayerScore> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    raw.iter()
        .enumerate()
        .map(|(i, &r)| {
            let norm = if range > EQUAL_RANGE_TOL {
                ((r - lo) / range).clamp(0.0, 1.0)
            } else {
                0.5
            };
            LayerScore {
                layer: i + 1,
                his_raw: r,
                his_norm: norm,
                his_complement: 1.0 - norm,
            }
        })
        .collect()
}

fn check_shapes(pairs: &[(ActivationTrace, ActivationTrace)]) -> Result<(usize, usize)> {
    let first = &pairs
        .first()
        .ok_or_else(|| invalid("no contrastive pairs"))?
        .0;
    let (l, h) = (first.num_layers(), first.num_heads());
    if l == 0 {
        return Err(invalid("traces have no layers"));
    }
    for (i, (pos, neg)) in pairs.iter().enumerate() {
        for (side, t) in [("pos", pos), ("neg", neg)] {
            if t.num_layers() != l {
                return Err(invalid(format!(
                    "pair {i} {side}: {} layers, expected {l}",
                    t.num_layers()
                )));
            }
            if let Some(bad) = t
                .layers
                .iter()
                .position(|lt| lt.head_attention.dims()[0] != h)
            {
                return Err(invalid(format!(
                    "pair {i} {side} layer {}: head count differs from {h}",
                    bad + 1
                )));
            }
        }
    }
    Ok((l, h))
}

/// Scores every layer over a set of (truthful, hallucinated) trace pairs.
pub fn his_profile(
    pairs: &[(ActivationTrace, ActivationTrace)],
    cfg: &HisConfig,
) -> Result<Vec<LayerScore>> {
    cfg.validate()?;
    let (num_layers, _) = check_shapes(pairs)?;
    let mut raw = Vec::with_capacity(num_layers);
    for layer in 0..num_layers {
        let score = match cfg.aggregation {
            Aggregation::Pooled => {
                let mut p = BinCounts::new(cfg.num_bins);
                let mut q = BinCounts::new(cfg.num_bins);
                for (pos, neg) in pairs {
                    p.add_map(
                        &mean_attention(&pos.layers[layer].head_attention),
                        cfg.mask_policy,
                    );
                    q.add_map(
                        &mean_attention(&neg.layers[layer].head_attention),
                        cfg.mask_policy,
                    );
                }
                kl_histogram(
                    &p.to_distribution(cfg.smoothing_epsilon)?,
                    &q.to_distribution(cfg.smoothing_epsilon)?,
                )?
            }
            Aggregation::PerPairMean => {
                let mut total = 0.0;
                for (pos, neg) in pairs {
                    let p = attention_histogram(
                        &mean_attention(&pos.layers[layer].head_attention),
                        cfg,
                    )?;
                    let q = attention_histogram(
                        &mean_attention(&neg.layers[layer].head_attention),
                        cfg,
                    )?;
                    total += kl_histogram(&p, &q)?;
                }
                total / pairs.len() as f64
            }
        };
        raw.push(score);
    }
    Ok(normalize_profile(&raw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn mean_of_two_heads() {
        let t = Tensor3::from_vec(
            [2, 2, 2],
            alloc::vec![1.0, 0.0, 0.5, 0.5, 1.0, 0.0, 0.1, 0.9],
        )
        .unwrap();
        let m = mean_attention(&t);
        let want = [1.0, 0.0, 0.3, 0.7];
        for (a, b) in m.as_slice().iter().zip(want) {
            assert!(close(*a, b, 1e-15));
        }
    }

    #[test]
    fn single_head_mean_is_identity() {
        let t = Tensor3::from_vec([1, 2, 2], alloc::vec![1.0, 0.0, 0.25, 0.75]).unwrap();
        assert_eq!(mean_attention(&t).as_slice(), t.slab_slice(0));
    }

    #[test]
    fn causal_count_two_bins() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.5, 0.5]]).unwrap();
        // 0.5 sits on the bin edge and belongs to the upper bin.
        let mut c = BinCounts::new(2);
        c.add_map(&m, MaskPolicy::ExcludeMasked);
        assert_eq!(c.counts(), &[0, 3]);
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.2, 0.8]]).unwrap();
        let mut c = BinCounts::new(2);
        c.add_map(&m, MaskPolicy::ExcludeMasked);
        assert_eq!(c.counts(), &[1, 2]);
        let mut c = BinCounts::new(2);
        c.add_map(&m, MaskPolicy::IncludeAll);
        assert_eq!(c.counts(), &[2, 2]);
    }

    #[test]
    fn all_half_two_bins_is_nearly_one_hot() {
        let m = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let cfg = HisConfig {
            num_bins: 2,
            mask_policy: MaskPolicy::IncludeAll,
            ..HisConfig::default()
        };
        let h = attention_histogram(&m, &cfg).unwrap();
        assert!(h[0] < 1e-9 && close(h[1], 1.0, 1e-9));
        assert!(close(h.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn kl_analytic_values() {
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        let fwd = 0.5 * libm::log(2.0) + 0.5 * libm::log(2.0 / 3.0);
        let rev = 0.25 * libm::log(0.5) + 0.75 * libm::log(1.5);
        assert!(close(kl_histogram(&p, &q).unwrap(), fwd, 1e-12));
        assert!(close(kl_histogram(&q, &p).unwrap(), rev, 1e-12));
        assert!(close(fwd, 0.143_841_036_225_890_1, 1e-12));
        assert_eq!(kl_histogram(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        assert!(kl_histogram(&[0.5, 0.5], &[1.0]).is_err());
        assert!(kl_histogram(&[1.0, 0.0], &[0.5, 0.5]).is_err());
        assert!(kl_histogram(&[0.6, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn normalisation_endpoints() {
        let s = normalize_profile(&[0.0, 2.0, 1.0]);
        assert_eq!(s[0].his_complement, 1.0);
        assert_eq!(s[1].his_complement, 0.0);
        assert_eq!(s[2].his_norm, 0.5);
        let flat = normalize_profile(&[0.3, 0.3]);
        assert!(flat
            .iter()
            .all(|l| l.his_norm == 0.5 && l.his_complement == 0.5));
        assert_eq!(flat[1].layer, 2);
    }
}
