//! Weighted null-space editing of MLP weights.
//!
//! For a layer with subspace basis `V` (`D x k`) and strength `s`:
//!
//! ```text
//! N        = I - s V Vᵀ
//! mlp_up   <- mlp_up · N      (d_ff x D, reads the hidden state)
//! mlp_down <- N · mlp_down    (D x d_ff, writes the hidden state)
//! ```

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderWeights;
use crate::error::{invalid, Error, Result};
use crate::numerics::{orthonormality_deviation, svd_thin, Matrix, ORTHONORMAL_TOL};
use crate::subspace::HalluSubspace;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sides {
    Up,
    Down,
    #[default]
    Both,
}

impl Sides {
    pub fn edits_up(self) -> bool {
        matches!(self, Sides::Up | Sides::Both)
    }

    pub fn edits_down(self) -> bool {
        matches!(self, Sides::Down | Sides::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEdit {
    pub subspace: HalluSubspace,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    /// Keyed by 1-based layer index.
    pub layers: BTreeMap<usize, LayerEdit>,
    pub sides: Sides,
}

impl EditPlan {
    pub fn target_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEditReport {
    pub layer: usize,
    pub strength: f64,
    pub rank: usize,
    /// Eigenvalues of `N`, descending.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues within `ORTHONORMAL_TOL` of 1.
    pub unit_eigenvalues: usize,
    /// Eigenvalues within `ORTHONORMAL_TOL` of `1 - strength`.
    pub reduced_eigenvalues: usize,
    /// `||ΔW||_F / ||W||_F`, zero for an unedited side.
    pub relative_change_up: f64,
    pub relative_change_down: f64,
    /// `||W_ed V||_F / ||W V||_F` for up, `||Vᵀ W_ed||_F / ||Vᵀ W||_F` for
    /// down; 1 for an unedited side.
    pub residual_energy_up: f64,
    pub residual_energy_down: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub sides: Sides,
    pub layers: Vec<LayerEditReport>,
}

/// `I - strength * V Vᵀ`
pub fn weighted_null_operator(subspace: &HalluSubspace, strength: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(invalid(format!("strength {strength} outside [0, 1]")));
    }
    let dev = orthonormality_deviation(&subspace.basis);
    if dev > ORTHONORMAL_TOL {
        return Err(Error::Precondition {
            what: format!("layer {} basis is not orthonormal", subspace.layer),
            deviation: dev,
        });
    }
    let v = &subspace.basis;
    let d = v.rows();
    let mut n = v.matmul_t(v)?.scale(-strength);
    for i in 0..d {
        n[(i, i)] += 1.0;
    }
    Ok(n)
}

fn frob_ratio(num: &Matrix, den: &Matrix) -> f64 {
    let d = den.frobenius_norm();
    if d == 0.0 {
        if num.frobenius_norm() == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num.frobenius_norm() / d
    }
}

/// Returns an edited copy of `weights`; untouched matrices are cloned bit for bit.
pub fn apply_edit(
    weights: &DecoderWeights,
    plan: &EditPlan,
) -> Result<(DecoderWeights, EditReport)> {
    let d = weights.config.embed_dim;
    let num_layers = weights.layers.len();
    let mut out = weights.clone();
    let mut report = EditReport {
        sides: plan.sides,
        layers: Vec::with_capacity(plan.layers.len()),
    };
    for (&layer, edit) in &plan.layers {
        if layer == 0 || layer > num_layers {
            return Err(invalid(format!(
                "target layer {layer} outside [1, {num_layers}]"
            )));
        }
        if edit.subspace.dim() != d {
            return Err(Error::DimensionMismatch {
                context: format!("layer {layer} subspace vs hidden dimension"),
                expected: d,
                found: edit.subspace.dim(),
            });
        }
        let n = weighted_null_operator(&edit.subspace, edit.strength)?;
        let v = &edit.subspace.basis;
        let orig = &weights.layers[layer - 1];
        let dst = &mut out.layers[layer - 1];

        let (mut rel_up, mut rel_down, mut res_up, mut res_down) = (0.0, 0.0, 1.0, 1.0);
        if plan.sides.edits_up() {
            if orig.mlp_up.cols() != d {
                return Err(invalid(format!(
                    "layer {layer} side up: {} columns, expected {d}",
                    orig.mlp_up.cols()
                )));
            }
            dst.mlp_up = orig.mlp_up.matmul(&n)?;
            rel_up = frob_ratio(&dst.mlp_up.sub(&orig.mlp_up)?, &orig.mlp_up);
            res_up = frob_ratio(&dst.mlp_up.matmul(v)?, &orig.mlp_up.matmul(v)?);
        }
        if plan.sides.edits_down() {
            if orig.mlp_down.rows() != d {
                return Err(invalid(format!(
                    "layer {layer} side down: {} rows, expected {d}",
                    orig.mlp_down.rows()
                )));
            }
            dst.mlp_down = n.matmul(&orig.mlp_down)?;
            rel_down = frob_ratio(&dst.mlp_down.sub(&orig.mlp_down)?, &orig.mlp_down);
            let vt = v.transpose();
            res_down = frob_ratio(&vt.matmul(&dst.mlp_down)?, &vt.matmul(&orig.mlp_down)?);
        }

        // N is symmetric positive semidefinite, so its singular values are its eigenvalues.
        let eigenvalues = svd_thin(&n)?.sigma;
        let near = |t: f64| {
            eigenvalues
                .iter()
                .filter(|&&e| (e - t).abs() <= ORTHONORMAL_TOL)
                .count()
        };
        report.layers.push(LayerEditReport {
            layer,
            strength: edit.strength,
            rank: edit.subspace.rank(),
            unit_eigenvalues: near(1.0),
            reduced_eigenvalues: near(1.0 - edit.strength),
            eigenvalues,
            relative_change_up: rel_up,
            relative_change_down: rel_down,
            residual_energy_up: res_up,
            residual_energy_down: res_down,
        });
    }
    Ok((out, report))
}
