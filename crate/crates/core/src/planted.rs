//! A hand-wired captioning decoder with one planted co-occurrence
//! hallucination, and the matching synthetic world.
//!
//! The residual stream is laid out along seeded orthonormal directions, all
//! orthogonal to the all-ones vector so layer norm only rescales them:
//! a constant bias direction `b`, markers for BOS/SEP/EOS, a visual-token
//! marker `m_v`, a caption-token marker `m_c`, and per-object visual `g_o`
//! and caption `c_o` directions.
//!
//! Layer 1 (knowledge):
//! - head 0 grounds each caption token on its own visual token (values are
//!   zero, so it shapes attention only);
//! - head 1 attends to visual tokens and writes their `g_o`;
//! - head 2 attends to caption tokens and writes `-c_o` for objects already
//!   mentioned;
//! - MLP unit `o` fires for present objects and writes `c_o`, with a small
//!   per-id threshold step so lower ids win.
//!
//! Injection layer: a single MLP unit that fires when the trigger object is
//! present and the planted object not yet mentioned, and writes `c_planted`.
//!
//! The output maps `c_o` to the caption token of `o` and `b` to EOS with a
//! small margin, so a caption ends once every present object is named.

use alloc::vec::Vec;

use rand_core::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::corpus::{ObjectId, SyntheticWorldConfig, Vocabulary, BOS_TOKEN, SEP_TOKEN};
use crate::decoder::{init_decoder, symmetric_unit, DecoderConfig, DecoderWeights, EOS_TOKEN};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedCircuit {
    pub planted_object: ObjectId,
    pub trigger_object: ObjectId,
    /// 1-based layer carrying the injection unit; must be > 1.
    pub injection_layer: usize,
    /// Multiplier applied to the random base weights.
    pub noise_scale: f64,
    pub bias: f64,
    pub grounding_gain: f64,
    pub gather_gain: f64,
    pub visual_gain: f64,
    pub mention_suppression: f64,
    pub knowledge_gain: f64,
    pub knowledge_threshold: f64,
    pub knowledge_order_step: f64,
    pub knowledge_output: f64,
    pub trigger_gain: f64,
    pub trigger_target_gain: f64,
    pub trigger_threshold: f64,
    pub injection_output: f64,
    pub eos_margin: f64,
}

impl Default for PlantedCircuit {
    fn default() -> Self {
        Self {
            planted_object: 0,
            trigger_object: 1,
            injection_layer: 2,
            noise_scale: 0.01,
            bias: 4.0,
            grounding_gain: 12.0,
            gather_gain: 3.0,
            visual_gain: 8.0,
            mention_suppression: 25.0,
            knowledge_gain: 4.0,
            knowledge_threshold: 1.0,
            knowledge_order_step: 0.05,
            knowledge_output: 0.5,
            trigger_gain: 3.0,
            trigger_target_gain: 2.0,
            trigger_threshold: 1.2,
            injection_output: 1.0,
            eos_margin: 0.15,
        }
    }
}

/// Seed offset separating the direction basis from the weight stream.
pub const BASIS_SEED_XOR: u64 = 0xAB_CDEF;

/// `n` orthonormal vectors of length `d`, each orthogonal to the all-ones vector.
///
/// Candidates are centred SplitMix64 draws, orthogonalised twice against the
/// accepted set.
pub fn centered_basis(n: usize, d: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n >= d {
        return Err(Error::InvalidConfig(alloc::format!(
            "{n} centred directions do not fit in dimension {d}"
        )));
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| symmetric_unit(&mut rng)).collect();
        let mean = v.iter().sum::<f64>() / d as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        for _ in 0..2 {
            for u in &out {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
        }
        let len = norm(&v);
        if len > 1e-6 {
            v.iter_mut().for_each(|x| *x /= len);
            out.push(v);
        }
    }
    Ok(out)
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    dst.iter_mut().zip(src).for_each(|(d, x)| *d += s * x);
}

fn add_to_column(m: &mut crate::numerics::Matrix, col: usize, src: &[f64], s: f64) {
    for (r, x) in src.iter().enumerate() {
        m[(r, col)] += s * x;
    }
}

impl PlantedCircuit {
    fn check(&self, config: &DecoderConfig, vocab: &Vocabulary) -> Result<()> {
        config.validate()?;
        let o = vocab.num_objects as usize;
        let bad = |msg: alloc::string::String| Err(Error::InvalidConfig(msg));
        if config.vocab_size < vocab.required_size() {
            return bad(alloc::format!(
                "vocab_size {} < {} needed for {o} objects",
                config.vocab_size,
                vocab.required_size()
            ));
        }
        if config.num_heads < 3 || config.head_dim() < o {
            return bad(alloc::format!(
                "planted circuit needs >= 3 heads of width >= {o}, got {} of width {}",
                config.num_heads,
                config.head_dim()
            ));
        }
        if config.mlp_dim < o {
            return bad(alloc::format!("mlp_dim {} < {o}", config.mlp_dim));
        }
        if self.injection_layer < 2 || self.injection_layer > config.num_layers {
            return bad(alloc::format!(
                "injection_layer {} outside [2, {}]",
                self.injection_layer,
                config.num_layers
            ));
        }
        let (p, t) = (self.planted_object, self.trigger_object);
        if p == t || p >= vocab.num_objects || t >= vocab.num_objects {
            return bad(alloc::format!(
                "planted {p} / trigger {t} invalid for {o} objects"
            ));
        }
        Ok(())
    }

    /// Random base weights from `config.seed`, scaled by `noise_scale`, with
    /// the circuit added on top.
    pub fn build(&self, config: &DecoderConfig, vocab: &Vocabulary) -> Result<DecoderWeights> {
        self.check(config, vocab)?;
        let mut w = init_decoder(config)?;
        let s = self.noise_scale;
        for m in [
            &mut w.token_embedding,
            &mut w.position_embedding,
            &mut w.output,
        ] {
            m.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
        for l in &mut w.layers {
            for m in [
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo_attn,
                &mut l.mlp_up,
                &mut l.mlp_down,
            ] {
                m.as_mut_slice().iter_mut().for_each(|x| *x *= s);
            }
        }

        let o = vocab.num_objects as usize;
        let dirs = centered_basis(6 + 2 * o, config.embed_dim, config.seed ^ BASIS_SEED_XOR)?;
        let (b, bos, sep, eos, mv, mc) =
            (&dirs[0], &dirs[1], &dirs[2], &dirs[3], &dirs[4], &dirs[5]);
        let g = &dirs[6..6 + o];
        let c = &dirs[6 + o..6 + 2 * o];

        let te = &mut w.token_embedding;
        for r in 0..te.rows() {
            add_scaled(te.row_mut(r), b, self.bias);
        }
        add_scaled(te.row_mut(BOS_TOKEN as usize), bos, 1.0);
        add_scaled(te.row_mut(SEP_TOKEN as usize), sep, 1.0);
        add_scaled(te.row_mut(EOS_TOKEN as usize), eos, 1.0);
        for i in 0..o {
            let obj = i as ObjectId;
            let vt = vocab.visual_token(obj) as usize;
            add_scaled(te.row_mut(vt), &g[i], 1.0);
            add_scaled(te.row_mut(vt), mv, 1.0);
            let ct = vocab.caption_token(obj) as usize;
            add_scaled(te.row_mut(ct), &c[i], 1.0);
            add_scaled(te.row_mut(ct), mc, 1.0);
        }

        let hd = config.head_dim();
        let l1 = &mut w.layers[0];
        for i in 0..o {
            add_scaled(l1.wq.row_mut(i), &c[i], self.grounding_gain);
            add_scaled(l1.wk.row_mut(i), &g[i], 1.0);
        }
        add_scaled(l1.wq.row_mut(hd), b, self.gather_gain);
        add_scaled(l1.wk.row_mut(hd), mv, 1.0);
        add_scaled(l1.wq.row_mut(2 * hd), b, self.gather_gain);
        add_scaled(l1.wk.row_mut(2 * hd), mc, 1.0);
        for i in 0..o {
            add_scaled(l1.wv.row_mut(hd + i), &g[i], 1.0);
            add_scaled(l1.wv.row_mut(2 * hd + i), &c[i], 1.0);
            add_to_column(&mut l1.wo_attn, hd + i, &g[i], self.visual_gain);
            add_to_column(
                &mut l1.wo_attn,
                2 * hd + i,
                &c[i],
                -self.mention_suppression,
            );
            let up = l1.mlp_up.row_mut(i);
            add_scaled(up, &g[i], self.knowledge_gain);
            add_scaled(up, &c[i], self.knowledge_gain);
            add_scaled(
                up,
                b,
                -(self.knowledge_threshold + self.knowledge_order_step * i as f64),
            );
            add_to_column(&mut l1.mlp_down, i, &c[i], self.knowledge_output);
        }

        let (p, t) = (self.planted_object as usize, self.trigger_object as usize);
        let inj = &mut w.layers[self.injection_layer - 1];
        let up = inj.mlp_up.row_mut(0);
        add_scaled(up, &g[t], self.trigger_gain);
        add_scaled(up, &c[p], self.trigger_target_gain);
        add_scaled(up, b, -self.trigger_threshold);
        add_to_column(&mut inj.mlp_down, 0, &c[p], self.injection_output);

        let out = &mut w.output;
        for r in 0..out.rows() {
            add_scaled(out.row_mut(r), b, -1.0);
        }
        add_scaled(out.row_mut(EOS_TOKEN as usize), b, 1.0 + self.eos_margin);
        for i in 0..o {
            let row = out.row_mut(vocab.caption_token(i as ObjectId) as usize);
            add_scaled(row, b, 1.0);
            add_scaled(row, &c[i], 1.0);
        }
        Ok(w)
    }

    /// Caption direction `c_planted` of the circuit built for `config`.
    pub fn planted_direction(
        &self,
        config: &DecoderConfig,
        vocab: &Vocabulary,
    ) -> Result<Vec<f64>> {
        self.check(config, vocab)?;
        let o = vocab.num_objects as usize;
        let dirs = centered_basis(6 + 2 * o, config.embed_dim, config.seed ^ BASIS_SEED_XOR)?;
        Ok(dirs[6 + o + self.planted_object as usize].clone())
    }
}

/// Co-occurrence for a world with one strong planted pair.
///
/// `cooc(trigger, planted) = planted_strength`; every other object co-occurs
/// with `planted` at `background`; non-planted objects form a ring (ascending
/// id, wrapping) with `neighbour` between adjacent members; zero elsewhere.
pub fn planted_cooccurrence(
    num_objects: u32,
    planted: ObjectId,
    trigger: ObjectId,
    planted_strength: f64,
    background: f64,
    neighbour: f64,
) -> Vec<Vec<f64>> {
    let n = num_objects as usize;
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|a| (0..n).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
        .collect();
    let ring: Vec<usize> = (0..n).filter(|&o| o != planted as usize).collect();
    if ring.len() > 1 {
        for (i, &a) in ring.iter().enumerate() {
            let nb = ring[(i + 1) % ring.len()];
            m[a][nb] = neighbour;
            m[nb][a] = neighbour;
        }
    }
    let p = planted as usize;
    for a in (0..n).filter(|&a| a != p) {
        m[a][p] = background;
        m[p][a] = background;
    }
    m[trigger as usize][p] = planted_strength;
    m[p][trigger as usize] = planted_strength;
    m
}

/// The eight-object world used by the end-to-end experiment.
pub fn default_world(num_pairs: usize, seed: u64) -> SyntheticWorldConfig {
    let names = [
        "chair", "bed", "lamp", "table", "rug", "window", "plant", "clock",
    ];
    SyntheticWorldConfig {
        num_objects: 8,
        cooccurrence: planted_cooccurrence(8, 0, 1, 0.9, 0.3, 0.1),
        num_pairs,
        seed,
        scene_size: 3,
        object_names: Some(names.iter().map(|s| (*s).into()).collect()),
    }
}

/// Decoder shape of the end-to-end experiment.
pub fn default_decoder_config() -> DecoderConfig {
    DecoderConfig {
        vocab_size: 64,
        embed_dim: 32,
        num_heads: 4,
        num_layers: 4,
        mlp_dim: 64,
        max_seq_len: 16,
        seed: 11,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_orthonormal_and_centred() {
        let dirs = centered_basis(10, 16, 5).unwrap();
        for (i, a) in dirs.iter().enumerate() {
            assert!(a.iter().sum::<f64>().abs() < 1e-12);
            for (j, b) in dirs.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(a, b) - want).abs() < 1e-12);
            }
        }
        assert!(centered_basis(16, 16, 5).is_err());
    }

    #[test]
    fn world_matrix_shape() {
        let w = default_world(4, 1);
        w.validate().unwrap();
        assert_eq!(w.cooccurrence[1][0], 0.9);
        assert_eq!(w.cooccurrence[5][0], 0.3);
        assert_eq!(w.cooccurrence[2][3], 0.1);
        assert_eq!(w.cooccurrence[7][1], 0.1);
        assert_eq!(w.cooccurrence[2][5], 0.0);
    }

    #[test]
    fn circuit_rejects_narrow_heads() {
        let mut cfg = default_decoder_config();
        cfg.num_heads = 8;
        let err = PlantedCircuit::default().build(&cfg, &Vocabulary::new(8));
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }
}
