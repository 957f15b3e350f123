//! Minimal pre-norm transformer decoder with activation capture.
//!
//! Block layout per layer:
//!
//! ```text
//! h   = LN(x)
//! x  += Wo_attn · concat_h( softmax_causal(q_h k_hᵀ / sqrt(D/H)) v_h )
//! h2  = LN(x)                       <- captured as `mlp_input_hidden`
//! x  += W_down · GELU(W_up · h2)
//! ```
//!
//! followed by a final `LN` and `logits = W_o · LN(x)`. Layer norms carry no
//! affine parameters. All weights are stored `out x in`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{gelu, layer_norm_rows, softmax_rows, Mask, Matrix, Tensor3};

pub type TokenId = u32;

/// Generation stops after emitting this id.
pub const EOS_TOKEN: TokenId = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("mlp_dim", self.mlp_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.max_seq_len < 2 {
            return Err(Error::InvalidConfig("max_seq_len must be >= 2".into()));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo_attn: Matrix,
    /// `mlp_dim x embed_dim`
    pub mlp_up: Matrix,
    /// `embed_dim x mlp_dim`
    pub mlp_down: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights {
    pub config: DecoderConfig,
    /// `vocab_size x embed_dim`
    pub token_embedding: Matrix,
    /// `max_seq_len x embed_dim`, learned absolute positions.
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    /// `vocab_size x embed_dim`
    pub output: Matrix,
}

/// Per-layer captures from one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    /// `heads x J x J` post-softmax causal attention probabilities.
    pub head_attention: Tensor3,
    /// `J x D` normalised hidden states entering the MLP block.
    pub mlp_input_hidden: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub seq_len: usize,
    pub layers: Vec<LayerTrace>,
}

impl ActivationTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers
            .first()
            .map_or(0, |l| l.head_attention.dims()[0])
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.mlp_input_hidden.cols())
    }
}

/// Uniform draw in `[-1, 1)` from the top 53 bits of a SplitMix64 output.
#[inline]
pub(crate) fn symmetric_unit(rng: &mut SplitMix64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    2.0 * u - 1.0
}

fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| symmetric_unit(rng) * scale)
}

/// Draws every weight from a SplitMix64 stream seeded with `config.seed`.
///
/// Entries are `(2u - 1) / sqrt(D)` with `u = (next_u64 >> 11) * 2^-53`, drawn
/// in this order: token embedding, position embedding, then per layer
/// `wq, wk, wv, wo_attn, mlp_up, mlp_down`, then the output projection.
pub fn init_decoder(config: &DecoderConfig) -> Result<DecoderWeights> {
    config.validate()?;
    let d = config.embed_dim;
    let scale = 1.0 / libm::sqrt(d as f64);
    let mut rng = SplitMix64::seed_from_u64(config.seed);

    let token_embedding = random_matrix(&mut rng, config.vocab_size, d, scale);
    let position_embedding = random_matrix(&mut rng, config.max_seq_len, d, scale);
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            wq: random_matrix(&mut rng, d, d, scale),
            wk: random_matrix(&mut rng, d, d, scale),
            wv: random_matrix(&mut rng, d, d, scale),
            wo_attn: random_matrix(&mut rng, d, d, scale),
            mlp_up: random_matrix(&mut rng, config.mlp_dim, d, scale),
            mlp_down: random_matrix(&mut rng, d, config.mlp_dim, scale),
        })
        .collect();
    let output = random_matrix(&mut rng, config.vocab_size, d, scale);

    Ok(DecoderWeights {
        config: config.clone(),
        token_embedding,
        position_embedding,
        layers,
        output,
    })
}

impl DecoderWeights {
    /// Checks every matrix against the shapes implied by `config`.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.embed_dim;
        let check = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.shape() != (rows, cols) {
                return Err(invalid(format!(
                    "{name} has shape {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(invalid(format!("{name} contains non-finite entries")));
            }
            Ok(())
        };
        check("token_embedding", &self.token_embedding, c.vocab_size, d)?;
        check(
            "position_embedding",
            &self.position_embedding,
            c.max_seq_len,
            d,
        )?;
        check("output", &self.output, c.vocab_size, d)?;
        if self.layers.len() != c.num_layers {
            return Err(Error::DimensionMismatch {
                context: "decoder layers".into(),
                expected: c.num_layers,
                found: self.layers.len(),
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            check(&format!("layer{}.wq", i + 1), &l.wq, d, d)?;
            check(&format!("layer{}.wk", i + 1), &l.wk, d, d)?;
            check(&format!("layer{}.wv", i + 1), &l.wv, d, d)?;
            check(&format!("layer{}.wo_attn", i + 1), &l.wo_attn, d, d)?;
            check(&format!("layer{}.mlp_up", i + 1), &l.mlp_up, c.mlp_dim, d)?;
            check(
                &format!("layer{}.mlp_down", i + 1),
                &l.mlp_down,
                d,
                c.mlp_dim,
            )?;
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(invalid("token sequence is empty"));
        }
        if tokens.len() > c.max_seq_len {
            return Err(invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                c.max_seq_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(invalid(format!(
                "token id {t} out of range for vocab_size {}",
                c.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the decoder over `tokens`, returning pre-softmax logits (`J x V`)
    /// and the per-layer attention maps and MLP inputs.
    pub fn forward_capture(&self, tokens: &[TokenId]) -> Result<(Matrix, ActivationTrace)> {
        let (logits, layers) = self.run(tokens, true)?;
        Ok((
            logits,
            ActivationTrace {
                seq_len: tokens.len(),
                layers,
            },
        ))
    }

    /// Logits only; same arithmetic as [`forward_capture`](Self::forward_capture).
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Matrix> {
        self.run(tokens, false).map(|(logits, _)| logits)
    }

    fn run(&self, tokens: &[TokenId], capture: bool) -> Result<(Matrix, Vec<LayerTrace>)> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let d = c.embed_dim;
        let hd = c.head_dim();
        let j = tokens.len();
        let inv_scale = 1.0 / libm::sqrt(hd as f64);

        let mut x = Matrix::zeros(j, d);
        for (pos, &t) in tokens.iter().enumerate() {
            let tok = self.token_embedding.row(t as usize);
            let p = self.position_embedding.row(pos);
            for ((dst, a), b) in x.row_mut(pos).iter_mut().zip(tok).zip(p) {
                *dst = a + b;
            }
        }

        let mut traces = Vec::with_capacity(if capture { c.num_layers } else { 0 });
        for layer in &self.layers {
            let h = layer_norm_rows(&x);
            let q = h.matmul_t(&layer.wq)?;
            let k = h.matmul_t(&layer.wk)?;
            let v = h.matmul_t(&layer.wv)?;

            let mut heads_out = Matrix::zeros(j, d);
            let mut maps = Vec::with_capacity(if capture { c.num_heads } else { 0 });
            for head in 0..c.num_heads {
                let lo = head * hd;
                let mut scores = Matrix::zeros(j, j);
                for a in 0..j {
                    let qa = &q.row(a)[lo..lo + hd];
                    for b in 0..=a {
                        let kb = &k.row(b)[lo..lo + hd];
                        scores[(a, b)] = crate::numerics::dot(qa, kb) * inv_scale;
                    }
                }
                let probs = softmax_rows(&scores, Mask::Causal)?;
                for a in 0..j {
                    let dst = &mut heads_out.row_mut(a)[lo..lo + hd];
                    for b in 0..=a {
                        let w = probs[(a, b)];
                        for (o, vb) in dst.iter_mut().zip(&v.row(b)[lo..lo + hd]) {
                            *o += w * vb;
                        }
                    }
                }
                if capture {
                    maps.push(probs);
                }
            }
            let attn = heads_out.matmul_t(&layer.wo_attn)?;
            x = x.add(&attn)?;

            let h2 = layer_norm_rows(&x);
            let hidden = h2.matmul_t(&layer.mlp_up)?.map(gelu);
            let mlp = hidden.matmul_t(&layer.mlp_down)?;
            x = x.add(&mlp)?;

            if capture {
                traces.push(LayerTrace {
                    head_attention: Tensor3::stack(&maps)?,
                    mlp_input_hidden: h2,
                });
            }
        }

        let logits = layer_norm_rows(&x).matmul_t(&self.output)?;
        if !logits.is_finite() {
            return Err(invalid("forward pass produced non-finite logits"));
        }
        Ok((logits, traces))
    }

    /// Greedy decoding: appends the argmax token (lowest id on ties) until
    /// `max_new` tokens are added or [`EOS_TOKEN`] is emitted.
    pub fn generate_greedy(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        self.check_tokens(prompt)?;
        if prompt.len() + max_new > self.config.max_seq_len {
            return Err(invalid(format!(
                "prompt length {} + max_new {max_new} exceeds max_seq_len {}",
                prompt.len(),
                self.config.max_seq_len
            )));
        }
        let mut seq = prompt.to_vec();
        for _ in 0..max_new {
            let logits = self.forward(&seq)?;
            let next = argmax(logits.row(seq.len() - 1)) as TokenId;
            seq.push(next);
            if next == EOS_TOKEN {
                break;
            }
        }
        Ok(seq)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Convenience for tests and tools: a `DecoderWeights` with every matrix zeroed.
pub fn zero_decoder(config: &DecoderConfig) -> Result<DecoderWeights> {
    config.validate()?;
    let d = config.embed_dim;
    Ok(DecoderWeights {
        config: config.clone(),
        token_embedding: Matrix::zeros(config.vocab_size, d),
        position_embedding: Matrix::zeros(config.max_seq_len, d),
        layers: vec![
            LayerWeights {
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                wv: Matrix::zeros(d, d),
                wo_attn: Matrix::zeros(d, d),
                mlp_up: Matrix::zeros(config.mlp_dim, d),
                mlp_down: Matrix::zeros(d, config.mlp_dim),
            };
            config.num_layers
        ],
        output: Matrix::zeros(config.vocab_size, d),
    })
}
