//! Stand-ins for the image and text towers.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{dim_err, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};

pub const TEXT_ENCODER_HEADS: usize = 4;

/// Trainable two-layer GELU perceptron mapping raw features to `d`.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(tape: &mut Tape, raw_dim: usize, dim: usize, rng: &mut R) -> Self {
        VisualEncoder {
            fc1: Linear::new(tape, raw_dim, dim, true, rng),
            fc2: Linear::new(tape, dim, dim, true, rng),
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn dim(&self) -> usize {
        self.fc2.out_dim
    }

    /// `[B×D_raw]` → `[B×d]`.
    pub fn forward(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        let shape = tape.shape(raw);
        if shape.len() != 2 || shape[1] != self.raw_dim() {
            return dim_err(format!(
                "visual encoder expects [B×{}], got {shape:?}",
                self.raw_dim()
            ));
        }
        let h = self.fc1.forward(tape, raw)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }

    pub fn params(&self) -> Vec<Var> {
        [self.fc1.params(), self.fc2.params()].concat()
    }
}

/// Encodes a single raw vector; a convenience over [`VisualEncoder::forward`].
pub fn visual_encode(tape: &mut Tape, encoder: &VisualEncoder, raw: &[f64]) -> Result<Var> {
    if raw.len() != encoder.raw_dim() {
        return dim_err(format!(
            "visual encoder expects {} raw features, got {}",
            encoder.raw_dim(),
            raw.len()
        ));
    }
    let x = tape.input(Tensor::new(vec![1, raw.len()], raw.to_vec())?);
    let y = encoder.forward(tape, x)?;
    tape.reshape(y, &[encoder.dim()])
}

/// Frozen single-block pre-norm transformer, mean-pooled and projected.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub proj: Linear,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(tape: &mut Tape, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(TextEncoder {
            ln_attn: LayerNorm::new(tape, dim, false),
            attn: MultiHeadAttention::new(tape, dim, TEXT_ENCODER_HEADS, false, rng)?,
            ln_ffn: LayerNorm::new(tape, dim, false),
            ffn: FeedForward::new(tape, dim, 2 * dim, false, rng),
            proj: Linear::new(tape, dim, dim, false, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.in_dim
    }

    /// `[B×L×d]` → `[B×d]`.
    pub fn forward(&self, tape: &mut Tape, seq: Var) -> Result<Var> {
        let shape = tape.shape(seq);
        if shape.len() != 3 || shape[2] != self.dim() {
            return dim_err(format!(
                "text encoder expects [B×L×{}], got {shape:?}",
                self.dim()
            ));
        }
        let batch = shape[0];
        let h = self.ln_attn.forward(tape, seq)?;
        let a = self.attn.forward(tape, h, h)?;
        let x = tape.add(seq, a)?;
        let h = self.ln_ffn.forward(tape, x)?;
        let f = self.ffn.forward(tape, h)?;
        let x = tape.add(x, f)?;
        let pooled = tape.mean_pool(x, 1)?;
        let pooled = tape.reshape(pooled, &[batch, self.dim()])?;
        self.proj.forward(tape, pooled)
    }

    /// Every parameter of the block, in registration order.
    pub fn params(&self) -> Vec<Var> {
        let mut out = vec![self.ln_attn.gamma, self.ln_attn.beta];
        for l in [&self.attn.query, &self.attn.key, &self.attn.value, &self.attn.out] {
            out.extend(l.params());
        }
        out.extend([self.ln_ffn.gamma, self.ln_ffn.beta]);
        out.extend(self.ffn.up.params());
        out.extend(self.ffn.down.params());
        out.extend(self.proj.params());
        out
    }
}
