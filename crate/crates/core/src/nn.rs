//! Layers built from tape primitives. Each layer owns the [`Var`]s of its
//! parameters; whether they train is decided when they are registered.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{dim_err, CcpeError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn register(tape: &mut Tape, value: Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(value)
    } else {
        tape.frozen(value)
    }
}

/// `y = x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Gaussian weights with std `1/√in_dim`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        tape: &mut Tape,
        in_dim: usize,
        out_dim: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::randn(&[in_dim, out_dim], std, rng);
        Self::from_tensors(tape, w, Tensor::zeros(&[out_dim]), trainable)
    }

    pub fn from_tensors(tape: &mut Tape, weight: Tensor, bias: Tensor, trainable: bool) -> Self {
        let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
        Linear {
            weight: register(tape, weight, trainable),
            bias: register(tape, bias, trainable),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return dim_err(format!(
                "linear layer expects last axis {}, got {shape:?}",
                self.in_dim
            ));
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, self.in_dim])? };
        let y = tape.matmul(flat, self.weight)?;
        let y = tape.add_bias(y, self.bias)?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, &out_shape)
    }

    pub fn params(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn new(tape: &mut Tape, dim: usize, trainable: bool) -> Self {
        LayerNorm {
            gamma: register(tape, Tensor::full(&[dim], 1.0), trainable),
            beta: register(tape, Tensor::zeros(&[dim]), trainable),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product attention on `[B×L×d]` sequences.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        tape: &mut Tape,
        dim: usize,
        heads: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CcpeError::Config(format!(
                "{heads} attention heads do not divide width {dim}"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(tape, dim, dim, trainable, rng),
            key: Linear::new(tape, dim, dim, trainable, rng),
            value: Linear::new(tape, dim, dim, trainable, rng),
            out: Linear::new(tape, dim, dim, trainable, rng),
            heads,
        })
    }

    /// `queries: [B×Lq×d]`, `context: [B×Lk×d]` → `[B×Lq×d]`.
    pub fn forward(&self, tape: &mut Tape, queries: Var, context: Var) -> Result<Var> {
        let dim = self.query.in_dim;
        let head_dim = dim / self.heads;
        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, context)?;
        let v = self.value.forward(tape, context)?;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 2, h * head_dim, head_dim)?;
            let kh = tape.slice(k, 2, h * head_dim, head_dim)?;
            let vh = tape.slice(v, 2, h * head_dim, head_dim)?;
            let kt = tape.transpose_last(kh)?;
            let scores = tape.batch_matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, 1.0)?;
            outputs.push(tape.batch_matmul(attn, vh)?);
        }
        let merged = if outputs.len() == 1 { outputs[0] } else { tape.concat(&outputs, 2)? };
        self.out.forward(tape, merged)
    }
}

/// Two-layer GELU perceptron `d → hidden → d`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        tape: &mut Tape,
        dim: usize,
        hidden: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            up: Linear::new(tape, dim, hidden, trainable, rng),
            down: Linear::new(tape, hidden, dim, trainable, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{check_gradients, GradCheckOptions};

    #[test]
    fn heads_must_divide_width() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::new(&mut tape, 10, 4, true, &mut rng).is_err());
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let attn = MultiHeadAttention::new(&mut tape, 8, 2, true, &mut rng).unwrap();
        let x = tape.param(Tensor::randn(&[2, 3, 8], 1.0, &mut rng));
        let ctx = tape.param(Tensor::randn(&[2, 4, 8], 1.0, &mut rng));
        let w = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let leaves = tape.trainable();
        let report = check_gradients(
            &mut tape,
            &leaves,
            |t| {
                let y = attn.forward(t, x, ctx)?;
                let w = t.input(w.clone());
                let p = t.mul(y, w)?;
                t.sum(p)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
