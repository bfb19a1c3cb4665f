//! Cross-modal guidance: gated language fusion, circulant vision-language
//! fusion, the baseline fusion variants, the classifier head and losses.

pub mod circulant;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{dim_err, CcpeError, Result};
use crate::nn::Linear;

pub use circulant::{circulant_of, circular_convolve};

pub const GATE_HIDDEN: usize = 4;
pub const PROB_FLOOR: f64 = 1e-12;
pub const NUM_CLASSES: usize = 2;

/// `2 → r → 2` gate over the channel means of `[t_I ∥ t_L]`.
#[derive(Clone, Debug)]
pub struct LanguageFusion {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Output of [`LanguageFusion::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FusedLanguage {
    /// `S = a_I·t_I + a_L·t_L`, `[B×d]`.
    pub fused: Var,
    /// `[a_I, a_L]` per row, `[B×2]`.
    pub gates: Var,
}

impl LanguageFusion {
    pub fn new<R: Rng + ?Sized>(tape: &mut Tape, rng: &mut R) -> Self {
        LanguageFusion {
            fc1: Linear::new(tape, 2, GATE_HIDDEN, true, rng),
            fc2: Linear::new(tape, GATE_HIDDEN, 2, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, t_i: Var, t_l: Var) -> Result<FusedLanguage> {
        let shape = tape.shape(t_i).to_vec();
        if shape.len() != 2 || tape.shape(t_l) != shape.as_slice() {
            return dim_err(format!(
                "language fusion of {shape:?} and {:?}",
                tape.shape(t_l)
            ));
        }
        let batch = shape[0];
        let u_i = tape.mean_pool(t_i, 1)?;
        let u_i = tape.reshape(u_i, &[batch, 1])?;
        let u_l = tape.mean_pool(t_l, 1)?;
        let u_l = tape.reshape(u_l, &[batch, 1])?;
        let u = tape.concat(&[u_i, u_l], 1)?;

        let h = self.fc1.forward(tape, u)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, h)?;
        let gates = tape.sigmoid(h)?;

        let a_i = tape.slice(gates, 1, 0, 1)?;
        let a_l = tape.slice(gates, 1, 1, 1)?;
        let s_i = tape.scale_rows(t_i, a_i)?;
        let s_l = tape.scale_rows(t_l, a_l)?;
        let fused = tape.add(s_i, s_l)?;
        Ok(FusedLanguage { fused, gates })
    }

    pub fn params(&self) -> Vec<Var> {
        [self.fc1.params(), self.fc2.params()].concat()
    }
}

/// `Z = R(S·W_t)·(S·W_t) + R(V·W_v)·(V·W_v)`, computed per row as circular
/// self-convolutions.
#[derive(Clone, Copy, Debug)]
pub struct ModalityFusion {
    pub w_t: Var,
    pub w_v: Var,
    pub dim: usize,
    pub n: usize,
}

impl ModalityFusion {
    pub fn new<R: Rng + ?Sized>(tape: &mut Tape, dim: usize, n: usize, rng: &mut R) -> Result<Self> {
        if n < 2 {
            return Err(CcpeError::Config(format!("fusion dimension must be at least 2, got {n}")));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let w_t = Tensor::randn(&[dim, n], std, rng);
        let w_v = Tensor::randn(&[dim, n], std, rng);
        Ok(Self::from_tensors(tape, w_t, w_v))
    }

    pub fn from_tensors(tape: &mut Tape, w_t: Tensor, w_v: Tensor) -> Self {
        let (dim, n) = (w_t.shape()[0], w_t.shape()[1]);
        ModalityFusion {
            w_t: tape.param(w_t),
            w_v: tape.param(w_v),
            dim,
            n,
        }
    }

    /// `S, V: [B×d]` → `Z: [B×n]`.
    pub fn forward(&self, tape: &mut Tape, s: Var, v: Var) -> Result<Var> {
        let s_t = tape.matmul(s, self.w_t)?;
        let v_t = tape.matmul(v, self.w_v)?;
        let zs = tape.circ_conv(s_t, s_t)?;
        let zv = tape.circ_conv(v_t, v_t)?;
        tape.add(zs, zv)
    }

    pub fn params(&self) -> Vec<Var> {
        vec![self.w_t, self.w_v]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    Sum,
    Product,
    Concat,
    Cgm,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::Sum,
        FusionVariant::Product,
        FusionVariant::Concat,
        FusionVariant::Cgm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Sum => "sum",
            FusionVariant::Product => "product",
            FusionVariant::Concat => "concat",
            FusionVariant::Cgm => "cgm",
        }
    }

    /// Width of the fused feature for text/visual width `dim`.
    pub fn output_dim(self, dim: usize, n: usize) -> usize {
        match self {
            FusionVariant::Sum | FusionVariant::Product => dim,
            FusionVariant::Concat | FusionVariant::Cgm => n,
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionVariant {
    type Err = CcpeError;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                CcpeError::Config(format!(
                    "unknown fusion variant `{s}` (expected sum, product, concat or cgm)"
                ))
            })
    }
}

/// Vision-language fusion stage for one [`FusionVariant`].
#[derive(Clone, Debug)]
pub enum FusionHead {
    Sum,
    Product,
    Concat(Linear),
    Cgm(ModalityFusion),
}

impl FusionHead {
    pub fn new<R: Rng + ?Sized>(
        tape: &mut Tape,
        variant: FusionVariant,
        dim: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match variant {
            FusionVariant::Sum => FusionHead::Sum,
            FusionVariant::Product => FusionHead::Product,
            FusionVariant::Concat => FusionHead::Concat(Linear::new(tape, 2 * dim, n, true, rng)),
            FusionVariant::Cgm => FusionHead::Cgm(ModalityFusion::new(tape, dim, n, rng)?),
        })
    }

    pub fn variant(&self) -> FusionVariant {
        match self {
            FusionHead::Sum => FusionVariant::Sum,
            FusionHead::Product => FusionVariant::Product,
            FusionHead::Concat(_) => FusionVariant::Concat,
            FusionHead::Cgm(_) => FusionVariant::Cgm,
        }
    }

    pub fn forward(&self, tape: &mut Tape, s: Var, v: Var) -> Result<Var> {
        match self {
            FusionHead::Sum => tape.add(s, v),
            FusionHead::Product => tape.mul(s, v),
            FusionHead::Concat(proj) => {
                let joined = tape.concat(&[s, v], 1)?;
                proj.forward(tape, joined)
            }
            FusionHead::Cgm(m) => m.forward(tape, s, v),
        }
    }

    pub fn params(&self) -> Vec<Var> {
        match self {
            FusionHead::Sum | FusionHead::Product => Vec::new(),
            FusionHead::Concat(proj) => proj.params().to_vec(),
            FusionHead::Cgm(m) => m.params(),
        }
    }
}

/// Two linear layers (`in → in/2 → 2`) followed by a softmax.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(tape: &mut Tape, in_dim: usize, rng: &mut R) -> Self {
        let hidden = (in_dim / 2).max(1);
        Classifier {
            fc1: Linear::new(tape, in_dim, hidden, true, rng),
            fc2: Linear::new(tape, hidden, NUM_CLASSES, true, rng),
        }
    }

    /// `[B×in]` → class probabilities `[B×2]`; column 1 is the live score.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, z)?;
        let logits = self.fc2.forward(tape, h)?;
        tape.softmax(logits, 1.0)
    }

    pub fn params(&self) -> Vec<Var> {
        [self.fc1.params(), self.fc2.params()].concat()
    }
}

/// Mean cross-entropy with probabilities floored at [`PROB_FLOOR`].
pub fn classification_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    tape.nll(probs, labels, PROB_FLOOR)
}

/// `L = L_cls + L_kg`; either term being non-finite is a numerical error.
pub fn total_loss(tape: &mut Tape, l_cls: Var, l_kg: Var) -> Result<Var> {
    check_finite_term(tape, l_cls, "classification loss")?;
    check_finite_term(tape, l_kg, "knowledge-guided loss")?;
    tape.add(l_cls, l_kg)
}

pub fn check_finite_term(tape: &Tape, term: Var, name: &str) -> Result<()> {
    let value = tape.value(term);
    if value.numel() != 1 {
        return dim_err(format!("{name} must be a scalar, got {:?}", value.shape()));
    }
    if !value.is_finite() {
        return Err(CcpeError::Numerical(format!(
            "{name} is not finite ({})",
            value.data()[0]
        )));
    }
    Ok(())
}
