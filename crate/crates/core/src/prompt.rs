//! Inherent (caption) and learnable (query) prompts, their text features,
//! and the knowledge-guided alignment loss.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::tokenizer::{tokenize_caption, SEQ_LEN, VOCAB_SIZE};
use crate::encoders::TextEncoder;
use crate::error::{dim_err, CcpeError, Result};
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention};

pub const QUERY_INIT_STD: f64 = 0.02;
pub const QFORMER_HEADS: usize = 4;
pub const COSINE_EPS: f64 = 1e-12;
pub const KG_INIT_NOISE: f64 = 0.01;

/// Frozen `V×d` token embedding table.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTable {
    pub table: Var,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(tape: &mut Tape, dim: usize, rng: &mut R) -> Self {
        EmbeddingTable {
            table: tape.frozen(Tensor::randn(&[VOCAB_SIZE, dim], 1.0, rng)),
        }
    }
}

/// `P_I`: embedding rows of the tokenized caption, `[77×d]`.
pub fn build_inherent_prompt(tape: &mut Tape, embedding: &EmbeddingTable, caption: &str) -> Result<Var> {
    let ids = tokenize_caption(caption).ids().to_vec();
    debug_assert_eq!(ids.len(), SEQ_LEN);
    tape.gather(embedding.table, &ids)
}

#[derive(Clone, Debug)]
pub struct QFormerBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl QFormerBlock {
    fn new<R: Rng + ?Sized>(tape: &mut Tape, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(QFormerBlock {
            ln_self: LayerNorm::new(tape, dim, true),
            self_attn: MultiHeadAttention::new(tape, dim, QFORMER_HEADS, true, rng)?,
            ln_cross: LayerNorm::new(tape, dim, true),
            cross_attn: MultiHeadAttention::new(tape, dim, QFORMER_HEADS, true, rng)?,
            ln_ffn: LayerNorm::new(tape, dim, true),
            ffn: FeedForward::new(tape, dim, 2 * dim, true, rng),
        })
    }

    /// `x: [B×M×d]`, `visual: [B×1×d]`.
    fn forward(&self, tape: &mut Tape, x: Var, visual: Var) -> Result<Var> {
        let h = self.ln_self.forward(tape, x)?;
        let a = self.self_attn.forward(tape, h, h)?;
        let x = tape.add(x, a)?;
        let h = self.ln_cross.forward(tape, x)?;
        let c = self.cross_attn.forward(tape, h, visual)?;
        let x = tape.add(x, c)?;
        let h = self.ln_ffn.forward(tape, x)?;
        let f = self.ffn.forward(tape, h)?;
        tape.add(x, f)
    }
}

/// Learnable queries refined against the visual feature.
#[derive(Clone, Debug)]
pub struct QFormer {
    pub queries: Var,
    pub blocks: Vec<QFormerBlock>,
    pub num_queries: usize,
    pub dim: usize,
}

impl QFormer {
    pub fn new<R: Rng + ?Sized>(
        tape: &mut Tape,
        num_queries: usize,
        depth: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_queries < 1 {
            return Err(CcpeError::Config("Q-Former needs at least one query".into()));
        }
        if depth < 1 {
            return Err(CcpeError::Config("Q-Former depth must be at least 1".into()));
        }
        let queries = tape.param(Tensor::randn(&[num_queries, dim], QUERY_INIT_STD, rng));
        let blocks = (0..depth)
            .map(|_| QFormerBlock::new(tape, dim, rng))
            .collect::<Result<_>>()?;
        Ok(QFormer {
            queries,
            blocks,
            num_queries,
            dim,
        })
    }

    /// `visual: [B×d]` → `P_L: [B×M×d]`.
    pub fn forward(&self, tape: &mut Tape, visual: Var) -> Result<Var> {
        let shape = tape.shape(visual);
        if shape.len() != 2 || shape[1] != self.dim {
            return dim_err(format!("Q-Former expects [B×{}], got {shape:?}", self.dim));
        }
        let batch = shape[0];
        let visual = tape.reshape(visual, &[batch, 1, self.dim])?;
        let mut x = tape.repeat(self.queries, batch)?;
        for block in &self.blocks {
            x = block.forward(tape, x, visual)?;
        }
        Ok(x)
    }
}

/// `t_I = T_I(P_I)`, `t_L = T_L(P_L)`; both `[B×d]`.
pub fn encode_prompts(
    tape: &mut Tape,
    inherent: Var,
    learnable: Var,
    inherent_encoder: &TextEncoder,
    learnable_encoder: &TextEncoder,
) -> Result<(Var, Var)> {
    let (si, sl) = (tape.shape(inherent).to_vec(), tape.shape(learnable).to_vec());
    if si.len() != 3 || sl.len() != 3 || si[0] != sl[0] || si[2] != sl[2] {
        return dim_err(format!("prompt shapes {si:?} and {sl:?} do not pair up"));
    }
    let t_i = inherent_encoder.forward(tape, inherent)?;
    let t_l = learnable_encoder.forward(tape, learnable)?;
    Ok((t_i, t_l))
}

/// Monitor matrix `W_kg` relating inherent to learnable text features.
#[derive(Clone, Copy, Debug)]
pub struct KnowledgeGuide {
    pub w_kg: Var,
}

impl KnowledgeGuide {
    /// Identity plus small Gaussian noise.
    pub fn new<R: Rng + ?Sized>(tape: &mut Tape, dim: usize, rng: &mut R) -> Self {
        let mut w = Tensor::randn(&[dim, dim], KG_INIT_NOISE, rng);
        for i in 0..dim {
            w.data_mut()[i * dim + i] += 1.0;
        }
        KnowledgeGuide { w_kg: tape.param(w) }
    }

    pub fn from_tensor(tape: &mut Tape, w: Tensor) -> Self {
        KnowledgeGuide { w_kg: tape.param(w) }
    }

    pub fn loss(&self, tape: &mut Tape, t_i: Var, t_l: Var) -> Result<Var> {
        knowledge_guided_loss(tape, t_i, t_l, self.w_kg)
    }
}

/// `1 − mean_b cos(t_I[b]·W_kg, t_L[b])`.
pub fn knowledge_guided_loss(tape: &mut Tape, t_i: Var, t_l: Var, w_kg: Var) -> Result<Var> {
    let (si, sl) = (tape.shape(t_i).to_vec(), tape.shape(t_l).to_vec());
    if si.len() != 2 || si != sl || si[0] == 0 {
        return dim_err(format!("knowledge-guided loss of {si:?} and {sl:?}"));
    }
    let monitored = tape.matmul(t_i, w_kg)?;
    for (name, v) in [("t_I·W_kg", monitored), ("t_L", t_l)] {
        let zero_rows = tape
            .value(v)
            .data()
            .chunks(si[1])
            .filter(|r| r.iter().all(|&x| x == 0.0))
            .count();
        if zero_rows > 0 {
            log::warn!("{zero_rows} zero-norm rows in {name}; cosine denominator floored");
        }
    }
    let cos = tape.row_cosine(monitored, t_l, COSINE_EPS)?;
    let mean = tape.mean(cos)?;
    let neg = tape.scale(mean, -1.0)?;
    tape.add_scalar(neg, 1.0)
}
