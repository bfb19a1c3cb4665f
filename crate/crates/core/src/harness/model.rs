//! The full model: visual stub, prompt branches, fusion and classifier, all
//! registered on one tape.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::cgm::{
    check_finite_term, classification_loss, total_loss, Classifier, FusionHead, LanguageFusion,
};
use crate::data::tokenizer::SEQ_LEN;
use crate::data::SyntheticSample;
use crate::encoders::{TextEncoder, VisualEncoder};
use crate::error::{dim_err, Result};
use crate::prompt::{build_inherent_prompt, EmbeddingTable, KnowledgeGuide, QFormer};

use super::config::RunConfig;

/// Parameter groups by role, for freeze checks and reporting.
#[derive(Clone, Debug, Default)]
pub struct ParamGroups {
    pub visual: Vec<Var>,
    pub qformer: Vec<Var>,
    pub knowledge: Vec<Var>,
    pub language_fusion: Vec<Var>,
    pub fusion: Vec<Var>,
    pub classifier: Vec<Var>,
    /// Embedding table and both text encoders.
    pub frozen: Vec<Var>,
}

impl ParamGroups {
    pub fn trainable(&self) -> Vec<Var> {
        [
            &self.visual,
            &self.qformer,
            &self.knowledge,
            &self.language_fusion,
            &self.fusion,
            &self.classifier,
        ]
        .into_iter()
        .flatten()
        .copied()
        .collect()
    }
}

/// Handles into the tape after [`CcpeModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B×2]` class probabilities; column 1 is the live score.
    pub probs: Var,
    pub l_cls: Var,
    pub l_kg: Option<Var>,
    pub total: Var,
}

#[derive(Debug)]
pub struct CcpeModel {
    pub tape: Tape,
    config: RunConfig,
    raw_dim: usize,
    visual: VisualEncoder,
    embedding: Option<EmbeddingTable>,
    text_inherent: Option<TextEncoder>,
    qformer: Option<QFormer>,
    text_learnable: Option<TextEncoder>,
    knowledge: Option<KnowledgeGuide>,
    language: Option<LanguageFusion>,
    fusion: FusionHead,
    classifier: Classifier,
    groups: ParamGroups,
    inherent_cache: HashMap<String, Vec<f64>>,
}

impl CcpeModel {
    /// Builds every enabled part from a generator seeded with `seed`.
    pub fn new(config: &RunConfig, raw_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let m = &config.model;
        let c = config.components;
        let mut groups = ParamGroups::default();

        let visual = VisualEncoder::new(&mut tape, raw_dim, m.dim, &mut rng);
        groups.visual = visual.params();

        let (embedding, text_inherent) = if c.icpg {
            let e = EmbeddingTable::new(&mut tape, m.dim, &mut rng);
            let t = TextEncoder::new(&mut tape, m.dim, &mut rng)?;
            groups.frozen.push(e.table);
            groups.frozen.extend(t.params());
            (Some(e), Some(t))
        } else {
            (None, None)
        };

        let (qformer, text_learnable) = if c.lcpg {
            let q = QFormer::new(&mut tape, m.num_queries, m.depth, m.dim, &mut rng)?;
            let t = TextEncoder::new(&mut tape, m.dim, &mut rng)?;
            groups.qformer = qformer_params(&q);
            groups.frozen.extend(t.params());
            (Some(q), Some(t))
        } else {
            (None, None)
        };

        let knowledge = c.both_branches().then(|| KnowledgeGuide::new(&mut tape, m.dim, &mut rng));
        groups.knowledge = knowledge.iter().map(|k| k.w_kg).collect();

        let language = (c.both_branches() && c.cgm).then(|| LanguageFusion::new(&mut tape, &mut rng));
        groups.language_fusion = language.as_ref().map(|l| l.params()).unwrap_or_default();

        let fusion = FusionHead::new(&mut tape, config.fusion, m.dim, m.fusion_dim, &mut rng)?;
        groups.fusion = fusion.params();

        let classifier = Classifier::new(&mut tape, config.fusion.output_dim(m.dim, m.fusion_dim), &mut rng);
        groups.classifier = classifier.params();

        debug_assert_eq!(groups.trainable(), tape.trainable());
        Ok(CcpeModel {
            tape,
            config: config.clone(),
            raw_dim,
            visual,
            embedding,
            text_inherent,
            qformer,
            text_learnable,
            knowledge,
            language,
            fusion,
            classifier,
            groups,
            inherent_cache: HashMap::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn groups(&self) -> &ParamGroups {
        &self.groups
    }

    pub fn qformer(&self) -> Option<&QFormer> {
        self.qformer.as_ref()
    }

    /// Bytes of every frozen parameter, in registration order.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        self.groups
            .frozen
            .iter()
            .flat_map(|&p| self.tape.value(p).to_bytes())
            .collect()
    }

    /// Values of every trainable parameter.
    pub fn trainable_values(&self) -> Vec<Tensor> {
        self.groups
            .trainable()
            .iter()
            .map(|&p| self.tape.value(p).clone())
            .collect()
    }

    /// Inherent text features for `captions`, `[B×d]`. Every producer of
    /// `t_I` is frozen, so features are computed once per distinct caption.
    pub fn inherent_features(&mut self, captions: &[&str]) -> Result<Tensor> {
        let (Some(embedding), Some(encoder)) = (self.embedding, self.text_inherent.as_ref()) else {
            return dim_err("inherent branch is disabled");
        };
        let dim = self.config.model.dim;
        let mut missing: Vec<&str> = captions
            .iter()
            .copied()
            .filter(|c| !self.inherent_cache.contains_key(*c))
            .collect();
        missing.sort_unstable();
        missing.dedup();
        if !missing.is_empty() {
            self.tape.reset();
            let prompts = missing
                .iter()
                .map(|c| build_inherent_prompt(&mut self.tape, &embedding, c))
                .collect::<Result<Vec<_>>>()?;
            let stacked = if prompts.len() == 1 { prompts[0] } else { self.tape.concat(&prompts, 0)? };
            let stacked = self.tape.reshape(stacked, &[missing.len(), SEQ_LEN, dim])?;
            let t = encoder.forward(&mut self.tape, stacked)?;
            let value = self.tape.value(t).clone();
            for (i, c) in missing.iter().enumerate() {
                self.inherent_cache.insert(c.to_string(), value.row(i).to_vec());
            }
            self.tape.reset();
        }
        let mut data = Vec::with_capacity(captions.len() * dim);
        for c in captions {
            data.extend_from_slice(&self.inherent_cache[*c]);
        }
        Tensor::new(vec![captions.len(), dim], data)
    }

    /// Records the forward pass and losses for `batch` on a fresh tape.
    pub fn forward(&mut self, batch: &[&SyntheticSample]) -> Result<ForwardOutput> {
        let t_i = if self.config.components.icpg {
            let captions: Vec<&str> = batch.iter().map(|s| s.caption.as_str()).collect();
            Some(self.inherent_features(&captions)?)
        } else {
            None
        };
        let mut tape = std::mem::take(&mut self.tape);
        tape.reset();
        let out = self.record(&mut tape, batch, t_i.as_ref());
        self.tape = tape;
        out
    }

    /// Records the forward pass on `tape`, which must hold this model's
    /// parameters. `t_i` supplies the inherent features when that branch is
    /// enabled (see [`CcpeModel::inherent_features`]).
    pub fn record(
        &self,
        tape: &mut Tape,
        batch: &[&SyntheticSample],
        t_i: Option<&Tensor>,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return dim_err("empty batch");
        }
        let mut raw = Vec::with_capacity(batch.len() * self.raw_dim);
        for s in batch {
            if s.raw.len() != self.raw_dim {
                return dim_err(format!(
                    "sample {} has {} raw features, expected {}",
                    s.id,
                    s.raw.len(),
                    self.raw_dim
                ));
            }
            raw.extend_from_slice(&s.raw);
        }
        let raw = tape.input(Tensor::new(vec![batch.len(), self.raw_dim], raw)?);
        let v = self.visual.forward(tape, raw)?;

        let t_i = match (self.config.components.icpg, t_i) {
            (true, Some(t)) => Some(tape.input(t.clone())),
            (true, None) => return dim_err("inherent features missing"),
            (false, _) => None,
        };
        let t_l = match (&self.qformer, &self.text_learnable) {
            (Some(q), Some(enc)) => {
                let p_l = q.forward(tape, v)?;
                Some(enc.forward(tape, p_l)?)
            }
            _ => None,
        };

        let s = match (t_i, t_l) {
            (Some(a), Some(b)) => match &self.language {
                Some(lf) => lf.forward(tape, a, b)?.fused,
                None => tape.add(a, b)?,
            },
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("validated: one branch is enabled"),
        };
        let l_kg = match (t_i, t_l, &self.knowledge) {
            (Some(a), Some(b), Some(kg)) => Some(kg.loss(tape, a, b)?),
            _ => None,
        };

        let z = self.fusion.forward(tape, s, v)?;
        let probs = self.classifier.forward(tape, z)?;
        let labels: Vec<usize> = batch.iter().map(|s| s.label.index()).collect();
        let l_cls = classification_loss(tape, probs, &labels)?;
        let total = match l_kg {
            Some(kg) => total_loss(tape, l_cls, kg)?,
            None => {
                check_finite_term(tape, l_cls, "classification loss")?;
                l_cls
            }
        };
        Ok(ForwardOutput {
            probs,
            l_cls,
            l_kg,
            total,
        })
    }

    /// Live-class probabilities for `samples`, evaluated in chunks of the
    /// configured batch size.
    pub fn score(&mut self, samples: &[SyntheticSample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        let refs: Vec<&SyntheticSample> = samples.iter().collect();
        for chunk in refs.chunks(self.config.batch_size.max(1)) {
            let f = self.forward(chunk)?;
            out.extend(self.tape.value(f.probs).data().chunks(2).map(|r| r[1]));
        }
        self.tape.reset();
        Ok(out)
    }
}

fn qformer_params(q: &QFormer) -> Vec<Var> {
    let mut out = vec![q.queries];
    for b in &q.blocks {
        for ln in [&b.ln_self, &b.ln_cross, &b.ln_ffn] {
            out.extend([ln.gamma, ln.beta]);
        }
        for attn in [&b.self_attn, &b.cross_attn] {
            for l in [&attn.query, &attn.key, &attn.value, &attn.out] {
                out.extend(l.params());
            }
        }
        out.extend(b.ffn.up.params());
        out.extend(b.ffn.down.params());
    }
    out.sort_by_key(|v| v.index());
    out
}
