//! Finite-difference checks of every differentiable module at reduced widths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_gradients, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use crate::cgm::{classification_loss, Classifier, LanguageFusion, ModalityFusion};
use crate::data::{generate_synthetic_dataset, DatasetSpec};
use crate::error::Result;
use crate::prompt::{KnowledgeGuide, QFormer};

use super::config::{Components, RunConfig};
use super::model::CcpeModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteDims {
    pub batch: usize,
    pub dim: usize,
    pub fusion_dim: usize,
    pub num_queries: usize,
    pub raw_dim: usize,
}

impl Default for SuiteDims {
    fn default() -> Self {
        SuiteDims {
            batch: 4,
            dim: 32,
            fusion_dim: 8,
            num_queries: 4,
            raw_dim: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradSuiteEntry {
    pub module: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

pub const SUITE_MODULES: [&str; 6] = [
    "qformer",
    "language_fusion",
    "circulant_fusion",
    "classifier",
    "knowledge_loss",
    "total_loss",
];

/// `Σ w ⊙ y` for a fixed random `w` scaled to keep the scalar O(1).
fn probe(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.input(w.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn probe_weights(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::randn(shape, 1.0 / (n as f64).sqrt(), rng)
}

fn check_module(module: &str, dims: SuiteDims, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let opts = GradCheckOptions::default();
    let (b, d) = (dims.batch, dims.dim);
    match module {
        "qformer" => {
            let q = QFormer::new(&mut tape, dims.num_queries, 1, d, &mut rng)?;
            let v = tape.param(Tensor::randn(&[b, d], 1.0, &mut rng));
            let w = probe_weights(&[b, dims.num_queries, d], &mut rng);
            let leaves = tape.trainable();
            check_gradients(&mut tape, &leaves, |t| {
                let y = q.forward(t, v)?;
                probe(t, y, &w)
            }, opts)
        }
        "language_fusion" => {
            let lf = LanguageFusion::new(&mut tape, &mut rng);
            let t_i = tape.param(Tensor::randn(&[b, d], 1.0, &mut rng));
            let t_l = tape.param(Tensor::randn(&[b, d], 1.0, &mut rng));
            let w = probe_weights(&[b, d], &mut rng);
            let leaves = tape.trainable();
            check_gradients(&mut tape, &leaves, |t| {
                let y = lf.forward(t, t_i, t_l)?.fused;
                probe(t, y, &w)
            }, opts)
        }
        "circulant_fusion" => {
            let mf = ModalityFusion::new(&mut tape, d, dims.fusion_dim, &mut rng)?;
            let s = tape.param(Tensor::randn(&[b, d], 1.0, &mut rng));
            let v = tape.param(Tensor::randn(&[b, d], 1.0, &mut rng));
            let w = probe_weights(&[b, dims.fusion_dim], &mut rng);
            let leaves = tape.trainable();
            check_gradients(&mut tape, &leaves, |t| {
                let y = mf.forward(t, s, v)?;
                probe(t, y, &w)
            }, opts)
        }
        "classifier" => {
            let clf = Classifier::new(&mut tape, dims.fusion_dim, &mut rng);
            let z = tape.param(Tensor::randn(&[b, dims.fusion_dim], 1.0, &mut rng));
            let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
            let leaves = tape.trainable();
            check_gradients(&mut tape, &leaves, |t| {
                let p = clf.forward(t, z)?;
                classification_loss(t, p, &labels)
            }, opts)
        }
        "knowledge_loss" => {
            let kg = KnowledgeGuide::new(&mut tape, d, &mut rng);
            let t_i = tape.param(Tensor::randn(&[b, d], 1.0, &mut rng));
            let t_l = tape.param(Tensor::randn(&[b, d], 1.0, &mut rng));
            let leaves = tape.trainable();
            check_gradients(&mut tape, &leaves, |t| kg.loss(t, t_i, t_l), opts)
        }
        "total_loss" => check_total_loss(dims, seed, opts),
        other => Err(crate::error::CcpeError::Config(format!("unknown suite module `{other}`"))),
    }
}

/// Full model loss against every trainable parameter.
fn check_total_loss(dims: SuiteDims, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut config = RunConfig::toy();
    config.model.dim = dims.dim;
    config.model.fusion_dim = dims.fusion_dim;
    config.model.num_queries = dims.num_queries;
    config.model.depth = 1;
    config.components = Components::FULL;
    config.batch_size = dims.batch;
    let spec = DatasetSpec {
        seed,
        raw_dim: dims.raw_dim,
        samples_per_domain_per_class: dims.batch,
        ..DatasetSpec::default()
    };
    let samples = generate_synthetic_dataset(&spec)?;
    // alternate live and spoof samples from several domains
    let half = samples.len() / 2;
    let batch: Vec<_> = (0..dims.batch)
        .map(|i| &samples[if i % 2 == 0 { i } else { half + i }])
        .collect();

    let mut model = CcpeModel::new(&config, dims.raw_dim, seed)?;
    let captions: Vec<&str> = batch.iter().map(|s| s.caption.as_str()).collect();
    let t_i = model.inherent_features(&captions)?;
    let leaves = model.groups().trainable();
    let mut tape = std::mem::take(&mut model.tape);
    let report = check_gradients(
        &mut tape,
        &leaves,
        |t| Ok(model.record(t, &batch, Some(&t_i))?.total),
        opts,
    );
    model.tape = tape;
    report
}

/// Runs every module of [`SUITE_MODULES`] for each seed.
pub fn gradient_suite(dims: SuiteDims, seeds: &[u64]) -> Result<Vec<GradSuiteEntry>> {
    let mut out = Vec::new();
    for &module in &SUITE_MODULES {
        for &seed in seeds {
            let report = check_module(module, dims, seed)?;
            log::debug!("{module} seed {seed}: max rel error {:.3e}", report.max_rel_error);
            out.push(GradSuiteEntry { module, seed, report });
        }
    }
    Ok(out)
}
