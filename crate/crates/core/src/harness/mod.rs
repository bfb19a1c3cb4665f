//! Configuration, training, the leave-one-out protocol, ablations and
//! report files.

pub mod config;
pub mod gradsuite;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod report;
pub mod train;

pub use config::{AdamConfig, Components, ModelConfig, Preset, RunConfig};
pub use gradsuite::{gradient_suite, GradSuiteEntry, SuiteDims};
pub use model::{CcpeModel, ForwardOutput, ParamGroups};
pub use optim::AdamState;
pub use protocol::{
    ablation_cells, load_samples, run_ablation, run_fold, run_loo_protocol, AblationAxis,
    AblationRow, AblationTable, FoldOutcome, LooOutcome,
};
pub use report::{emit_ablation, emit_report, manifest_path, reemit_from_manifest, RunManifest};
pub use train::{loss_trend, train, LossRecord, TrainOutcome};

/// A configuration small enough for unit tests to train in milliseconds.
#[cfg(test)]
pub(crate) fn tiny_config() -> RunConfig {
    let mut c = RunConfig::toy();
    c.model = ModelConfig {
        dim: 8,
        num_queries: 2,
        depth: 1,
        fusion_dim: 4,
    };
    c.batch_size = 8;
    c.steps = 20;
    c.dataset.samples_per_domain_per_class = 6;
    c.dataset.raw_dim = 6;
    c
}
