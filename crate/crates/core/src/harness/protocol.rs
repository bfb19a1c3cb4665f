//! Leave-one-domain-out evaluation and the ablation driver.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cgm::FusionVariant;
use crate::data::{apply_captions, generate_synthetic_dataset, load_captions, Label, SyntheticSample};
use crate::error::{CcpeError, Result};
use crate::metrics::{average_report, evaluate_scores, EvalReport, FoldMetrics, ScoreSet};

use super::config::{Components, RunConfig};
use super::train::{train, LossRecord};

/// Generates the configured dataset and applies the caption file, if any.
pub fn load_samples(config: &RunConfig) -> Result<Vec<SyntheticSample>> {
    let mut samples = generate_synthetic_dataset(&config.dataset)?;
    if let Some(path) = &config.caption_file {
        let captions = load_captions(path)?;
        apply_captions(&mut samples, &captions);
    }
    Ok(samples)
}

#[derive(Debug)]
pub struct FoldOutcome {
    pub report: EvalReport,
    pub trace: Vec<LossRecord>,
}

/// Trains on every domain except `held_out` and evaluates on `held_out`.
pub fn run_fold(
    config: &RunConfig,
    samples: &[SyntheticSample],
    fold_index: usize,
    held_out: &str,
) -> Result<FoldOutcome> {
    let seed = config.seed + fold_index as u64;
    let (test, source): (Vec<SyntheticSample>, Vec<SyntheticSample>) =
        samples.iter().cloned().partition(|s| s.domain == held_out);
    let report = |metrics, valid| EvalReport {
        fold: fold_index.to_string(),
        held_out: held_out.to_string(),
        metrics,
        seed,
        steps: config.steps,
        valid,
    };
    let has = |l: Label| test.iter().any(|s| s.label == l);
    if !has(Label::Live) || !has(Label::Spoof) {
        log::warn!("held-out domain {held_out} has a single class; fold {fold_index} is invalid");
        return Ok(FoldOutcome {
            report: report(FoldMetrics::NAN, false),
            trace: Vec::new(),
        });
    }
    if source.is_empty() {
        return Err(CcpeError::Contract(format!("no source domains for held-out domain {held_out}")));
    }

    let outcome = train(config, &source, seed)?;
    let mut model = outcome.model;
    let scores = model.score(&test)?;
    let mut set = ScoreSet::default();
    for (s, score) in test.iter().zip(scores) {
        match s.label {
            Label::Live => set.live.push(score),
            Label::Spoof => set.spoof.push(score),
        }
    }
    let metrics = evaluate_scores(&set, config.threshold)?;
    log::info!(
        "fold {fold_index} (held out {held_out}): HTER {:.4} AUC {:.4}",
        metrics.hter,
        metrics.auc
    );
    Ok(FoldOutcome {
        report: report(metrics, true),
        trace: outcome.trace,
    })
}

#[derive(Debug)]
pub struct LooOutcome {
    /// One row per held-out domain, then the `avg` row.
    pub reports: Vec<EvalReport>,
    pub traces: Vec<Vec<LossRecord>>,
}

pub fn run_loo_protocol(config: &RunConfig) -> Result<LooOutcome> {
    config.validate()?;
    if config.dataset.domains.len() < 2 {
        return Err(CcpeError::Config("leave-one-out needs at least two domains".into()));
    }
    let samples = load_samples(config)?;
    let mut reports = Vec::new();
    let mut traces = Vec::new();
    for (i, domain) in config.dataset.domains.iter().enumerate() {
        let fold = run_fold(config, &samples, i, domain)?;
        reports.push(fold.report);
        traces.push(fold.trace);
    }
    let invalid = reports.iter().filter(|r| !r.valid).count();
    if invalid > 0 {
        log::warn!("{invalid} invalid folds excluded from the average");
    }
    reports.push(average_report(&reports, config.seed, config.steps));
    Ok(LooOutcome { reports, traces })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Components,
    Fusion,
    QformerGrid,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Components => "components",
            AblationAxis::Fusion => "fusion",
            AblationAxis::QformerGrid => "qformer-grid",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = CcpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "components" => Ok(AblationAxis::Components),
            "fusion" => Ok(AblationAxis::Fusion),
            "qformer-grid" => Ok(AblationAxis::QformerGrid),
            _ => Err(CcpeError::Config(format!(
                "unknown ablation axis `{s}` (expected components, fusion or qformer-grid)"
            ))),
        }
    }
}

pub const QUERY_GRID: [usize; 4] = [8, 16, 32, 64];
pub const DEPTH_GRID: [usize; 4] = [1, 2, 4, 8];

/// Named configurations compared along `axis`, derived from `base`.
pub fn ablation_cells(base: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::Components => {
            let rows = [
                Components { icpg: true, lcpg: false, cgm: false },
                Components { icpg: false, lcpg: true, cgm: false },
                Components { icpg: true, lcpg: true, cgm: false },
                Components::FULL,
            ];
            rows.into_iter()
                .map(|c| {
                    let cfg = with(&|r| {
                        r.components = c;
                        r.fusion = if c.cgm { FusionVariant::Cgm } else { FusionVariant::Sum };
                    });
                    (c.to_string(), cfg)
                })
                .collect()
        }
        AblationAxis::Fusion => FusionVariant::ALL
            .into_iter()
            .map(|v| {
                let cfg = with(&|r| {
                    r.components = Components::FULL;
                    r.fusion = v;
                });
                (v.to_string(), cfg)
            })
            .collect(),
        AblationAxis::QformerGrid => {
            let mut out = Vec::new();
            for m in QUERY_GRID {
                for depth in DEPTH_GRID {
                    let cfg = with(&|r| {
                        r.components = Components::FULL;
                        r.fusion = FusionVariant::Cgm;
                        r.model.num_queries = m;
                        r.model.depth = depth;
                    });
                    out.push((format!("M={m} depth={depth}"), cfg));
                }
            }
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    /// Fold rows followed by the `avg` row.
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    pub fn average(&self) -> Option<&EvalReport> {
        self.reports.last()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, cell: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    /// One line per cell: `cell`, then HTER and AUC per held-out domain and
    /// for the average.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell");
        if let Some(first) = self.rows.first() {
            for r in &first.reports {
                let name = if r.fold == crate::metrics::AVERAGE_FOLD { "avg" } else { r.held_out.as_str() };
                write!(out, ",{name}_hter,{name}_auc").unwrap();
            }
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.cell);
            for r in &row.reports {
                write!(out, ",{},{}", fmt6(r.metrics.hter), fmt6(r.metrics.auc)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn fmt6(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.6}")
    }
}

/// Runs the leave-one-out protocol for every cell along `axis`.
pub fn run_ablation(config: &RunConfig, axis: AblationAxis) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (cell, cfg) in ablation_cells(config, axis) {
        log::info!("ablation {axis}: cell {cell}");
        let outcome = run_loo_protocol(&cfg).map_err(|e| match e {
            CcpeError::Numerical(m) => CcpeError::Numerical(format!("cell {cell}: {m}")),
            other => other,
        })?;
        rows.push(AblationRow {
            cell,
            reports: outcome.reports,
        });
    }
    Ok(AblationTable { axis, rows })
}
