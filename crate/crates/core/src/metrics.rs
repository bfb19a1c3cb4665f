//! Anti-spoofing metrics: FAR/FRR, EER threshold, HTER, exact AUC, and the
//! per-fold CSV report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::softmax_rows;
use crate::autodiff::Tensor;
use crate::error::{dim_err, CcpeError, Result};

pub const CSV_HEADER: &str = "fold,held_out,threshold,far,frr,eer,hter,auc,seed,steps";
const COSINE_EPS: f64 = 1e-12;

/// Live-class scores of live and spoof samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub live: Vec<f64>,
    pub spoof: Vec<f64>,
}

impl ScoreSet {
    pub fn new(live: Vec<f64>, spoof: Vec<f64>) -> Self {
        ScoreSet { live, spoof }
    }

    pub fn validate(&self) -> Result<()> {
        if self.live.is_empty() || self.spoof.is_empty() {
            return Err(CcpeError::Contract(format!(
                "score set needs both classes, got {} live and {} spoof",
                self.live.len(),
                self.spoof.len()
            )));
        }
        if self.live.iter().chain(&self.spoof).any(|s| !s.is_finite()) {
            return Err(CcpeError::Contract("score set contains non-finite scores".into()));
        }
        Ok(())
    }

    pub fn swapped(&self) -> ScoreSet {
        ScoreSet::new(self.spoof.clone(), self.live.clone())
    }

    /// All scores, ascending, tagged `true` for live.
    fn pooled(&self) -> Vec<(f64, bool)> {
        let mut all: Vec<(f64, bool)> = self
            .live
            .iter()
            .map(|&s| (s, true))
            .chain(self.spoof.iter().map(|&s| (s, false)))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        all
    }
}

/// Softmax over `cos(v, l_c)/τ` for each class text `l_c` (rows of `class_texts`).
pub fn clip_style_score(v: &[f64], class_texts: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(CcpeError::Domain(format!("temperature must be positive, got {temperature}")));
    }
    if class_texts.ndim() != 2 || class_texts.last_dim() != v.len() {
        return dim_err(format!(
            "class texts {:?} do not match feature length {}",
            class_texts.shape(),
            v.len()
        ));
    }
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(v);
    let classes = class_texts.shape()[0];
    let mut degenerate = nv == 0.0;
    let cos: Vec<f64> = (0..classes)
        .map(|c| {
            let l = class_texts.row(c);
            let nl = norm(l);
            degenerate |= nl == 0.0;
            let dot: f64 = v.iter().zip(l).map(|(a, b)| a * b).sum();
            dot / (nv.max(COSINE_EPS) * nl.max(COSINE_EPS))
        })
        .collect();
    if degenerate {
        log::warn!("zero vector in similarity scoring; cosine denominator floored");
    }
    Ok(softmax_rows(&cos, classes, temperature))
}

/// `(FAR, FRR)`: spoofs scoring `≥ threshold`, lives scoring `< threshold`.
pub fn compute_far_frr(scores: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    scores.validate()?;
    let far = scores.spoof.iter().filter(|&&s| s >= threshold).count() as f64 / scores.spoof.len() as f64;
    let frr = scores.live.iter().filter(|&&s| s < threshold).count() as f64 / scores.live.len() as f64;
    Ok((far, frr))
}

pub fn compute_hter(scores: &ScoreSet, threshold: f64) -> Result<f64> {
    let (far, frr) = compute_far_frr(scores, threshold)?;
    Ok((far + frr) / 2.0)
}

/// Candidate thresholds (±∞ and midpoints between consecutive distinct
/// pooled scores) with their `(FAR, FRR)`, in ascending threshold order.
pub fn threshold_sweep(scores: &ScoreSet) -> Result<Vec<(f64, f64, f64)>> {
    scores.validate()?;
    let pooled = scores.pooled();
    let (nl, ns) = (scores.live.len() as f64, scores.spoof.len() as f64);
    let mut out = vec![(f64::NEG_INFINITY, 1.0, 0.0)];
    let (mut live_below, mut spoof_below) = (0usize, 0usize);
    for i in 0..pooled.len() {
        if pooled[i].1 {
            live_below += 1;
        } else {
            spoof_below += 1;
        }
        if let Some(next) = pooled.get(i + 1) {
            if next.0 > pooled[i].0 {
                let t = (pooled[i].0 + next.0) / 2.0;
                let far = (scores.spoof.len() - spoof_below) as f64 / ns;
                out.push((t, far, live_below as f64 / nl));
            }
        }
    }
    out.push((f64::INFINITY, 0.0, 1.0));
    Ok(out)
}

/// Threshold minimizing `|FAR − FRR|` over [`threshold_sweep`]; ties go to
/// the smaller `FAR + FRR`, then to the smaller threshold.
pub fn find_eer_threshold(scores: &ScoreSet) -> Result<f64> {
    let sweep = threshold_sweep(scores)?;
    let best = sweep
        .iter()
        .min_by(|a, b| {
            let ka = ((a.1 - a.2).abs(), a.1 + a.2, a.0);
            let kb = ((b.1 - b.2).abs(), b.1 + b.2, b.0);
            ka.0.total_cmp(&kb.0)
                .then(ka.1.total_cmp(&kb.1))
                .then(ka.2.total_cmp(&kb.2))
        })
        .expect("sweep has sentinels");
    Ok(best.0)
}

/// Twice the Mann–Whitney U statistic: pairs with live > spoof count 2,
/// ties count 1.
fn twice_u_sorted(scores: &ScoreSet) -> u128 {
    let pooled = scores.pooled();
    let mut twice_u: u128 = 0;
    let mut spoof_below: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        let (mut live, mut spoof) = (0u128, 0u128);
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            if pooled[j].1 {
                live += 1;
            } else {
                spoof += 1;
            }
            j += 1;
        }
        twice_u += live * (2 * spoof_below + spoof);
        spoof_below += spoof;
        i = j;
    }
    twice_u
}

/// Exact AUC with half credit for ties, in `O(N log N)`.
pub fn compute_auc(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let pairs = 2 * scores.live.len() as u128 * scores.spoof.len() as u128;
    Ok(twice_u_sorted(scores) as f64 / pairs as f64)
}

/// How the operating threshold for HTER is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdRule {
    /// EER point of the evaluated scores.
    Eer,
    Fixed(f64),
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Eer
    }
}

/// Metrics of one evaluation. NaN marks an invalid fold and serializes as
/// `null`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    #[serde(with = "nan_as_null")]
    pub threshold: f64,
    #[serde(with = "nan_as_null")]
    pub far: f64,
    #[serde(with = "nan_as_null")]
    pub frr: f64,
    /// Half total error at the EER threshold.
    #[serde(with = "nan_as_null")]
    pub eer: f64,
    /// Half total error at `threshold`.
    #[serde(with = "nan_as_null")]
    pub hter: f64,
    #[serde(with = "nan_as_null")]
    pub auc: f64,
}

mod nan_as_null {
    use serde::{de, Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_nan() {
            s.serialize_none()
        } else if x.is_infinite() {
            s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*x)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(f64::NAN),
            Some(Repr::Number(x)) => Ok(x),
            Some(Repr::Text(t)) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!("invalid rate `{other}`"))),
            },
        }
    }
}

impl FoldMetrics {
    pub const NAN: FoldMetrics = FoldMetrics {
        threshold: f64::NAN,
        far: f64::NAN,
        frr: f64::NAN,
        eer: f64::NAN,
        hter: f64::NAN,
        auc: f64::NAN,
    };
}

pub fn evaluate_scores(scores: &ScoreSet, rule: ThresholdRule) -> Result<FoldMetrics> {
    let eer_threshold = find_eer_threshold(scores)?;
    let eer = compute_hter(scores, eer_threshold)?;
    let threshold = match rule {
        ThresholdRule::Eer => eer_threshold,
        ThresholdRule::Fixed(t) => t,
    };
    let (far, frr) = compute_far_frr(scores, threshold)?;
    Ok(FoldMetrics {
        threshold,
        far,
        frr,
        eer,
        hter: (far + frr) / 2.0,
        auc: compute_auc(scores)?,
    })
}

/// One CSV row: a fold, or the average over valid folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: String,
    pub held_out: String,
    pub metrics: FoldMetrics,
    pub seed: u64,
    pub steps: usize,
    pub valid: bool,
}

pub const AVERAGE_FOLD: &str = "avg";

/// Arithmetic mean of the valid rows' metrics, as an `avg` row. All metrics
/// are NaN when no row is valid.
pub fn average_report(reports: &[EvalReport], seed: u64, steps: usize) -> EvalReport {
    let valid: Vec<&FoldMetrics> = reports.iter().filter(|r| r.valid).map(|r| &r.metrics).collect();
    let metrics = if valid.is_empty() {
        FoldMetrics::NAN
    } else {
        let mean = |f: fn(&FoldMetrics) -> f64| valid.iter().map(|m| f(m)).sum::<f64>() / valid.len() as f64;
        FoldMetrics {
            threshold: mean(|m| m.threshold),
            far: mean(|m| m.far),
            frr: mean(|m| m.frr),
            eer: mean(|m| m.eer),
            hter: mean(|m| m.hter),
            auc: mean(|m| m.auc),
        }
    };
    EvalReport {
        fold: AVERAGE_FOLD.to_string(),
        held_out: "-".to_string(),
        metrics,
        seed,
        steps,
        valid: !valid.is_empty(),
    }
}

fn fmt_rate(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.6}")
    }
}

/// Renders reports as CSV with [`CSV_HEADER`]; rates use six decimals.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let m = &r.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.fold,
            r.held_out,
            fmt_rate(m.threshold),
            fmt_rate(m.far),
            fmt_rate(m.frr),
            fmt_rate(m.eer),
            fmt_rate(m.hter),
            fmt_rate(m.auc),
            r.seed,
            r.steps
        )
        .unwrap();
    }
    out
}

/// Parses CSV produced by [`reports_to_csv`]. Rows whose metrics are NaN are
/// marked invalid.
pub fn parse_reports_csv(text: &str) -> Result<Vec<EvalReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(CcpeError::Parse {
                line: 1,
                message: format!("expected header `{CSV_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let perr = |message: String| CcpeError::Parse { line: i + 1, message };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(perr(format!("expected 10 columns, got {}", cols.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| perr(format!("`{s}`: {e}")));
        let metrics = FoldMetrics {
            threshold: num(cols[2])?,
            far: num(cols[3])?,
            frr: num(cols[4])?,
            eer: num(cols[5])?,
            hter: num(cols[6])?,
            auc: num(cols[7])?,
        };
        out.push(EvalReport {
            fold: cols[0].to_string(),
            held_out: cols[1].to_string(),
            valid: !metrics.hter.is_nan(),
            metrics,
            seed: cols[8].parse().map_err(|e| perr(format!("seed: {e}")))?,
            steps: cols[9].parse().map_err(|e| perr(format!("steps: {e}")))?,
        });
    }
    Ok(out)
}
