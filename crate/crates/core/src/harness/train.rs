//! Training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticSample;
use crate::error::{CcpeError, Result};

use super::config::RunConfig;
use super::model::CcpeModel;
use super::optim::AdamState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub classification: f64,
    pub knowledge: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: CcpeModel,
    pub trace: Vec<LossRecord>,
}

fn at_step(step: usize, e: CcpeError) -> CcpeError {
    match e {
        CcpeError::Numerical(msg) => CcpeError::Numerical(format!("step {step}: {msg}")),
        other => other,
    }
}

/// Trains a fresh model on `samples` for `config.steps` Adam steps.
///
/// Parameters are initialized from `seed`; batches are drawn uniformly with
/// replacement from an independent stream of the same seed.
pub fn train(config: &RunConfig, samples: &[SyntheticSample], seed: u64) -> Result<TrainOutcome> {
    let raw_dim = samples
        .first()
        .map(|s| s.raw.len())
        .ok_or_else(|| CcpeError::Contract("no training samples".into()))?;
    let mut model = CcpeModel::new(config, raw_dim, seed)?;
    let mut adam = AdamState::new(&model.tape, model.groups().trainable());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut trace = Vec::with_capacity(config.steps);
    let mut batch: Vec<&SyntheticSample> = Vec::with_capacity(config.batch_size);
    for step in 0..config.steps {
        batch.clear();
        batch.extend((0..config.batch_size).map(|_| &samples[rng.random_range(0..samples.len())]));

        model.tape.zero_grad();
        let out = model.forward(&batch).map_err(|e| at_step(step, e))?;
        let record = LossRecord {
            step,
            total: model.tape.value(out.total).data()[0],
            classification: model.tape.value(out.l_cls).data()[0],
            knowledge: out.l_kg.map(|k| model.tape.value(k).data()[0]),
        };
        model.tape.backward(out.total).map_err(|e| at_step(step, e))?;
        adam.step(&mut model.tape, &config.optimizer)?;
        trace.push(record);
        if step % 500 == 0 {
            log::debug!("step {step}: loss {:.4}", record.total);
        }
    }
    model.tape.reset();
    model.tape.zero_grad();
    Ok(TrainOutcome { model, trace })
}

/// Mean total loss over the first and last `fraction` of a trace.
pub fn loss_trend(trace: &[LossRecord], fraction: f64) -> Option<(f64, f64)> {
    let k = ((trace.len() as f64 * fraction).round() as usize).max(1);
    if trace.len() < 2 * k {
        return None;
    }
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    Some((mean(&trace[..k]), mean(&trace[trace.len() - k..])))
}
