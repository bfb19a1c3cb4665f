//! Linear probes on raw features: is the domain easier to read off than the class?

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::SyntheticSample;
use crate::autodiff::kernels::softmax_rows;
use crate::error::{CcpeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out accuracy of a multinomial logistic fit predicting the domain.
    pub domain_accuracy: f64,
    /// Held-out accuracy of a logistic fit predicting live vs spoof.
    pub class_accuracy: f64,
}

impl ProbeReport {
    pub fn domain_dominates(&self) -> bool {
        self.domain_accuracy > self.class_accuracy
    }
}

/// Fits both probes on a seeded 70/30 split of `samples`.
pub fn domain_dominance_probe(samples: &[SyntheticSample], seed: u64) -> Result<ProbeReport> {
    if samples.len() < 10 {
        return Err(CcpeError::Contract("probe needs at least 10 samples".into()));
    }
    let mut domains: Vec<&str> = samples.iter().map(|s| s.domain.as_str()).collect();
    domains.sort_unstable();
    domains.dedup();
    let domain_of = |s: &SyntheticSample| domains.iter().position(|d| *d == s.domain).unwrap();

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = samples.len() * 7 / 10;
    let (train, test) = order.split_at(cut);

    let xs: Vec<&[f64]> = samples.iter().map(|s| s.raw.as_slice()).collect();
    let domain_y: Vec<usize> = samples.iter().map(domain_of).collect();
    let class_y: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();

    Ok(ProbeReport {
        domain_accuracy: fit_and_score(&xs, &domain_y, domains.len(), train, test),
        class_accuracy: fit_and_score(&xs, &class_y, 2, train, test),
    })
}

fn fit_and_score(xs: &[&[f64]], ys: &[usize], classes: usize, train: &[usize], test: &[usize]) -> f64 {
    const STEPS: usize = 400;
    const LR: f64 = 0.5;
    const L2: f64 = 1e-3;

    let dim = xs[0].len();
    // standardize with training statistics
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for &i in train {
        for k in 0..dim {
            mean[k] += xs[i][k] / train.len() as f64;
        }
    }
    for &i in train {
        for k in 0..dim {
            std[k] += (xs[i][k] - mean[k]).powi(2) / train.len() as f64;
        }
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-12));
    let feat = |i: usize| -> Vec<f64> { (0..dim).map(|k| (xs[i][k] - mean[k]) / std[k]).collect() };
    let train_x: Vec<Vec<f64>> = train.iter().map(|&i| feat(i)).collect();

    let mut w = vec![0.0; dim * classes];
    let mut b = vec![0.0; classes];
    let logits = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| b[c] + (0..dim).map(|k| x[k] * w[k * classes + c]).sum::<f64>())
            .collect()
    };
    for _ in 0..STEPS {
        let mut gw = vec![0.0; dim * classes];
        let mut gb = vec![0.0; classes];
        for (x, &i) in train_x.iter().zip(train) {
            let p = softmax_rows(&logits(x, &w, &b), classes, 1.0);
            for c in 0..classes {
                let err = p[c] - f64::from(u8::from(ys[i] == c));
                gb[c] += err;
                for k in 0..dim {
                    gw[k * classes + c] += err * x[k];
                }
            }
        }
        let n = train.len() as f64;
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= LR * (g / n + L2 * *wv);
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= LR * g / n;
        }
    }

    let correct = test
        .iter()
        .filter(|&&i| {
            let l = logits(&feat(i), &w, &b);
            let pred = (0..classes)
                .max_by(|&a, &c| l[a].total_cmp(&l[c]))
                .unwrap();
            pred == ys[i]
        })
        .count();
    correct as f64 / test.len() as f64
}
