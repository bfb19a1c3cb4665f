//! Adam with bias correction over the trainable leaves of a tape.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{CcpeError, Result};

use super::config::AdamConfig;

#[derive(Clone, Debug)]
pub struct AdamState {
    params: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(tape: &Tape, params: Vec<Var>) -> Self {
        let zeros = |p: &Var| Tensor::zeros(tape.shape(*p));
        AdamState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            params,
            step: 0,
        }
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently stored on the tape.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, tape: &mut Tape, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, &p) in self.params.iter().enumerate() {
            if !tape.requires_grad(p) {
                return Err(CcpeError::Internal(format!("optimizer holds frozen leaf {p:?}")));
            }
            let Some(g) = tape.grad(p) else { continue };
            let g = g.data().to_vec();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for k in 0..g.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            }
            if cfg.lr == 0.0 {
                continue;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            let value = tape.value_mut(p).data_mut();
            for k in 0..value.len() {
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                value[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
