use super::{Tape, Tensor, Var};
use crate::error::{CcpeError, Result};

/// Step size and pass threshold for central-difference checks.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true derivative is zero are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Leaf and flat coordinate with the largest error.
    pub worst: Option<(Var, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences for every coordinate of `leaves`.
///
/// `build` runs once; each perturbation is then propagated through the
/// recorded graph with [`Tape::recompute`], so `build` must not branch on
/// leaf values. `leaves` must be persistent (registered with
/// [`Tape::param`] or [`Tape::frozen`]).
pub fn check_gradients<F>(
    tape: &mut Tape,
    leaves: &[Var],
    build: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    if !(opts.h > 0.0) {
        return Err(CcpeError::Config(format!("step h must be positive, got {}", opts.h)));
    }
    if let Some(v) = leaves.iter().find(|v| !tape.is_persistent(**v)) {
        return Err(CcpeError::Contract(format!(
            "grad check leaf {v:?} is not persistent"
        )));
    }

    tape.reset();
    tape.zero_grad();
    let out = build(tape)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        tol: opts.tol,
    };
    for (&leaf, grad) in leaves.iter().zip(&analytic) {
        let cone = tape.cone(leaf);
        let saved: Vec<Tensor> = cone.iter().map(|&v| tape.value(v).clone()).collect();
        for i in 0..grad.numel() {
            let original = tape.value(leaf).data()[i];
            tape.value_mut(leaf).data_mut()[i] = original + opts.h;
            tape.recompute(&cone)?;
            let plus = tape.value(out).data()[0];
            tape.value_mut(leaf).data_mut()[i] = original - opts.h;
            tape.recompute(&cone)?;
            let minus = tape.value(out).data()[0];
            tape.value_mut(leaf).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = grad.data()[i];
            let err = relative_error(a, numeric, opts.floor);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((leaf, i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        for (&v, value) in cone.iter().zip(saved) {
            tape.set_value(v, value);
        }
    }
    tape.reset();
    tape.zero_grad();
    Ok(report)
}

/// Checks `f` at `x` on a fresh tape. Never fails: a build error is reported
/// as an infinite error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let opts = GradCheckOptions {
        h,
        tol,
        ..GradCheckOptions::default()
    };
    check_gradients(&mut tape, &[leaf], |t| f(t, leaf), opts).unwrap_or_else(|e| {
        log::warn!("gradient check aborted: {e}");
        GradCheckReport {
            max_rel_error: f64::INFINITY,
            worst: None,
            analytic: f64::NAN,
            numeric: f64::NAN,
            coordinates: 0,
            tol,
        }
    })
}
