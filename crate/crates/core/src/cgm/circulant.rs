//! Circulant matrices and circular convolution.
//!
//! Convention: `R(x)[i][j] = x[(i − j) mod n]`, so column 0 of `R(x)` is `x`
//! and `R(x)·y` is the circular convolution `x ⊛ y`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::Tensor;
use crate::error::{dim_err, Result};

/// Lengths at or above this use the FFT path.
pub const FFT_THRESHOLD: usize = 128;

pub fn circulant_of(x: &[f64]) -> Result<Tensor> {
    let n = x.len();
    if n == 0 {
        return dim_err("circulant of an empty vector");
    }
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(x[(i + n - j) % n]);
        }
    }
    Tensor::new(vec![n, n], data)
}

/// `R(x)·y` by explicit matrix-vector product against the circulant matrix.
pub fn circulant_matvec(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return dim_err(format!("circulant of length {} times vector of length {}", x.len(), y.len()));
    }
    let c = circulant_of(x)?;
    let n = x.len();
    Ok((0..n)
        .map(|i| c.row(i).iter().zip(y).map(|(a, b)| a * b).sum())
        .collect())
}

/// `x ⊛ y`, picking the direct or FFT path by length.
pub fn circular_convolve(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() >= FFT_THRESHOLD {
        circular_convolve_fft(x, y)
    } else {
        circular_convolve_direct(x, y)
    }
}

pub fn circular_convolve_direct(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let n = check_pair(x, y)?;
    let mut out = vec![0.0; n];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o += xj * y[(k + n - j) % n];
        }
    }
    Ok(out)
}

pub fn circular_convolve_fft(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let n = check_pair(x, y)?;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut fx: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut fy: Vec<Complex<f64>> = y.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fwd.process(&mut fx);
    fwd.process(&mut fy);
    for (a, b) in fx.iter_mut().zip(&fy) {
        *a *= b;
    }
    inv.process(&mut fx);
    Ok(fx.iter().map(|c| c.re / n as f64).collect())
}

/// `out[j] = Σ_k g[k]·y[(k − j) mod n]`, the adjoint of `y ↦ R(·)` products.
pub fn circular_correlate(g: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let reversed: Vec<f64> = (0..n).map(|m| y[(n - m) % n]).collect();
    circular_convolve(g, &reversed).expect("equal lengths")
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<usize> {
    if x.is_empty() {
        return dim_err("circular convolution of empty vectors");
    }
    if x.len() != y.len() {
        return dim_err(format!(
            "circular convolution of lengths {} and {}",
            x.len(),
            y.len()
        ));
    }
    Ok(x.len())
}
