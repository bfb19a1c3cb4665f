use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::CcpeError;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_worked_case() {
    let mut tape = Tape::new();
    let i2 = tape.input(Tensor::eye(2));
    let col = tape.input(t(&[2, 1], &[3.0, 4.0]));
    let out = tape.matmul(i2, col).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 1], &[0.0, 1.0]);
    assert_eq!(naive_matmul(&a, &b), vec![2.0, 4.0]);
    let (va, vb) = (tape.input(a), tape.input(b));
    let out = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.value(out).data(), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::zeros(&[2, 3]));
    let b = tape.input(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(CcpeError::Dimension(msg)) => {
            assert!(msg.contains("[2, 3]"), "{msg}");
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_matches_naive_oracle_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
    let b = Tensor::randn(&[7, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.input(a.clone()), tape.input(b.clone()));
    let out = tape.matmul(va, vb).unwrap();
    for (x, y) in tape.value(out).data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let report = grad_check(
        |tape, x| {
            let vb = tape.input(b.clone());
            let y = tape.matmul(x, vb)?;
            tape.sum(y)
        },
        &a,
        1e-5,
        1e-6,
    );
    assert!(report.passed(), "{report:?}");
}

#[test]
fn activation_fixed_points() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::vector(vec![0.0, 1.0]));
    let g = tape.gelu(x).unwrap();
    let s = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(g).data()[0], 0.0);
    assert_eq!(tape.value(s).data()[0], 0.5);
    let u = (2.0 / std::f64::consts::PI).sqrt() * (1.0 + 0.044715);
    assert!((tape.value(g).data()[1] - 0.5 * (1.0 + u.tanh())).abs() < 1e-15);
}

#[test]
fn unknown_activation_is_config_error() {
    assert!(matches!("relu".parse::<Activation>(), Err(CcpeError::Config(_))));
    assert_eq!("GELU".parse::<Activation>().unwrap(), Activation::Gelu);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let eq = tape.input(Tensor::full(&[2, 4], 1.7));
    for tau in [0.1, 1.0, 5.0] {
        let p = tape.softmax(eq, tau).unwrap();
        assert!(tape.value(p).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    let x = tape.input(Tensor::vector(vec![2f64.ln(), 0.0]));
    let p = tape.softmax(x, 1.0).unwrap();
    assert!((tape.value(p).data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((tape.value(p).data()[1] - 1.0 / 3.0).abs() < 1e-15);

    let x = tape.input(Tensor::vector(vec![1.0, 0.0]));
    let mut prev = 0.0;
    for tau in [10.0, 1.0, 0.5, 0.1, 0.01] {
        let p = tape.softmax(x, tau).unwrap();
        let first = tape.value(p).data()[0];
        assert!(first > prev);
        prev = first;
    }
    assert!((prev - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_rejects_non_positive_temperature() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(tape.softmax(x, 0.0), Err(CcpeError::Domain(_))));
    assert!(matches!(tape.softmax(x, -1.0), Err(CcpeError::Domain(_))));
}

#[test]
fn mean_pool_examples() {
    let mut tape = Tape::new();
    let c = tape.input(Tensor::full(&[3, 4], 2.5));
    let m = tape.mean_pool(c, 1).unwrap();
    assert_eq!(tape.shape(m), &[3]);
    assert!(tape.value(m).data().iter().all(|&v| v == 2.5));

    let x = tape.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let m = tape.mean_pool(x, 0).unwrap();
    assert_eq!(tape.value(m).data(), &[2.0]);

    assert!(matches!(tape.mean_pool(x, 1), Err(CcpeError::Dimension(_))));
}

#[test]
fn mean_pool_middle_axis_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let report = grad_check(
        |tape, x| {
            let m = tape.mean_pool(x, 1)?;
            let w = tape.input(w.clone());
            let p = tape.mul(m, w)?;
            tape.sum(p)
        },
        &x,
        1e-5,
        1e-6,
    );
    assert!(report.passed(), "{report:?}");
}

#[test]
fn concat_examples_and_round_trip() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.input(Tensor::vector(vec![3.0]));
    let one = tape.concat(&[a], 0).unwrap();
    assert_eq!(tape.value(one), tape.value(a));
    let ab = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.value(ab).data(), &[1.0, 2.0, 3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = tape.input(Tensor::randn(&[2, 3, 2], 1.0, &mut rng));
    let y = tape.input(Tensor::randn(&[2, 1, 2], 1.0, &mut rng));
    let xy = tape.concat(&[x, y], 1).unwrap();
    assert_eq!(tape.shape(xy), &[2, 4, 2]);
    let back_x = tape.slice(xy, 1, 0, 3).unwrap();
    let back_y = tape.slice(xy, 1, 3, 1).unwrap();
    assert_eq!(tape.value(back_x), tape.value(x));
    assert_eq!(tape.value(back_y), tape.value(y));

    let bad = tape.input(Tensor::zeros(&[3, 1, 2]));
    assert!(matches!(tape.concat(&[x, bad], 1), Err(CcpeError::Dimension(_))));
}

#[test]
fn backward_basics() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.sum(x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[5]));
    let s = tape.sigmoid(x).unwrap();
    let y = tape.sum(s).unwrap();
    tape.backward(y).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.25));
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, -2.0]));
    let y = tape.sum(x).unwrap();
    tape.backward(y).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    tape.zero_grad();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_output() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(CcpeError::Contract(_))));
}

#[test]
fn frozen_leaves_get_no_gradient_but_pass_it_through() {
    let mut tape = Tape::new();
    let w = tape.frozen(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let x = tape.param(t(&[1, 2], &[1.0, 1.0]));
    let y = tape.matmul(x, w).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(w).is_none());
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 7.0]);
}

#[test]
fn grad_check_is_exact_for_linear_maps() {
    let x = Tensor::vector(vec![0.3, -1.5, 2.0, 4.0]);
    let report = grad_check(
        |tape, x| {
            let c = tape.input(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]));
            let p = tape.mul(x, c)?;
            tape.sum(p)
        },
        &x,
        1e-5,
        1e-9,
    );
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

#[test]
fn grad_check_catches_wrong_backward_rule() {
    let x = Tensor::vector(vec![0.3, -1.5, 2.0]);
    // forward x², backward claims x instead of 2x
    let wrong: CustomBackward = Arc::new(|x: &Tensor, _out: &Tensor, g: &Tensor| {
        let data = x.data().iter().zip(g.data()).map(|(a, b)| a * b).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    });
    let report = grad_check(
        |tape, x| {
            let sq = tape.custom_unary(
                x,
                |t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * v).collect()).unwrap(),
                wrong.clone(),
            )?;
            tape.sum(sq)
        },
        &x,
        1e-5,
        1e-4,
    );
    assert!(!report.passed());
    assert!(report.max_rel_error > 0.4, "{report:?}");
}

fn two_layer(tape: &mut Tape, w1: Var, w2: Var, x: Var) -> crate::Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.gelu(h)?;
    let h = tape.layer_norm(h, w2, w2, 1e-5)?;
    let p = tape.softmax(h, 1.0)?;
    tape.nll(p, &[0, 2], 1e-12)
}

#[test]
fn recompute_matches_fresh_build() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let w1 = tape.param(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let w2 = tape.param(Tensor::randn(&[3], 1.0, &mut rng));
    let x = Tensor::randn(&[2, 4], 1.0, &mut rng);

    let xv = tape.input(x.clone());
    let out = two_layer(&mut tape, w1, w2, xv).unwrap();
    let cone = tape.cone(w2);
    assert!(cone.contains(&out));
    assert!(!tape.cone(w1).is_empty());

    tape.value_mut(w2).data_mut()[1] += 0.25;
    tape.recompute(&cone).unwrap();
    let replayed = tape.value(out).to_bytes();

    tape.reset();
    let xv = tape.input(x);
    let fresh = two_layer(&mut tape, w1, w2, xv).unwrap();
    assert_eq!(replayed, tape.value(fresh).to_bytes());
}

#[test]
fn gather_out_of_range_is_internal_error() {
    let mut tape = Tape::new();
    let table = tape.frozen(Tensor::zeros(&[4, 2]));
    assert!(matches!(tape.gather(table, &[0, 4]), Err(CcpeError::Internal(_))));
}

// ── per-primitive gradient sweep ─────────────────────────────────────

type Builder = fn(&mut Tape, Var, &mut ChaCha8Rng) -> crate::Result<Var>;

fn weighted_sum(tape: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> crate::Result<Var> {
    let w = tape.input(Tensor::randn(tape.shape(y), 1.0, rng));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn primitive_cases() -> Vec<(&'static str, Vec<usize>, Builder)> {
    vec![
        ("matmul", vec![3, 4], |t, x, r| {
            let b = t.input(Tensor::randn(&[4, 2], 1.0, r));
            let y = t.matmul(x, b)?;
            weighted_sum(t, y, r)
        }),
        ("matmul_rhs", vec![4, 2], |t, x, r| {
            let a = t.input(Tensor::randn(&[3, 4], 1.0, r));
            let y = t.matmul(a, x)?;
            weighted_sum(t, y, r)
        }),
        ("batch_matmul", vec![2, 3, 4], |t, x, r| {
            let b = t.input(Tensor::randn(&[2, 4, 2], 1.0, r));
            let y = t.batch_matmul(x, b)?;
            let yt = t.transpose_last(y)?;
            weighted_sum(t, yt, r)
        }),
        ("gelu", vec![6], |t, x, r| {
            let y = t.gelu(x)?;
            weighted_sum(t, y, r)
        }),
        ("sigmoid", vec![6], |t, x, r| {
            let y = t.sigmoid(x)?;
            weighted_sum(t, y, r)
        }),
        ("softmax", vec![3, 4], |t, x, r| {
            let y = t.softmax(x, 0.7)?;
            weighted_sum(t, y, r)
        }),
        ("mean_pool", vec![3, 4], |t, x, r| {
            let y = t.mean_pool(x, 0)?;
            weighted_sum(t, y, r)
        }),
        ("concat_slice", vec![2, 3], |t, x, r| {
            let c = t.input(Tensor::randn(&[2, 2], 1.0, r));
            let y = t.concat(&[c, x, x], 1)?;
            let s = t.slice(y, 1, 1, 4)?;
            weighted_sum(t, s, r)
        }),
        ("add_bias_scale_rows", vec![3, 4], |t, x, r| {
            let b = t.input(Tensor::randn(&[4], 1.0, r));
            let s = t.input(Tensor::randn(&[3, 1], 1.0, r));
            let y = t.add_bias(x, b)?;
            let z = t.scale_rows(y, s)?;
            let w = t.scale_rows(x, s)?;
            let q = t.mul(z, w)?;
            weighted_sum(t, q, r)
        }),
        ("scale_rows_gate", vec![3, 1], |t, gate, r| {
            let x = t.input(Tensor::randn(&[3, 4], 1.0, r));
            let y = t.scale_rows(x, gate)?;
            weighted_sum(t, y, r)
        }),
        ("layer_norm", vec![3, 5], |t, x, r| {
            let g = t.input(Tensor::randn(&[5], 1.0, r));
            let b = t.input(Tensor::randn(&[5], 1.0, r));
            let y = t.layer_norm(x, g, b, 1e-5)?;
            weighted_sum(t, y, r)
        }),
        ("circ_conv", vec![2, 5], |t, x, r| {
            let y = t.input(Tensor::randn(&[2, 5], 1.0, r));
            let a = t.circ_conv(x, y)?;
            let b = t.circ_conv(x, x)?;
            let s = t.add(a, b)?;
            weighted_sum(t, s, r)
        }),
        ("row_cosine", vec![3, 4], |t, x, r| {
            let y = t.input(Tensor::randn(&[3, 4], 1.0, r));
            let c = t.row_cosine(x, y, 1e-12)?;
            weighted_sum(t, c, r)
        }),
        ("nll_softmax", vec![4, 3], |t, x, _r| {
            let p = t.softmax(x, 1.0)?;
            t.nll(p, &[0, 2, 1, 2], 1e-12)
        }),
        ("gather_repeat_reshape", vec![5, 3], |t, x, r| {
            let g = t.gather(x, &[0, 3, 3, 1])?;
            let rep = t.repeat(g, 2)?;
            let flat = t.reshape(rep, &[8, 3])?;
            weighted_sum(t, flat, r)
        }),
        ("sub_add_scalar_mean", vec![4], |t, x, r| {
            let c = t.input(Tensor::randn(&[4], 1.0, r));
            let d = t.sub(c, x)?;
            let e = t.mul(d, d)?;
            let f = t.add_scalar(e, 1.5)?;
            t.mean(f)
        }),
    ]
}

#[test]
fn every_primitive_passes_gradient_check_over_twenty_seeds() {
    let opts = GradCheckOptions::default();
    for (name, shape, build) in primitive_cases() {
        for seed in 0..20u64 {
            let mut init = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&shape, 1.0, &mut init);
            let mut tape = Tape::new();
            let leaf = tape.param(x);
            let report = check_gradients(
                &mut tape,
                &[leaf],
                |t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                    build(t, leaf, &mut rng)
                },
                opts,
            )
            .unwrap();
            assert!(report.passed(), "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn gradients_are_linear_in_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let build_f = |t: &mut Tape, x: Var| -> crate::Result<Var> {
        let y = t.gelu(x)?;
        t.sum(y)
    };
    let build_g = |t: &mut Tape, x: Var| -> crate::Result<Var> {
        let w = t.input(w.clone());
        let y = t.matmul(x, w)?;
        let s = t.softmax(y, 1.0)?;
        let c = t.slice(s, 1, 0, 1)?;
        t.sum(c)
    };
    let grad_of = |both: u8| {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let out = match both {
            0 => build_f(&mut tape, x).unwrap(),
            1 => build_g(&mut tape, x).unwrap(),
            _ => {
                let f = build_f(&mut tape, x).unwrap();
                let g = build_g(&mut tape, x).unwrap();
                tape.add(f, g).unwrap()
            }
        };
        tape.backward(out).unwrap();
        tape.grad(x).unwrap().clone()
    };
    let (gf, gg, gsum) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gsum.numel() {
        assert!((gsum.data()[i] - gf.data()[i] - gg.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn repeated_backward_after_reset_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let x = tape.param(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let w = tape.param(Tensor::randn(&[3, 3], 1.0, &mut rng));
    let run = |tape: &mut Tape| {
        tape.reset();
        tape.zero_grad();
        let h = tape.matmul(x, w).unwrap();
        let a = tape.gelu(h).unwrap();
        let p = tape.softmax(a, 0.5).unwrap();
        let l = tape.nll(p, &[0, 1, 2, 0], 1e-12).unwrap();
        tape.backward(l).unwrap();
        (tape.grad(x).unwrap().to_bytes(), tape.grad(w).unwrap().to_bytes())
    };
    let first = run(&mut tape);
    let second = run(&mut tape);
    assert_eq!(first, second);
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        logits in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
        tau in 0.05f64..5.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(logits.clone()));
        let shifted = tape.input(Tensor::vector(logits.iter().map(|v| v + shift).collect()));
        let p = tape.softmax(x, tau).unwrap();
        let q = tape.softmax(shifted, tau).unwrap();
        let total: f64 = tape.value(p).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(tape.value(p).data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        prop_assert!(tape.value(p).max_abs_diff(tape.value(q)) < 1e-9);
    }
}
