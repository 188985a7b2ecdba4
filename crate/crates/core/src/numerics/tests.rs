use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::rng::RngHandle;

fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 0.0, 1.0, &mut RngHandle::new(seed))
}

// ---- matmul -------------------------------------------------------------

#[test]
fn matmul_identity_left() {
    let g = Graph::new();
    let a = m(2, 2, &[0.3, -1.5, 2.0, 7.25]);
    let out = g
        .matmul(g.constant(Tensor::eye(2)), g.constant(a.clone()))
        .unwrap();
    assert_eq!(g.value(out), a);
}

#[test]
fn matmul_identity_right() {
    let g = Graph::new();
    let out = g
        .matmul(
            g.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0])),
            g.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0])),
        )
        .unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_rejects_mismatched_inner_dims() {
    let g = Graph::new();
    let r = g.matmul(
        g.constant(Tensor::zeros(&[2, 3])),
        g.constant(Tensor::zeros(&[2, 3])),
    );
    assert!(matches!(r, Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let b = randn(&[4, 3], 2);
    let err = finite_diff_check(
        |g, a| {
            let p = g.matmul(a, g.constant(b.clone()))?;
            Ok(g.sum(p))
        },
        &randn(&[2, 4], 1),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn matmul_identity_associativity() {
    let a = randn(&[3, 3], 10);
    let b = randn(&[3, 4], 11);
    let g = Graph::new();
    let (av, bv, iv) = (
        g.constant(a),
        g.constant(b),
        g.constant(Tensor::eye(3)),
    );
    let left = g.matmul(g.matmul(av, iv).unwrap(), bv).unwrap();
    let right = g.matmul(av, g.matmul(iv, bv).unwrap()).unwrap();
    let (l, r) = (g.value(left), g.value(right));
    assert_eq!(l.shape(), r.shape());
    assert!(l.max_abs_diff(&r) <= 1e-12);
}

// ---- softmax ------------------------------------------------------------

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let g = Graph::new();
    let s = g.softmax(g.constant(Tensor::vector(vec![0.0, 0.0])), 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    let s = g
        .softmax(g.constant(Tensor::vector(vec![1000.0, 1000.0])), 0)
        .unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_matches_direct_exp_normalize() {
    // Oracle: plain exp / sum without max-subtraction (safe for small inputs).
    let x = [1.0f64, 2.0, 3.0];
    let z: f64 = x.iter().map(|v| v.exp()).sum();
    let expected: Vec<f64> = x.iter().map(|v| v.exp() / z).collect();
    let g = Graph::new();
    let s = g.softmax(g.constant(Tensor::vector(x.to_vec())), 0).unwrap();
    for (a, b) in g.value(s).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn softmax_along_leading_axis() {
    let g = Graph::new();
    let x = g.constant(m(2, 3, &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]));
    let s = g.value(g.softmax(x, 0).unwrap());
    for v in s.data() {
        assert!((v - 0.5).abs() < 1e-15);
    }
}

#[test]
fn log_softmax_single_element_is_zero() {
    let g = Graph::new();
    let s = g.log_softmax(g.constant(Tensor::vector(vec![3.7])), 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-500.0f64..500.0, 1..40)) {
        let g = Graph::new();
        let s = g.softmax(g.constant(Tensor::vector(values)), 0).unwrap();
        let sum: f64 = g.value(s).data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        prop_assert!(g.value(s).data().iter().all(|p| *p >= 0.0));
    }
}

// ---- layer norm ---------------------------------------------------------

#[test]
fn layer_norm_of_constant_vector_is_zero() {
    let g = Graph::new();
    let y = g
        .layer_norm(
            g.constant(Tensor::full(&[1, 6], 4.2)),
            g.constant(Tensor::full(&[6], 1.0)),
            g.constant(Tensor::zeros(&[6])),
            1e-5,
        )
        .unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn layer_norm_output_mean_equals_bias_mean() {
    let g = Graph::new();
    let bias = Tensor::full(&[5], 0.75);
    let y = g
        .layer_norm(
            g.constant(randn(&[3, 5], 4)),
            g.constant(Tensor::full(&[5], 1.0)),
            g.constant(bias),
            1e-5,
        )
        .unwrap();
    let y = g.value(y);
    for r in 0..3 {
        let mean: f64 = y.row(r).iter().sum::<f64>() / 5.0;
        assert!((mean - 0.75).abs() < 1e-12);
        let var: f64 = y.row(r).iter().map(|v| (v - 0.75).powi(2)).sum::<f64>() / 5.0;
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn layer_norm_rejects_mismatched_gain() {
    let g = Graph::new();
    let r = g.layer_norm(
        g.constant(Tensor::zeros(&[2, 4])),
        g.constant(Tensor::zeros(&[3])),
        g.constant(Tensor::zeros(&[4])),
        1e-5,
    );
    assert!(r.is_err());
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let gain = randn(&[4], 6);
    let bias = randn(&[4], 7);
    let w = randn(&[3, 4], 8);
    let err = finite_diff_check(
        |g, x| {
            let y = g.layer_norm(x, g.constant(gain.clone()), g.constant(bias.clone()), 1e-5)?;
            Ok(g.sum(g.mul(y, g.constant(w.clone()))?))
        },
        &randn(&[3, 4], 5),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "x: {err}");
    let x = randn(&[3, 4], 5);
    for which in 0..2 {
        let err = finite_diff_check(
            |g, p| {
                let (gn, bs) = if which == 0 {
                    (p, g.constant(bias.clone()))
                } else {
                    (g.constant(gain.clone()), p)
                };
                let y = g.layer_norm(g.constant(x.clone()), gn, bs, 1e-5)?;
                Ok(g.sum(g.mul(y, g.constant(w.clone()))?))
            },
            if which == 0 { &gain } else { &bias },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "param {which}: {err}");
    }
}

// ---- elementwise --------------------------------------------------------

#[test]
fn sigmoid_and_gelu_at_zero() {
    let g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    assert_eq!(g.item(g.sigmoid(z).unwrap()).unwrap(), 0.5);
    assert_eq!(g.item(g.gelu(z).unwrap()).unwrap(), 0.0);
}

#[test]
fn division_by_exact_zero_is_an_error() {
    let g = Graph::new();
    let r = g.div(
        g.constant(Tensor::vector(vec![1.0, 2.0])),
        g.constant(Tensor::vector(vec![1.0, 0.0])),
    );
    assert!(matches!(r, Err(Error::DivisionByZero)));
}

#[test]
fn log_of_non_positive_is_an_error() {
    let g = Graph::new();
    assert!(g.log(g.constant(Tensor::vector(vec![1.0, 0.0]))).is_err());
}

#[test]
fn trailing_axis_broadcast() {
    let g = Graph::new();
    let a = g.constant(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let b = g.constant(Tensor::vector(vec![10.0, 20.0, 30.0]));
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let c = g.mul(g.constant(Tensor::scalar(2.0)), a).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 3]);
}

#[test]
fn non_trailing_broadcast_is_rejected() {
    let g = Graph::new();
    let r = g.add(
        g.constant(Tensor::zeros(&[2, 3])),
        g.constant(Tensor::zeros(&[2])),
    );
    assert!(matches!(r, Err(Error::Dimension(_))));
}

#[test]
fn every_binary_kind_passes_gradcheck_with_broadcast() {
    let b = randn(&[3], 21).data().iter().map(|v| v.abs() + 0.5).collect::<Vec<_>>();
    let b = Tensor::vector(b);
    for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul, BinaryKind::Div] {
        // gradient w.r.t. the full operand
        let err = finite_diff_check(
            |g, x| {
                let y = g.binary(kind, x, g.constant(b.clone()))?;
                Ok(g.sum(g.mul(y, y)?))
            },
            &randn(&[2, 3], 20),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{kind:?} lhs {err}");
        // gradient w.r.t. the broadcast operand
        let a = randn(&[2, 3], 22);
        let err = finite_diff_check(
            |g, x| {
                let y = g.binary(kind, g.constant(a.clone()), x)?;
                Ok(g.sum(g.mul(y, y)?))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{kind:?} rhs {err}");
    }
}

/// Every differentiable op at 10 seeded random points.
#[test]
fn unary_and_structural_ops_pass_gradcheck() {
    type Build = fn(&Graph, Var) -> crate::error::Result<Var>;
    let cases: Vec<(&str, Build)> = vec![
        ("exp", |g, x| g.exp(x)),
        ("log", |g, x| {
            let p = g.affine(g.mul(x, x)?, 1.0, 0.5);
            g.log(p)
        }),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("gelu", |g, x| g.gelu(x)),
        ("pow", |g, x| g.pow(g.affine(g.mul(x, x)?, 1.0, 0.1), 1.7)),
        ("affine", |g, x| Ok(g.affine(x, -2.5, 1.0))),
        ("clamp", |g, x| Ok(g.clamp_min(x, -10.0))),
        ("transpose", |g, x| g.transpose(x)),
        ("reshape", |g, x| g.reshape(x, &[12])),
        ("softmax0", |g, x| g.softmax(x, 0)),
        ("softmax1", |g, x| g.softmax(x, 1)),
        ("log_softmax", |g, x| g.log_softmax(x, 1)),
        ("normalize", |g, x| g.l2_normalize(x)),
        ("sum_axis0", |g, x| g.sum_axis(x, 0)),
        ("sum_axis1", |g, x| g.sum_axis(x, 1)),
        ("mean", |g, x| g.mean(x)),
        ("gather", |g, x| g.gather_rows(x, &[2, 0, 2, 1])),
        ("concat", |g, x| {
            let top = g.slice_rows(x, 0, 1)?;
            g.concat_rows(&[x, top, x])
        }),
    ];
    for (name, build) in cases {
        for point in 0..10u64 {
            let x = randn(&[3, 4], 100 + point);
            let w = randn(&[12], 200 + point);
            let err = finite_diff_check(
                |g, xv| {
                    let y = build(g, xv)?;
                    let n = g.value(y).len();
                    let flat = g.reshape(y, &[n])?;
                    let wv = g.constant(Tensor::vector(w.data().iter().cycle().take(n).copied().collect()));
                    Ok(g.sum(g.mul(flat, wv)?))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} at point {point}: {err}");
        }
    }
}

// ---- attention ----------------------------------------------------------

#[test]
fn attention_gradients_match_finite_differences() {
    let segments = [(0, 3), (3, 2)];
    let (q, k, v) = (randn(&[5, 4], 30), randn(&[5, 4], 31), randn(&[5, 4], 32));
    let w = randn(&[5, 4], 33);
    for which in 0..3 {
        let err = finite_diff_check(
            |g, x| {
                let mut parts = [g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone())];
                parts[which] = x;
                let o = g.attention(parts[0], parts[1], parts[2], 2, &segments)?;
                Ok(g.sum(g.mul(o, g.constant(w.clone()))?))
            },
            [&q, &k, &v][which],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "input {which}: {err}");
    }
}

#[test]
fn attention_respects_segment_boundaries() {
    let (q, k, v) = (randn(&[5, 4], 40), randn(&[5, 4], 41), randn(&[5, 4], 42));
    let run = |v: &Tensor| {
        let g = Graph::new();
        let o = g
            .attention(
                g.constant(q.clone()),
                g.constant(k.clone()),
                g.constant(v.clone()),
                2,
                &[(0, 3), (3, 2)],
            )
            .unwrap();
        g.value(o)
    };
    let base = run(&v);
    let mut v2 = v.clone();
    v2.data_mut()[4 * 4] += 5.0; // row 4 lives in the second segment
    let moved = run(&v2);
    assert_eq!(&base.data()[..12], &moved.data()[..12]);
    assert_ne!(&base.data()[12..], &moved.data()[12..]);
}

#[test]
fn attention_rejects_gapped_segments() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[4, 4]));
    assert!(g.attention(x, x, x, 2, &[(0, 2), (3, 1)]).is_err());
    assert!(g.attention(x, x, x, 3, &[(0, 4)]).is_err());
}

// ---- backward -----------------------------------------------------------

#[test]
fn gradient_of_sum_is_ones() {
    let g = Graph::new();
    let x = g.param(randn(&[2, 3], 50));
    g.backward(g.sum(x)).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|v| *v == 1.0));
}

#[test]
fn gradient_of_sum_of_squares_is_twice_x() {
    let g = Graph::new();
    let xt = randn(&[4], 51);
    let x = g.param(xt.clone());
    g.backward(g.sum(g.mul(x, x).unwrap())).unwrap();
    for (gr, xi) in g.grad(x).unwrap().data().iter().zip(xt.data()) {
        assert_eq!(*gr, 2.0 * xi);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let g = Graph::new();
    let x = g.param(Tensor::zeros(&[3]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn backward_rejects_detached_loss() {
    let g = Graph::new();
    let _p = g.param(Tensor::zeros(&[3]));
    let c = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.backward(g.sum(c)), Err(Error::DetachedGraph)));
}

#[test]
fn backward_runs_only_once() {
    let g = Graph::new();
    let x = g.param(Tensor::zeros(&[3]));
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(Error::BackwardAlreadyRun)));
}

#[test]
fn unreachable_trainable_leaf_gets_zero_gradient() {
    let g = Graph::new();
    let x = g.param(Tensor::full(&[2], 1.0));
    let y = g.param(Tensor::full(&[3], 1.0));
    g.backward(g.sum(x)).unwrap();
    assert_eq!(g.grad(y).unwrap().data(), &[0.0; 3]);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let g = Graph::new();
        let x = g.param(randn(&[6, 8], 60));
        let w = g.constant(randn(&[8, 8], 61));
        let h = g.gelu(g.matmul(x, w).unwrap()).unwrap();
        let a = g.attention(h, h, h, 2, &[(0, 6)]).unwrap();
        let l = g.sum(g.softmax(a, 1).unwrap());
        let l = g.add(l, g.sum(g.mul(a, a).unwrap())).unwrap();
        g.backward(l).unwrap();
        g.grad(x).unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

// ---- finite-difference harness -----------------------------------------

#[test]
fn finite_diff_of_sum_is_exact() {
    let err = finite_diff_check(|g, x| Ok(g.sum(x)), &randn(&[5], 70), 1e-5).unwrap();
    assert!(err < 1e-9);
}

#[test]
fn finite_diff_of_sum_of_squares_at_one_two() {
    let err = finite_diff_check(
        |g, x| Ok(g.sum(g.mul(x, x)?)),
        &Tensor::vector(vec![1.0, 2.0]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6);
}

#[test]
fn finite_diff_detects_a_wrong_gradient() {
    let err = finite_diff_check(
        |g, x| Ok(g.sum(g.scale_grad(g.mul(x, x)?, 1.5))),
        &Tensor::vector(vec![1.0, 2.0]),
        1e-5,
    )
    .unwrap();
    assert!(err > 0.1);
}
