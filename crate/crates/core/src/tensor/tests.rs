use std::rc::Rc;

use super::ops::{self, Activation};
use super::*;
use crate::testutil::{numeric_grad, random_tensor, rel_err};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn c(x: Tensor) -> Var {
    Var::constant(x)
}

/// Gradient of `f` at `x` via the graph.
fn analytic(f: impl Fn(&Var) -> Var, x: &Tensor) -> Tensor {
    let v = Var::leaf(x.clone());
    f(&v).backward().unwrap();
    v.grad().unwrap()
}

fn value_of(f: impl Fn(&Var) -> Var) -> impl Fn(&Tensor) -> f64 {
    move |x: &Tensor| no_grad(|| f(&Var::constant(x.clone())).value().item())
}

#[test]
fn row_major_offsets() {
    let x = Tensor::zeros(&[2, 3, 4]);
    assert_eq!(x.strides(), vec![12, 4, 1]);
    assert_eq!(x.offset(&[1, 2, 3]), 23);
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn matmul_identity_and_hand_case() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let out = ops::matmul(&c(Tensor::eye(2)), &c(a.clone())).unwrap();
    assert_eq!(out.value(), &a);

    let out = ops::matmul(&c(t(&[1, 2], &[1.0, 2.0])), &c(t(&[2, 1], &[3.0, 4.0]))).unwrap();
    assert_eq!(out.value().data(), &[11.0]);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let err = ops::matmul(&c(Tensor::zeros(&[2, 3])), &c(Tensor::zeros(&[2, 3]))).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = random_tensor(&[5, 7], 1);
    let b = c(random_tensor(&[7, 3], 2));
    let f = |x: &Var| ops::sum(&ops::matmul(x, &b).unwrap()).unwrap();
    let num = numeric_grad(value_of(f), &a, 1e-5);
    assert!(rel_err(&analytic(f, &a), &num) < 1e-6);

    // Gradient with respect to the right operand, transposed variant.
    let a = c(random_tensor(&[5, 7], 3));
    let bt = random_tensor(&[3, 7], 4);
    let f = |x: &Var| {
        let y = ops::matmul_t(&a, x).unwrap();
        ops::sum(&ops::mul(&y, &y).unwrap()).unwrap()
    };
    let num = numeric_grad(value_of(f), &bt, 1e-5);
    assert!(rel_err(&analytic(f, &bt), &num) < 1e-6);
}

#[test]
fn softmax_examples() {
    let s = ops::softmax(&c(t(&[2], &[0.0, 0.0])), 0).unwrap();
    assert_eq!(s.value().data(), &[0.5, 0.5]);
    let s = ops::softmax(&c(t(&[2], &[1000.0, 1000.0])), 0).unwrap();
    assert_eq!(s.value().data(), &[0.5, 0.5]);
    let s = ops::softmax(&c(t(&[2], &[0.0, 3f64.ln()])), 0).unwrap();
    assert!((s.value().data()[0] - 0.25).abs() < 1e-15);
    assert!((s.value().data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_errors() {
    assert!(ops::softmax(&c(Tensor::zeros(&[2, 3])), 2).is_err());
    assert!(ops::softmax(&c(Tensor::zeros(&[2, 0])), 1).is_err());
}

#[test]
fn softmax_sums_to_one_on_inner_axis() {
    let x = random_tensor(&[3, 4, 5], 9).map(|v| v * 50.0);
    let s = ops::softmax(&c(x), 1).unwrap();
    let sv = s.value();
    for o in 0..3 {
        for i in 0..5 {
            let total: f64 = (0..4).map(|j| sv.get(&[o, j, i])).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_gradient_both_layouts() {
    let w = c(random_tensor(&[3, 4, 5], 11));
    for axis in [1, 2] {
        let x = random_tensor(&[3, 4, 5], 10);
        let f = |v: &Var| {
            let s = ops::softmax(v, axis).unwrap();
            ops::sum(&ops::mul(&s, &w).unwrap()).unwrap()
        };
        let num = numeric_grad(value_of(f), &x, 1e-5);
        assert!(rel_err(&analytic(f, &x), &num) < 1e-6, "axis {axis}");
    }
}

#[test]
fn masked_softmax_zero_weight_on_masked_keys() {
    let mask = Rc::new(t(&[2, 3], &[0.0, -1e9, 0.0, 0.0, 0.0, -1e9]));
    let x = random_tensor(&[4, 2, 3], 5);
    let s = ops::masked_softmax(&c(x), &mask).unwrap();
    for row in s.value().data().chunks(3).enumerate() {
        let (r, vals) = row;
        let masked = if r % 2 == 0 { 1 } else { 2 };
        assert_eq!(vals[masked], 0.0);
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let one = c(Tensor::ones(&[3]));
    let zero = c(Tensor::zeros(&[3]));
    let y = ops::layer_norm(&c(t(&[3], &[5.0, 5.0, 5.0])), &one, &zero, 1e-5).unwrap();
    assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);

    let one = c(Tensor::ones(&[2]));
    let zero = c(Tensor::zeros(&[2]));
    let y = ops::layer_norm(&c(t(&[2], &[1.0, 3.0])), &one, &zero, 1e-14).unwrap();
    assert!((y.value().data()[0] + 1.0).abs() < 1e-12);
    assert!((y.value().data()[1] - 1.0).abs() < 1e-12);

    assert!(ops::layer_norm(&c(Tensor::zeros(&[2, 0])), &one, &zero, 1e-5).is_err());
    assert!(ops::layer_norm(&c(Tensor::zeros(&[2])), &one, &zero, 0.0).is_err());
}

#[test]
fn layer_norm_gradients() {
    let x = random_tensor(&[4, 8], 21);
    let gamma = random_tensor(&[8], 22);
    let beta = random_tensor(&[8], 23);
    let w = c(random_tensor(&[4, 8], 24));
    let f = |v: &Var| {
        let y = ops::layer_norm(v, &c(gamma.clone()), &c(beta.clone()), 1e-5).unwrap();
        ops::sum(&ops::mul(&y, &w).unwrap()).unwrap()
    };
    let num = numeric_grad(value_of(f), &x, 1e-5);
    assert!(rel_err(&analytic(f, &x), &num) < 1e-5);

    let xv = c(x.clone());
    let f = |g: &Var| {
        let y = ops::layer_norm(&xv, g, &c(beta.clone()), 1e-5).unwrap();
        ops::sum(&ops::mul(&y, &w).unwrap()).unwrap()
    };
    let num = numeric_grad(value_of(f), &gamma, 1e-5);
    assert!(rel_err(&analytic(f, &gamma), &num) < 1e-5);
}

#[test]
fn mlp_block_examples() {
    let x = random_tensor(&[3, 4], 31);
    let zero_w1 = c(Tensor::zeros(&[4, 16]));
    let zero_b1 = c(Tensor::zeros(&[16]));
    let zero_w2 = c(Tensor::zeros(&[16, 4]));
    let zero_b2 = c(Tensor::zeros(&[4]));
    let y = ops::mlp_block(
        &c(x.clone()),
        &zero_w1,
        &zero_b1,
        &zero_w2,
        &zero_b2,
        Activation::Gelu,
    )
    .unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));

    let eye = c(Tensor::eye(4));
    let b = c(Tensor::zeros(&[4]));
    let y = ops::mlp_block(&c(x.clone()), &eye, &b, &eye, &b, Activation::Identity).unwrap();
    assert_eq!(y.value(), &x);

    assert!(ops::mlp_block(&c(x), &zero_w1, &zero_b1, &eye, &b, Activation::Gelu).is_err());
}

#[test]
fn mlp_block_gradient() {
    let x = random_tensor(&[3, 4], 41);
    let w1 = c(random_tensor(&[4, 16], 42));
    let b1 = c(random_tensor(&[16], 43));
    let w2 = c(random_tensor(&[16, 4], 44));
    let b2 = c(random_tensor(&[4], 45));
    let f = |v: &Var| {
        let y = ops::mlp_block(v, &w1, &b1, &w2, &b2, Activation::Gelu).unwrap();
        ops::sum(&ops::mul(&y, &y).unwrap()).unwrap()
    };
    let num = numeric_grad(value_of(f), &x, 1e-5);
    assert!(rel_err(&analytic(f, &x), &num) < 1e-5);
}

#[test]
fn backward_simple_cases() {
    let p = Var::leaf(random_tensor(&[3, 2], 51));
    ops::sum(&p).unwrap().backward().unwrap();
    assert!(p.grad().unwrap().data().iter().all(|&g| g == 1.0));

    let p = Var::leaf(random_tensor(&[3, 2], 52));
    ops::sum(&ops::mul(&p, &p).unwrap())
        .unwrap()
        .backward()
        .unwrap();
    let expect = p.value().map(|v| 2.0 * v);
    assert!(p.grad().unwrap().max_abs_diff(&expect) < 1e-15);
}

#[test]
fn backward_accumulates_across_calls() {
    let p = Var::leaf(random_tensor(&[4], 53));
    let loss = ops::sum(&p).unwrap();
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert!(p.grad().unwrap().data().iter().all(|&g| g == 2.0));
    p.zero_grad();
    assert!(p.grad().is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let p = Var::leaf(Tensor::ones(&[2]));
    let y = ops::scale(&p, 2.0).unwrap();
    assert!(y.backward().is_err());
}

#[test]
fn no_grad_records_nothing() {
    let p = Var::leaf(Tensor::ones(&[2]));
    let y = no_grad(|| ops::scale(&p, 2.0).unwrap());
    assert!(!y.requires_grad());
    assert!(is_grad_enabled());
}

#[test]
fn checked_mode_rejects_non_finite() {
    let x = c(t(&[1], &[f64::MAX]));
    assert!(matches!(
        ops::scale(&x, 10.0),
        Err(crate::Error::NonFinite(_))
    ));
}

#[test]
fn gather_and_reductions_have_correct_gradients() {
    let x = random_tensor(&[2, 3, 4], 61);
    let index = Rc::new(vec![0, 5, ops::GATHER_ZERO, 5, 23, 7]);
    let w = c(random_tensor(&[2, 4], 62));
    let f = |v: &Var| {
        let g = ops::gather(v, index.clone(), &[6]).unwrap();
        let m = ops::mean_axis(v, 1).unwrap();
        let (n, _) = ops::l2_normalize_rows(&m).unwrap();
        let a = ops::sum(&ops::mul(&g, &g).unwrap()).unwrap();
        let b = ops::sum(&ops::mul(&n, &w).unwrap()).unwrap();
        let lse = ops::sum(&ops::log_sum_exp(v, None).unwrap()).unwrap();
        ops::add(&ops::add(&a, &b).unwrap(), &lse).unwrap()
    };
    let num = numeric_grad(value_of(f), &x, 1e-5);
    assert!(rel_err(&analytic(f, &x), &num) < 1e-6);
}

#[test]
fn gather_rows_copies_and_scatters_back() {
    let x = random_tensor(&[3, 2], 63);
    let index = Rc::new(vec![2, ops::GATHER_ZERO, 0, 2]);
    let g = ops::gather_rows(&c(x.clone()), index.clone(), 2, &[2, 2, 2]).unwrap();
    let d = g.value().data();
    assert_eq!(&d[0..2], &x.data()[4..6]);
    assert_eq!(&d[2..4], &[0.0, 0.0]);
    assert_eq!(&d[6..8], &x.data()[4..6]);
    let w = c(random_tensor(&[2, 4], 64));
    let f = |v: &Var| {
        let g = ops::gather_rows(v, index.clone(), 2, &[2, 4]).unwrap();
        ops::sum(&ops::mul(&ops::mul(&g, &g).unwrap(), &w).unwrap()).unwrap()
    };
    let num = numeric_grad(value_of(f), &x, 1e-5);
    assert!(rel_err(&analytic(f, &x), &num) < 1e-6);
    assert!(ops::gather_rows(&c(x), Rc::new(vec![3]), 2, &[1, 2]).is_err());
}

#[test]
fn masked_softmax_mask_repeats_over_leading_groups() {
    let mask = Rc::new(t(&[2, 1, 2], &[0.0, -1e9, -1e9, 0.0]));
    let s = ops::masked_softmax(&c(random_tensor(&[6, 1, 2], 65)), &mask).unwrap();
    for (r, vals) in s.value().data().chunks(2).enumerate() {
        assert_eq!(vals, if r % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
    }
    assert!(ops::masked_softmax(&c(random_tensor(&[5, 2], 66)), &mask).is_err());
}

#[test]
fn bmm_gradients() {
    let a = random_tensor(&[3, 4, 5], 71);
    let b = c(random_tensor(&[3, 6, 5], 72));
    let f = |v: &Var| {
        let y = ops::bmm(v, &b, true, 0.5).unwrap();
        ops::sum(&ops::mul(&y, &y).unwrap()).unwrap()
    };
    let num = numeric_grad(value_of(f), &a, 1e-5);
    assert!(rel_err(&analytic(f, &a), &num) < 1e-6);

    let a = c(random_tensor(&[3, 4, 5], 73));
    let b = random_tensor(&[3, 5, 6], 74);
    let f = |v: &Var| {
        let y = ops::bmm(&a, v, false, 1.0).unwrap();
        ops::sum(&ops::mul(&y, &y).unwrap()).unwrap()
    };
    let num = numeric_grad(value_of(f), &b, 1e-5);
    assert!(rel_err(&analytic(f, &b), &num) < 1e-6);
}

#[test]
fn add_trailing_and_linear_bias_gradients() {
    let b = random_tensor(&[4], 81);
    let x = c(random_tensor(&[2, 3, 4], 82));
    let w = c(random_tensor(&[4, 4], 83));
    let f = |v: &Var| {
        let y = ops::add_trailing(&x, v).unwrap();
        let z = ops::linear(&y, &w, Some(v)).unwrap();
        ops::sum(&ops::mul(&z, &z).unwrap()).unwrap()
    };
    let num = numeric_grad(value_of(f), &b, 1e-5);
    assert!(rel_err(&analytic(f, &b), &num) < 1e-6);
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-700.0f64..700.0, 1..40)) {
            let n = vals.len();
            let s = ops::softmax(&c(Tensor::new(vec![n], vals).unwrap()), 0).unwrap();
            let total: f64 = s.value().data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.value().data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let x = random_tensor(&[6, 8], seed);
            let w = random_tensor(&[8, 8], seed + 1);
            let run = || {
                let y = ops::linear(&c(x.clone()), &c(w.clone()), None).unwrap();
                ops::softmax(&y, 1).unwrap().value().clone()
            };
            let (a, b) = (run(), run());
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
