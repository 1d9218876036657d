mod common;

use std::rc::Rc;

use common::rand_tensor;
use msnc_core::tensor::{finite_diff_check, BackwardFn};
use msnc_core::{Error, Graph, Result, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn weighted_sum<'g>(y: Var<'g>) -> Result<Var<'g>> {
    let shape = y.shape();
    let w = Tensor::from_fn(&shape, |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0);
    y.mul(y.graph().constant(w))?.sum()
}

fn assert_fd<F>(f: F, x: &Tensor)
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let r = finite_diff_check(f, x, H, TOL).unwrap();
    assert!(
        r.passed,
        "max rel error {} at {} (analytic {:?}, numeric {:?})",
        r.max_rel_error, r.worst_index, r.analytic, r.numeric
    );
}

#[test]
fn matmul_identity_and_hand_contraction() {
    let g = Graph::new();
    let x = rand_tensor(&[3, 3], 1, 1.0);
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let out = g.constant(eye).matmul(g.constant(x.clone())).unwrap();
    assert_eq!(*out.value(), x);

    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[17.0, 39.0]);
}

#[test]
fn matmul_rejects_mismatched_inner_extent() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(a.matmul(b), Err(Error::Shape(_))));
    let a = g.constant(Tensor::zeros(&[2, 2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 3, 4]));
    assert!(matches!(a.matmul(b), Err(Error::Shape(_))));
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transposed() {
    let b = rand_tensor(&[4, 3], 2, 1.0);
    let a = rand_tensor(&[2, 4], 3, 1.0);
    let g = Graph::new();
    let av = g.param(a.clone());
    let loss = av.matmul(g.constant(b.clone())).unwrap().sum().unwrap();
    let grad = g.backward(loss).unwrap().get_or_zeros(av);
    for i in 0..2 {
        for k in 0..4 {
            let expected: f64 = (0..3).map(|j| b.at(&[k, j])).sum();
            assert!((grad.at(&[i, k]) - expected).abs() < 1e-14);
        }
    }
    let bb = b.clone();
    assert_fd(move |g, x| x.matmul(g.constant(bb.clone()))?.sum(), &a);
}

#[test]
fn broadcast_matmul_gradients() {
    let w = rand_tensor(&[5, 3], 4, 1.0);
    let x = rand_tensor(&[2, 4, 5], 5, 1.0);
    let wc = w.clone();
    assert_fd(move |g, x| weighted_sum(x.matmul(g.constant(wc.clone()))?), &x);
    let xc = x.clone();
    assert_fd(move |g, w| weighted_sum(g.constant(xc.clone()).matmul(w)?), &w);
    // batch broadcast on the left operand
    let a = rand_tensor(&[1, 3, 4], 6, 1.0);
    let b = rand_tensor(&[2, 4, 2], 7, 1.0);
    let bc = b.clone();
    assert_fd(move |g, a| weighted_sum(a.matmul(g.constant(bc.clone()))?), &a);
}

#[test]
fn softmax_examples() {
    let g = Graph::new();
    let c = g.constant(Tensor::full(&[5], 2.5)).softmax(0).unwrap();
    for &v in c.value().data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
    let s = g
        .constant(t(&[2], &[0.0, 3f64.ln()]))
        .softmax(0)
        .unwrap()
        .value();
    assert!((s.data()[0] - 0.25).abs() < 1e-15);
    assert!((s.data()[1] - 0.75).abs() < 1e-15);

    let x = rand_tensor(&[3, 6], 8, 3.0);
    let a = g.constant(x.clone()).softmax(1).unwrap().value();
    let b = g.constant(x.map(|v| v + 17.25)).softmax(1).unwrap().value();
    assert!(a.max_abs_diff(&b) < 1e-15);
    for row in a.data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn layer_norm_examples() {
    let g = Graph::new();
    let ones = g.constant(Tensor::ones(&[4]));
    let zeros = g.constant(Tensor::zeros(&[4]));
    let y = g
        .constant(Tensor::full(&[2, 4], 3.0))
        .layer_norm(ones, zeros, 1e-6)
        .unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));

    let one2 = g.constant(Tensor::ones(&[2]));
    let zero2 = g.constant(Tensor::zeros(&[2]));
    let y = g
        .constant(t(&[1, 2], &[1.0, 3.0]))
        .layer_norm(one2, zero2, 1e-6)
        .unwrap()
        .value();
    let expected = 1.0 / (1.0f64 + 1e-6).sqrt();
    assert!((y.data()[0] + expected).abs() < 1e-15);
    assert!((y.data()[1] - expected).abs() < 1e-15);

    let beta = rand_tensor(&[6], 9, 1.0);
    let bv = g.constant(beta.clone());
    let y = g
        .constant(rand_tensor(&[5, 6], 10, 4.0))
        .layer_norm(g.constant(Tensor::ones(&[6])), bv, 1e-6)
        .unwrap()
        .value();
    let beta_mean = beta.data().iter().sum::<f64>() / 6.0;
    for row in y.data().chunks(6) {
        let m = row.iter().sum::<f64>() / 6.0;
        assert!((m - beta_mean).abs() < 1e-6);
    }
}

#[test]
fn gelu_examples() {
    let g = Graph::new();
    let y = g.constant(t(&[2], &[0.0, 10.0])).gelu().unwrap().value();
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 10.0).abs() < 1e-6);
    let r = finite_diff_check(|_, x| x.gelu()?.sum(), &Tensor::scalar(0.0), H, TOL).unwrap();
    assert!(r.passed);
    assert!((r.numeric[0] - 0.5).abs() < 1e-9);
}

#[test]
fn backward_simple_losses() {
    let x = rand_tensor(&[3, 2], 11, 2.0);
    let g = Graph::new();
    let xv = g.param(x.clone());
    let gr = g.backward(xv.sum().unwrap()).unwrap();
    assert!(gr.get(xv).unwrap().data().iter().all(|&v| v == 1.0));

    let g = Graph::new();
    let xv = g.param(x.clone());
    let gr = g.backward(xv.mul(xv).unwrap().sum().unwrap()).unwrap();
    for (gv, xv) in gr.get(xv).unwrap().data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let g = Graph::new();
    let xv = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(xv), Err(Error::Usage(_))));
}

#[test]
fn fan_out_gradients_accumulate() {
    let g = Graph::new();
    let x = g.param(Tensor::scalar(1.5));
    let y = x.add(x).unwrap().add(x.mul(x).unwrap()).unwrap();
    let gr = g.backward(y).unwrap();
    assert_eq!(gr.get(x).unwrap().data()[0], 2.0 + 3.0);
}

#[test]
fn non_finite_forward_is_an_error() {
    let g = Graph::new();
    let x = g.constant(t(&[2], &[0.0, -1.0]));
    assert!(matches!(x.ln(), Err(Error::NonFinite(_))));
}

#[test]
fn finite_diff_check_examples() {
    let x = rand_tensor(&[4, 3], 12, 1.0);
    let r = finite_diff_check(|_, x| x.sum(), &x, H, TOL).unwrap();
    assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);

    // softmax cross-entropy against a fixed one-hot target
    let logits = rand_tensor(&[8], 13, 2.0);
    let target = Tensor::from_fn(&[8], |i| if i == 3 { 1.0 } else { 0.0 });
    let r = finite_diff_check(
        move |g, x| {
            let p = x.softmax(0)?.ln()?;
            p.mul(g.constant(target.clone()))?.sum()?.neg()
        },
        &logits,
        H,
        TOL,
    )
    .unwrap();
    assert!(r.passed, "{}", r.max_rel_error);
}

#[test]
fn finite_diff_check_catches_wrong_backward() {
    // x^2 with a backward rule claiming 3x
    let wrong: BackwardFn = Rc::new(|ins, _out, g| {
        vec![ins[0].data().iter().zip(g).map(|(x, d)| 3.0 * x * d).collect()]
    });
    let x = rand_tensor(&[5], 14, 1.0);
    let r = finite_diff_check(
        move |g, x| {
            let v = x.value().map(|v| v * v);
            g.custom(&[x], v, wrong.clone())?.sum()
        },
        &x,
        H,
        TOL,
    )
    .unwrap();
    assert!(!r.passed);
}

#[test]
fn gather_backward_scatters_exact_sum() {
    let x = rand_tensor(&[4, 3], 15, 1.0);
    let g = Graph::new();
    let xv = g.param(x);
    let picked = xv.gather(0, &[2, 0, 2, 3, 2]).unwrap();
    let w = rand_tensor(&[5, 3], 16, 1.0);
    let loss = picked.mul(g.constant(w.clone())).unwrap().sum().unwrap();
    let gr = g.backward(loss).unwrap().get_or_zeros(xv);
    let incoming: f64 = w.data().iter().sum();
    let scattered: f64 = gr.data().iter().sum();
    assert!((incoming - scattered).abs() < 1e-12);
    // row 1 was never gathered
    assert!(gr.data()[3..6].iter().all(|&v| v == 0.0));
    assert!(matches!(xv.gather(0, &[4]), Err(Error::Shape(_))));
}

#[test]
fn space_depth_rearrangements_invert() {
    let x = rand_tensor(&[4, 6, 3], 17, 1.0);
    let g = Graph::new();
    let v = g.constant(x.clone());
    let s = v.space_to_depth(2).unwrap();
    assert_eq!(s.shape(), vec![2, 3, 12]);
    // channel order is (row in block, column in block, channel)
    assert_eq!(s.value().at(&[1, 2, 3 + 1]), x.at(&[2, 5, 1]));
    assert_eq!(*s.depth_to_space(2).unwrap().value(), x);
    assert!(v.space_to_depth(4).is_err());
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let g = Graph::new();
        let x = g.constant(rand_tensor(&[7, 9], 18, 1.0));
        let w = g.constant(rand_tensor(&[9, 5], 19, 1.0));
        x.matmul(w)
            .unwrap()
            .softmax(1)
            .unwrap()
            .gelu()
            .unwrap()
            .value()
            .data()
            .to_vec()
    };
    assert_eq!(run(), run());
}

/// One differentiable op under test, selected by index.
fn op_case<'g>(which: usize, g: &'g Graph, x: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let shape = x.shape();
    let last = *shape.last().unwrap();
    let other = || g.constant(rand_tensor(&shape, seed ^ 0xA5, 1.0));
    let row = || g.constant(rand_tensor(&[last], seed ^ 0x5A, 1.0));
    let y = match which {
        0 => x.add(other())?,
        1 => x.sub(other())?,
        2 => x.mul(other())?,
        3 => x.div(g.constant(rand_tensor(&shape, seed, 1.0).map(|v| v.abs() + 0.5)))?,
        4 => x.add_row(row())?,
        5 => x.mul_row(row())?,
        6 => x.scale(-1.7)?.add_scalar(0.3)?,
        7 => x.reshape(&[shape.iter().product()])?,
        8 => {
            let r = shape.len();
            let perm: Vec<usize> = (0..r).rev().collect();
            x.permute(&perm)?
        }
        9 => {
            let parts = x.split(0, &[1, shape[0] - 1])?;
            g.concat(&[parts[1], parts[0], x], 0)?
        }
        10 => x.gather(0, &[shape[0] - 1, 0, shape[0] - 1])?,
        11 => x.mean()?.add(x.sum()?)?,
        12 => x.sum_axis(0)?,
        13 => x.mean_axis(shape.len() - 1)?,
        14 => x.softmax(shape.len() - 1)?,
        15 => x.softmax(0)?,
        16 => x.layer_norm(row(), row(), 1e-6)?,
        17 => x.gelu()?,
        18 => x.exp()?,
        19 => x.mul(x)?.add_scalar(0.5)?.ln()?,
        20 => x.softplus()?,
        21 => x.sigmoid()?,
        22 => x.normal_cdf()?,
        23 => x.clamp(-10.0, 10.0)?,
        _ => x.transpose_last()?,
    };
    weighted_sum(y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn every_op_passes_gradient_check(
        which in 0usize..25,
        d0 in 2usize..4,
        d1 in 1usize..4,
        d2 in 2usize..5,
        seed in 0u64..1000,
    ) {
        let x = rand_tensor(&[d0, d1, d2], seed, 1.5);
        let r = finite_diff_check(move |g, x| op_case(which, g, x, seed), &x, H, TOL).unwrap();
        prop_assert!(r.passed, "op {} max rel error {}", which, r.max_rel_error);
    }

    #[test]
    fn reshape_and_permute_invert_exactly(
        d0 in 1usize..5, d1 in 1usize..5, d2 in 1usize..5, seed in 0u64..1000,
    ) {
        let x = rand_tensor(&[d0, d1, d2], seed, 10.0);
        let g = Graph::new();
        let v = g.constant(x.clone());
        let back = v.reshape(&[d2, d0 * d1]).unwrap().reshape(&[d0, d1, d2]).unwrap();
        prop_assert_eq!(&*back.value(), &x);
        let back = v.permute(&[1, 2, 0]).unwrap().permute(&[2, 0, 1]).unwrap();
        prop_assert_eq!(&*back.value(), &x);
    }
}
