mod common;

use common::*;
use grla_tensor::{Graph, Mode, Tensor, TensorError};
use proptest::prelude::*;

#[test]
fn forward_is_identity() {
    let mut g = Graph::<f32>::new(Mode::Eval);
    let x = g.param(Tensor::from_vec(vec![3.5, -1.0])).unwrap();
    let y = g.gradient_reversal(x, 0.7).unwrap();
    assert_eq!(g.value(y).data(), &[3.5, -1.0]);
}

#[test]
fn unit_lambda_flips_the_sign() {
    let mut g = Graph::<f32>::new(Mode::Eval);
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
    let y = g.gradient_reversal(x, 1.0).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[-1.0, -1.0, -1.0]);
}

#[test]
fn zero_lambda_blocks_the_gradient() {
    let mut g = Graph::<f32>::new(Mode::Eval);
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
    let y = g.gradient_reversal(x, 0.0).unwrap();
    let sq = g.mul(y, y).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn negative_lambda_is_rejected() {
    let mut g = Graph::<f32>::new(Mode::Eval);
    let x = g.param(Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.gradient_reversal(x, -0.1).unwrap_err(), TensorError::NegativeLambda(-0.1));
    assert!(g.gradient_reversal(x, f64::NAN).is_err());
}

/// f = c(grl(h(x))) with h, c nonlinear; grad must be -lambda times the
/// finite-difference gradient of c(h(x)).
#[test]
fn reversed_gradient_is_negative_lambda_times_the_plain_gradient() {
    let mut r = rng(5);
    let plain: Box<Build> = Box::new(|g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.sigmoid(h)?;
        let c = g.mul(h, h)?;
        g.sum(c)
    });
    for &lambda in &[0.0, 0.25, 1.0, 3.0] {
        let x = uniform(&mut r, &[2, 3], -1.0, 1.0);
        let w = uniform(&mut r, &[3, 2], -1.0, 1.0);
        let mut g = Graph::<f64>::new(Mode::Eval);
        let (xv, wv) = (g.param(x.clone()).unwrap(), g.constant(w.clone()).unwrap());
        let h = g.matmul(xv, wv).unwrap();
        let h = g.sigmoid(h).unwrap();
        let rev = g.gradient_reversal(h, lambda).unwrap();
        let c = g.mul(rev, rev).unwrap();
        let f = g.sum(c).unwrap();
        let grads = g.backward(f).unwrap();
        let inputs = vec![x, w];
        for entry in 0..6 {
            let fd = central_difference(plain.as_ref(), &inputs, 0, entry, 1e-4);
            let got = grads.get(xv).unwrap().data()[entry];
            let want = -lambda * fd;
            assert!(
                (got - want).abs() <= 1e-6 * want.abs().max(1e-3),
                "lambda {lambda}: {got} vs {want}"
            );
        }
    }
}

proptest! {
    #[test]
    fn forward_output_is_bit_identical(vals in prop::collection::vec(-1e6f32..1e6, 1..64), lambda in 0.0f64..10.0) {
        let mut g = Graph::<f32>::new(Mode::Train);
        let x = g.param(Tensor::from_vec(vals.clone())).unwrap();
        let y = g.gradient_reversal(x, lambda).unwrap();
        let out: Vec<u32> = g.value(y).data().iter().map(|v| v.to_bits()).collect();
        let inp: Vec<u32> = vals.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(out, inp);
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f32..30.0, 12)) {
        let mut g = Graph::<f32>::new(Mode::Eval);
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap()).unwrap();
        let p = g.softmax(x).unwrap();
        for row in g.value(p).data().chunks(4) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }
}
