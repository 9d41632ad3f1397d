//! Every smooth primitive checked against central differences (eps = 1e-3,
//! 64-bit) at random points away from kinks.

mod common;

use common::*;
use grla_tensor::Tensor;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-4;
const POINTS: usize = 100;

fn check_points(name: &str, build: Box<Build>, make: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor<f64>>) {
    let mut r = rng(name.len() as u64 * 7919);
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < POINTS {
        let inputs = make(&mut r);
        let grads = analytic(build.as_ref(), &inputs);
        for (which, g) in grads.iter().enumerate() {
            for entry in 0..g.numel() {
                if checked >= POINTS {
                    break;
                }
                let fd = central_difference(build.as_ref(), &inputs, which, entry, EPS);
                worst = worst.max(rel_err(g.data()[entry], fd));
                checked += 1;
            }
        }
    }
    assert!(worst < TOL, "{name}: worst relative error {worst}");
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted(g: &mut grla_tensor::Graph<f64>, y: grla_tensor::Var) -> grla_tensor::Result<grla_tensor::Var> {
    let n = g.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f64 / 11.0)).collect();
    let wv = g.constant(Tensor::new(g.shape(y).to_vec(), w).unwrap())?;
    let p = g.mul(y, wv)?;
    g.sum(p)
}

#[test]
fn matmul() {
    check_points(
        "matmul",
        Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y)
        }),
        |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
    );
}

#[test]
fn conv2d() {
    for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
        check_points(
            &format!("conv2d-{stride}-{pad}"),
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad)?;
                weighted(g, y)
            }),
            |r| vec![uniform(r, &[2, 2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0)],
        );
    }
}

#[test]
fn relu() {
    check_points(
        "relu",
        Box::new(|g, v| {
            let y = g.relu(v[0])?;
            weighted(g, y)
        }),
        |r| vec![away_from_zero(r, &[10], 0.05, 2.0)],
    );
}

#[test]
fn max_pool2d() {
    check_points(
        "max_pool2d",
        Box::new(|g, v| {
            let y = g.max_pool2d(v[0], 2, 2)?;
            weighted(g, y)
        }),
        // distinct, well separated values so the argmax is stable under eps
        |r| {
            let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
            use rand::seq::SliceRandom;
            vals.shuffle(r);
            vec![Tensor::new(vec![1, 2, 4, 4], vals).unwrap()]
        },
    );
}

#[test]
fn global_avg_pool() {
    check_points(
        "global_avg_pool",
        Box::new(|g, v| {
            let y = g.global_avg_pool(v[0])?;
            weighted(g, y)
        }),
        |r| vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
    );
}

#[test]
fn elementwise_binary() {
    check_points(
        "add-sub-mul-div",
        Box::new(|g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let s = g.sub(s, v[0])?;
            let m = g.mul(v[0], v[1])?;
            let d = g.div(m, v[2])?;
            let t = g.add(d, s)?;
            weighted(g, t)
        }),
        |r| {
            vec![
                uniform(r, &[6], -1.0, 1.0),
                uniform(r, &[6], -1.0, 1.0),
                uniform(r, &[6], 0.5, 2.0),
            ]
        },
    );
}

#[test]
fn softmax() {
    check_points(
        "softmax",
        Box::new(|g, v| {
            let y = g.softmax(v[0])?;
            weighted(g, y)
        }),
        |r| vec![uniform(r, &[3, 4], -2.0, 2.0)],
    );
}

#[test]
fn sigmoid() {
    check_points(
        "sigmoid",
        Box::new(|g, v| {
            let y = g.sigmoid(v[0])?;
            weighted(g, y)
        }),
        |r| vec![uniform(r, &[10], -4.0, 4.0)],
    );
}

#[test]
fn log() {
    check_points(
        "log",
        Box::new(|g, v| {
            let y = g.log(v[0])?;
            weighted(g, y)
        }),
        |r| vec![uniform(r, &[10], 0.2, 3.0)],
    );
}

#[test]
fn reductions_scale_and_reshape() {
    check_points(
        "reductions",
        Box::new(|g, v| {
            let f = g.flatten(v[0])?;
            let s = g.sum(f)?;
            let sq = g.mul(v[0], v[0])?;
            let m = g.mean(sq)?;
            let m = g.scale(m, 2.5)?;
            g.add(s, m)
        }),
        |r| vec![uniform(r, &[2, 3, 2], -1.0, 1.0)],
    );
}

#[test]
fn bias_add() {
    check_points(
        "bias_add",
        Box::new(|g, v| {
            let y = g.bias_add(v[0], v[1])?;
            let y = g.sigmoid(y)?;
            weighted(g, y)
        }),
        |r| vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
    );
}

#[test]
fn clamp_min() {
    check_points(
        "clamp_min",
        Box::new(|g, v| {
            let y = g.clamp_min(v[0], 0.0)?;
            weighted(g, y)
        }),
        |r| vec![away_from_zero(r, &[10], 0.05, 2.0)],
    );
}

#[test]
fn bce_with_logits() {
    check_points(
        "bce_with_logits",
        Box::new(|g, v| {
            let d = g.constant(Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]))?;
            let y = g.bce_with_logits(v[0], d)?;
            weighted(g, y)
        }),
        |r| vec![uniform(r, &[6], -6.0, 6.0)],
    );
}
