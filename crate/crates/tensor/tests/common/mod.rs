#![allow(dead_code)]

use grla_tensor::{Graph, Mode, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform values with magnitude at least `gap`, so relu-style kinks are avoided.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..hi);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn eval(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::<f64>::new(Mode::Eval);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    g.value(out).item()
}

pub fn analytic(build: &Build, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut g = Graph::<f64>::new(Mode::Eval);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect()
}

/// Central difference of the scalar built by `build` with respect to one entry.
pub fn central_difference(build: &Build, inputs: &[Tensor<f64>], which: usize, entry: usize, eps: f64) -> f64 {
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[entry] += eps;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[entry] -= eps;
    (eval(build, &plus) - eval(build, &minus)) / (2.0 * eps)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between analytic and finite-difference gradients over
/// every entry of every input.
pub fn worst_gradient_error(build: &Build, inputs: &[Tensor<f64>], eps: f64) -> f64 {
    let grads = analytic(build, inputs);
    let mut worst = 0.0f64;
    for (which, g) in grads.iter().enumerate() {
        for entry in 0..g.numel() {
            let fd = central_difference(build, inputs, which, entry, eps);
            worst = worst.max(rel_err(g.data()[entry], fd));
        }
    }
    worst
}

/// Brute-force nested-loop convolution, independent of the im2col kernel.
pub fn conv2d_reference(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * c + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}
