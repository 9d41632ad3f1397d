#![allow(dead_code)]

use grla_core::data::{synth_shifted_pair, LabeledImageSet, ShiftSpec};
use grla_core::model::{DannConfig, StageSpec};
use grla_tensor::{Float, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A model small enough for exhaustive gradient comparisons.
pub fn tiny_config(side: usize) -> DannConfig {
    DannConfig {
        input_shape: [3, side, side],
        feature_dim: 8,
        num_classes: 2,
        dropout_rate: 0.5,
        stages: vec![StageSpec::new(4, 1, 2)],
        seed: 5,
    }
}

pub fn small_pair(n_per_class: usize, side: usize, seed: u64) -> (LabeledImageSet, LabeledImageSet) {
    let spec = ShiftSpec {
        n_per_class,
        image_size: [3, side, side],
        seed,
        ..ShiftSpec::default()
    };
    synth_shifted_pair(&spec).unwrap()
}

pub fn uniform<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// |a − b| / max(|a|, |b|, floor).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}
