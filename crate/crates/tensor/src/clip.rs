use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
///
/// Returns the norm measured before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut [Tensor<T>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) || !max_norm.is_finite() {
        return Err(TensorError::InvalidMaxNorm(max_norm));
    }
    let mut sq = 0.0f64;
    for (index, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(TensorError::NonFiniteGradient { index });
        }
        sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let factor = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    Ok(norm)
}
