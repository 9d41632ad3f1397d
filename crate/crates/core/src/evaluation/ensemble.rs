use grla_tensor::{Float, Tensor};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::DannModel;
use crate::trainer::predict_set;

/// Elementwise mean of same-shaped probability tables. Each entry is
/// computed from the values sorted ascending as `min + Σ(v − min)/k`,
/// which does not depend on model order and returns `v` exactly when all
/// members agree.
fn mean_tables<T: Float>(tables: &[Tensor<T>]) -> Tensor<T> {
    let k = tables.len() as f64;
    let shape = tables[0].shape().to_vec();
    let mut vals = Vec::with_capacity(tables.len());
    let data = (0..tables[0].numel())
        .map(|j| {
            vals.clear();
            vals.extend(tables.iter().map(|t| t.data()[j].as_f64()));
            vals.sort_by(f64::total_cmp);
            let lo = vals[0];
            let spread: f64 = vals.iter().map(|v| v - lo).sum();
            T::from_f64(lo + spread / k)
        })
        .collect();
    Tensor::new(shape, data).expect("same shape as members")
}

fn check_members<T: Float>(models: &[&DannModel<T>]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("an ensemble needs at least one model".into()))?
        .config();
    for m in models {
        let c = m.config();
        if c.num_classes != first.num_classes || c.input_shape != first.input_shape {
            return Err(Error::Shape(format!(
                "ensemble members disagree: {} classes on {:?} vs {} classes on {:?}",
                c.num_classes, c.input_shape, first.num_classes, first.input_shape
            )));
        }
    }
    Ok(())
}

/// Arithmetic mean of each member's eval-mode class probabilities.
pub fn ensemble_predict<T: Float>(models: &[&DannModel<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    check_members(models)?;
    let tables = models.iter().map(|m| m.predict_proba(x)).collect::<Result<Vec<_>>>()?;
    Ok(mean_tables(&tables))
}

/// [`ensemble_predict`] over every row of a labeled set.
pub fn ensemble_predict_set<T: Float>(models: &[&DannModel<T>], set: &LabeledImageSet, chunk: usize) -> Result<Tensor<T>> {
    check_members(models)?;
    let tables = models
        .iter()
        .map(|m| predict_set(*m, set, chunk))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_tables(&tables))
}
