//! Masked classification loss, domain loss, and the λ / learning-rate schedules.

use grla_tensor::{Float, Graph, Mode, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities inside the classification log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// λ(p) = p²
    ParabolicUp,
    /// λ(p) = p
    LinearUp,
    /// λ(p) = 1 − p
    LinearDown,
    /// λ(p) = 1 − p²
    ParabolicDown,
    /// λ(p) = 0.5
    ConstantHalf,
    /// λ(p) = 2 / (1 + e^(−10p)) − 1
    Logistic,
    /// λ ≡ 0: the domain head still trains but nothing is reversed into the extractor.
    None,
}

impl LambdaSchedule {
    pub const ALL: [LambdaSchedule; 7] = [
        LambdaSchedule::ParabolicUp,
        LambdaSchedule::LinearUp,
        LambdaSchedule::LinearDown,
        LambdaSchedule::ParabolicDown,
        LambdaSchedule::ConstantHalf,
        LambdaSchedule::Logistic,
        LambdaSchedule::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LambdaSchedule::ParabolicUp => "parabolic_up",
            LambdaSchedule::LinearUp => "linear_up",
            LambdaSchedule::LinearDown => "linear_down",
            LambdaSchedule::ParabolicDown => "parabolic_down",
            LambdaSchedule::ConstantHalf => "constant_half",
            LambdaSchedule::Logistic => "logistic",
            LambdaSchedule::None => "none",
        }
    }
}

impl std::str::FromStr for LambdaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LambdaSchedule::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown lambda schedule {s:?}")))
    }
}

/// λ at training progress `p` ∈ [0, 1].
pub fn lambda_value(kind: LambdaSchedule, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("training progress {p} outside [0, 1]")));
    }
    Ok(match kind {
        LambdaSchedule::ParabolicUp => p * p,
        LambdaSchedule::LinearUp => p,
        LambdaSchedule::LinearDown => 1.0 - p,
        LambdaSchedule::ParabolicDown => 1.0 - p * p,
        LambdaSchedule::ConstantHalf => 0.5,
        LambdaSchedule::Logistic => 2.0 / (1.0 + (-10.0 * p).exp()) - 1.0,
        LambdaSchedule::None => 0.0,
    })
}

/// Linear decay `base · (1 − epoch / total)`; `epoch == total` gives the
/// end-of-training value 0.
pub fn lr_value(base_lr: f64, epoch: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Config("total_epochs must be positive".into()));
    }
    if epoch > total_epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 0..={total_epochs}")));
    }
    if !(base_lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {base_lr}")));
    }
    Ok(base_lr * (1.0 - epoch as f64 / total_epochs as f64))
}

/// How target-domain rows enter the classification loss.
///
/// Only [`ClassMask::Exact`] is correct; the other variants exist so that the
/// leakage checks can be shown to catch a broken mask.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ClassMask {
    #[default]
    Exact,
    /// Target rows weighted by the given factor instead of zero.
    Soft(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub class_loss: f64,
    pub domain_loss: f64,
    pub n_source: usize,
    pub n_target: usize,
    /// Source rows whose true-class probability hit the log floor.
    pub clamped_logs: usize,
}

/// Labels and domain tags of one minibatch.
#[derive(Debug, Clone, Copy)]
pub struct BatchLabels<'a> {
    pub labels: &'a [usize],
    /// 0 = source, 1 = target.
    pub domains: &'a [u8],
    /// Extra per-row weights multiplying the domain mask (all ones if absent).
    pub weights: Option<&'a [f64]>,
}

impl<'a> BatchLabels<'a> {
    pub fn new(labels: &'a [usize], domains: &'a [u8]) -> Self {
        BatchLabels {
            labels,
            domains,
            weights: None,
        }
    }

    fn validate(&self, classes: usize) -> Result<()> {
        if self.labels.len() != self.domains.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} domain tags",
                self.labels.len(),
                self.domains.len()
            )));
        }
        if let Some(w) = self.weights {
            if w.len() != self.labels.len() {
                return Err(Error::Shape(format!("{} weights for {} rows", w.len(), self.labels.len())));
            }
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Config("instance weights must be finite and non-negative".into()));
            }
        }
        for (row, (&label, &d)) in self.labels.iter().zip(self.domains).enumerate() {
            if d > 1 {
                return Err(Error::InvalidDomainLabel { row, value: d });
            }
            if label >= classes {
                return Err(Error::LabelOutOfRange { row, label, classes });
            }
        }
        Ok(())
    }

    pub fn n_source(&self) -> usize {
        self.domains.iter().filter(|&&d| d == 0).count()
    }
}

/// Instance-weighted cross-entropy over source rows only:
/// `−(1/N_s) Σ_i (1−d_i) w_i log p[i, y_i]`, exactly 0 when there are no
/// source rows. Target rows enter with a coefficient of exactly zero, so
/// neither their labels nor their predictions reach any gradient.
pub fn masked_cross_entropy<T: Float>(
    g: &mut Graph<T>,
    class_probs: Var,
    batch: &BatchLabels<'_>,
) -> Result<(Var, usize)> {
    masked_cross_entropy_with(g, class_probs, batch, ClassMask::Exact)
}

pub fn masked_cross_entropy_with<T: Float>(
    g: &mut Graph<T>,
    class_probs: Var,
    batch: &BatchLabels<'_>,
    mask: ClassMask,
) -> Result<(Var, usize)> {
    let shape = g.shape(class_probs).to_vec();
    if shape.len() != 2 || shape[0] != batch.labels.len() {
        return Err(Error::Shape(format!(
            "class probabilities {shape:?} for a batch of {}",
            batch.labels.len()
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    batch.validate(c)?;
    let row_weight = |i: usize| -> f64 {
        let m = match (batch.domains[i], mask) {
            (0, _) => 1.0,
            (_, ClassMask::Exact) => 0.0,
            (_, ClassMask::Soft(w)) => w,
        };
        m * batch.weights.map_or(1.0, |w| w[i])
    };
    let normalizer = match mask {
        ClassMask::Exact => batch.n_source() as f64,
        ClassMask::Soft(_) => (0..n).map(|i| if batch.domains[i] == 0 { 1.0 } else { row_weight(i) }).sum(),
    };
    if normalizer == 0.0 {
        return Ok((g.constant(Tensor::scalar(T::zero()))?, 0));
    }
    let probs = g.value(class_probs).data();
    let mut clamped = 0;
    let mut coef = vec![T::zero(); n * c];
    for i in 0..n {
        let w = row_weight(i);
        if w != 0.0 {
            coef[i * c + batch.labels[i]] = T::from_f64(w / normalizer);
            if probs[i * c + batch.labels[i]].as_f64() < LOG_CLAMP {
                clamped += 1;
            }
        }
    }
    let coef = g.constant(Tensor::new(vec![n, c], coef)?)?;
    let safe = g.clamp_min(class_probs, LOG_CLAMP)?;
    let logp = g.log(safe)?;
    let picked = g.mul(logp, coef)?;
    let s = g.sum(picked)?;
    Ok((g.scale(s, -1.0)?, clamped))
}

/// Mean binary cross-entropy of domain logits (N, 1) against domain tags,
/// in the stable form `max(z,0) − z·d + log(1 + e^(−|z|))`.
pub fn domain_bce<T: Float>(g: &mut Graph<T>, domain_logits: Var, domains: &[u8]) -> Result<Var> {
    let shape = g.shape(domain_logits).to_vec();
    if shape != [domains.len(), 1] {
        return Err(Error::Shape(format!(
            "domain logits {shape:?} for {} domain tags",
            domains.len()
        )));
    }
    if domains.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if let Some((row, &value)) = domains.iter().enumerate().find(|(_, &d)| d > 1) {
        return Err(Error::InvalidDomainLabel { row, value });
    }
    let targets = Tensor::new(shape, domains.iter().map(|&d| T::from_f64(d as f64)).collect())?;
    let targets = g.constant(targets)?;
    let per_row = g.bce_with_logits(domain_logits, targets)?;
    Ok(g.mean(per_row)?)
}

/// `L = L_class + L_domain`. λ is not a coefficient here: it only acts
/// inside the gradient reversal on the way back.
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    class_probs: Var,
    domain_logits: Var,
    batch: &BatchLabels<'_>,
) -> Result<(Var, LossBreakdown)> {
    total_loss_with(g, class_probs, domain_logits, batch, ClassMask::Exact)
}

pub fn total_loss_with<T: Float>(
    g: &mut Graph<T>,
    class_probs: Var,
    domain_logits: Var,
    batch: &BatchLabels<'_>,
    mask: ClassMask,
) -> Result<(Var, LossBreakdown)> {
    let (class, clamped) = masked_cross_entropy_with(g, class_probs, batch, mask)?;
    let domain = domain_bce(g, domain_logits, batch.domains)?;
    let total = g.add(class, domain)?;
    let n_source = batch.n_source();
    let breakdown = LossBreakdown {
        total: g.value(total).item().as_f64(),
        class_loss: g.value(class).item().as_f64(),
        domain_loss: g.value(domain).item().as_f64(),
        n_source,
        n_target: batch.domains.len() - n_source,
        clamped_logs: clamped,
    };
    Ok((total, breakdown))
}

/// Loss values for plain tensors, with no gradient bookkeeping.
pub fn loss_values<T: Float>(class_probs: &Tensor<T>, domain_logits: &Tensor<T>, batch: &BatchLabels<'_>) -> Result<LossBreakdown> {
    let mut g = Graph::<T>::new(Mode::Eval);
    let p = g.constant(class_probs.clone())?;
    let z = g.constant(domain_logits.clone())?;
    Ok(total_loss(&mut g, p, z, batch)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    fn class_value(p: &Tensor<f64>, labels: &[usize], domains: &[u8]) -> f64 {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let pv = g.constant(p.clone()).unwrap();
        let (l, _) = masked_cross_entropy(&mut g, pv, &BatchLabels::new(labels, domains)).unwrap();
        g.value(l).item()
    }

    fn bce_value(z: &[f64], d: &[u8]) -> f64 {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let zv = g.constant(Tensor::new(vec![z.len(), 1], z.to_vec()).unwrap()).unwrap();
        let l = domain_bce(&mut g, zv, d).unwrap();
        g.value(l).item()
    }

    #[test]
    fn uniform_prediction_costs_ln2() {
        let v = class_value(&probs(&[[0.5, 0.5]]), &[1], &[0]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn pure_target_batch_has_zero_class_loss() {
        let v = class_value(&probs(&[[0.9, 0.1], [0.3, 0.7]]), &[1, 0], &[1, 1]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn only_source_rows_count() {
        let v = class_value(&probs(&[[0.9, 0.1], [0.2, 0.8]]), &[0, 1], &[0, 1]);
        assert!((v - (-(0.9f64).ln())).abs() < 1e-12);
        assert!((v - 0.1054).abs() < 1e-4);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let pv = g.constant(probs(&[[0.5, 0.5]])).unwrap();
        let err = masked_cross_entropy(&mut g, pv, &BatchLabels::new(&[2], &[0])).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2, .. }));
    }

    #[test]
    fn zero_probability_is_clamped_and_counted() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let pv = g.constant(probs(&[[1.0, 0.0], [0.5, 0.5]])).unwrap();
        let (l, clamped) = masked_cross_entropy(&mut g, pv, &BatchLabels::new(&[1, 0], &[0, 0])).unwrap();
        assert_eq!(clamped, 1);
        let want = (-(1e-12f64).ln() + std::f64::consts::LN_2) / 2.0;
        assert!((g.value(l).item() - want).abs() < 1e-9);
    }

    #[test]
    fn instance_weights_multiply_the_mask() {
        let p = probs(&[[0.5, 0.5], [0.25, 0.75]]);
        let mut g = Graph::<f64>::new(Mode::Eval);
        let pv = g.constant(p).unwrap();
        let batch = BatchLabels {
            labels: &[0, 1],
            domains: &[0, 0],
            weights: Some(&[2.0, 0.0]),
        };
        let (l, _) = masked_cross_entropy(&mut g, pv, &batch).unwrap();
        // normalized by N_s = 2, not by the weight sum
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn domain_bce_examples() {
        assert!((bce_value(&[0.0], &[1]) - std::f64::consts::LN_2).abs() < 1e-12);
        let sat = bce_value(&[50.0], &[1]);
        assert!(sat.is_finite() && sat < 1e-20);
        let sigma1 = 1.0 / (1.0 + (-1.0f64).exp());
        let want = (-(sigma1.ln()) - (1.0 - (1.0 - sigma1)).ln()) / 2.0;
        let got = bce_value(&[1.0, -1.0], &[1, 0]);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn stable_bce_matches_naive_form() {
        for i in 0..=200 {
            let z = -10.0 + i as f64 * 0.1;
            for d in [0u8, 1] {
                let s = 1.0 / (1.0 + (-z).exp());
                let naive = -(d as f64 * s.ln() + (1.0 - d as f64) * (1.0 - s).ln());
                assert!((bce_value(&[z], &[d]) - naive).abs() < 1e-6, "z={z} d={d}");
            }
        }
    }

    #[test]
    fn pure_target_total_equals_domain_loss() {
        let p = probs(&[[0.7, 0.3], [0.1, 0.9]]);
        let z = Tensor::new(vec![2, 1], vec![0.3, -1.2]).unwrap();
        let b = loss_values(&p, &z, &BatchLabels::new(&[0, 1], &[1, 1])).unwrap();
        assert_eq!(b.class_loss, 0.0);
        assert_eq!(b.total, b.domain_loss);
        assert_eq!((b.n_source, b.n_target), (0, 2));
    }

    #[test]
    fn zero_information_model_costs_two_ln2() {
        let p = probs(&[[0.5, 0.5]; 4]);
        let z = Tensor::zeros(&[4, 1]);
        let b = loss_values(&p, &z, &BatchLabels::new(&[0, 1, 0, 1], &[0, 0, 1, 1])).unwrap();
        assert!((b.total - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn lambda_closed_forms() {
        use LambdaSchedule::*;
        assert_eq!(lambda_value(ParabolicUp, 0.0).unwrap(), 0.0);
        assert_eq!(lambda_value(ParabolicUp, 1.0).unwrap(), 1.0);
        assert_eq!(lambda_value(ParabolicUp, 0.5).unwrap(), 0.25);
        let want = 2.0 / (1.0 + (-5.0f64).exp()) - 1.0;
        assert!((lambda_value(Logistic, 0.5).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.98661).abs() < 1e-5);
        assert!(lambda_value(LinearUp, 1.5).is_err());
        assert!(lambda_value(LinearUp, -0.1).is_err());
    }

    #[test]
    fn parabolic_up_is_nondecreasing() {
        let mut prev = -1.0;
        for i in 0..=1000 {
            let v = lambda_value(LambdaSchedule::ParabolicUp, i as f64 / 1000.0).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn every_schedule_stays_in_unit_range() {
        for kind in LambdaSchedule::ALL {
            for i in 0..=100 {
                let v = lambda_value(kind, i as f64 / 100.0).unwrap();
                assert!((-1.0..=1.0).contains(&v), "{kind:?}");
            }
        }
    }

    #[test]
    fn schedule_names_round_trip() {
        for kind in LambdaSchedule::ALL {
            assert_eq!(kind.name().parse::<LambdaSchedule>().unwrap(), kind);
        }
        assert!("lamda".parse::<LambdaSchedule>().is_err());
    }

    #[test]
    fn linear_learning_rate_decay() {
        assert_eq!(lr_value(0.1, 0, 50).unwrap(), 0.1);
        assert!((lr_value(0.1, 25, 50).unwrap() - 0.05).abs() < 1e-15);
        assert!((lr_value(0.1, 49, 50).unwrap() - 0.002).abs() < 1e-15);
        assert!(lr_value(0.1, 0, 0).is_err());
        assert_eq!(lr_value(0.1, 50, 50).unwrap(), 0.0);
        assert!(lr_value(0.1, 51, 50).is_err());
    }
}
