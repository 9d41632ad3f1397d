use grla_tensor::Float;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{hex, LabeledImageSet};
use crate::error::Result;
use crate::model::{DannConfig, DannModel};
use crate::trainer::{evaluate, train, TrainConfig};

/// Accuracy window for the target-only run on a balanced test set.
pub const CHANCE_WINDOW: (f64, f64) = (0.45, 0.55);

/// Training with true versus zeroed target labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentA {
    pub passed: bool,
    pub checkpoint_true_labels: String,
    pub checkpoint_zeroed_labels: String,
    pub checkpoint_bytes: usize,
}

/// Training on target rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentB {
    pub passed: bool,
    pub target_accuracy: f64,
    pub class_loss_per_epoch: Vec<f64>,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub passed: bool,
    pub experiment_a: ExperimentA,
    pub experiment_b: ExperimentB,
}

fn sha256(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Runs both checks. A: the trained checkpoint must be byte-identical
/// whether target labels are true or all zero. B: with no source rows the
/// class loss must be exactly 0 in every epoch and target accuracy must
/// stay within [`CHANCE_WINDOW`].
pub fn verify_no_leakage<T: Float>(
    model_cfg: &DannConfig,
    cfg: &TrainConfig,
    source: &LabeledImageSet,
    target: &LabeledImageSet,
    target_test: &LabeledImageSet,
) -> Result<VerificationReport> {
    let zeroed = target.with_labels(vec![0; target.len()])?;
    let mut bytes = Vec::new();
    for t in [target, &zeroed] {
        let out = train(DannModel::<T>::build(model_cfg.clone())?, Some(source), Some(t), cfg)?;
        bytes.push(Checkpoint::new(out.model, Some(out.manifest)).to_bytes()?);
    }
    let experiment_a = ExperimentA {
        passed: bytes[0] == bytes[1],
        checkpoint_true_labels: sha256(&bytes[0]),
        checkpoint_zeroed_labels: sha256(&bytes[1]),
        checkpoint_bytes: bytes[0].len(),
    };

    let target_only = TrainConfig {
        allow_target_only: true,
        ..cfg.clone()
    };
    let out = train(DannModel::<T>::build(model_cfg.clone())?, None, Some(target), &target_only)?;
    let m = evaluate(&out.model, target_test, &target_test.domain_id, cfg.eval_batch_size)?;
    let losses: Vec<f64> = out.manifest.epochs.iter().map(|e| e.class_loss).collect();
    let experiment_b = ExperimentB {
        passed: losses.iter().all(|&l| l == 0.0) && (CHANCE_WINDOW.0..=CHANCE_WINDOW.1).contains(&m.accuracy),
        target_accuracy: m.accuracy,
        class_loss_per_epoch: losses,
        epochs: cfg.epochs,
    };
    Ok(VerificationReport {
        passed: experiment_a.passed && experiment_b.passed,
        experiment_a,
        experiment_b,
    })
}
