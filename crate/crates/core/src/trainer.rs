//! SGD training of the dual-branch model with target-label masking.

use std::path::PathBuf;

use grla_tensor::{clip_grad_norm, Float, Graph, Mode, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, MetricsReport};
use crate::model::{DannConfig, DannModel};
use crate::objectives::{lambda_value, lr_value, total_loss_with, BatchLabels, ClassMask, LambdaSchedule};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
}

/// Deliberately broken masking, used to show the leakage checks can fail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Leak {
    /// Target rows enter the classification loss with this weight instead of 0.
    SoftMask(f64),
    /// Target rows enter the classification loss like source rows.
    UnmaskedTargets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub max_grad_norm: f64,
    pub lambda_kind: LambdaSchedule,
    pub seed: u64,
    /// Validation runs every this many epochs and always after the last one.
    pub eval_every: usize,
    #[serde(skip)]
    pub leak: Option<Leak>,
    /// Permit a run with no source rows (the target-only verification).
    #[serde(skip)]
    pub allow_target_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Sgd,
            lr: 0.1,
            weight_decay: 1e-4,
            batch_size: 32,
            eval_batch_size: 128,
            epochs: 50,
            max_grad_norm: 1.0,
            lambda_kind: LambdaSchedule::ParabolicUp,
            seed: 0,
            eval_every: 1,
            leak: None,
            allow_target_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("{key}: {why}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size < 2 {
            return bad("batch_size", format!("must be at least 2, got {}", self.batch_size));
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size", "must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm", format!("must be positive, got {}", self.max_grad_norm));
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1".into());
        }
        Ok(())
    }

    fn class_mask(&self) -> ClassMask {
        match self.leak {
            None => ClassMask::Exact,
            Some(Leak::SoftMask(w)) => ClassMask::Soft(w),
            Some(Leak::UnmaskedTargets) => ClassMask::Soft(1.0),
        }
    }
}

/// `w ← w − lr·(g + weight_decay·w)`, no momentum.
pub fn sgd_step<T: Float>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64, weight_decay: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Shape(format!(
            "parameter {:?} vs gradient {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    let (lr, wd) = (T::from_f64(lr), T::from_f64(weight_decay));
    for (w, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *w -= lr * (g + wd * *w);
    }
    Ok(())
}

/// Identifies a dataset in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStamp {
    pub domain: String,
    pub n: usize,
    /// Source: hash of images and labels. Target: hash of images only,
    /// since target labels are not an input to training.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub version: u32,
    pub seed: u64,
    pub train: TrainConfig,
    pub model: DannConfig,
    pub source: DatasetStamp,
    pub target: DatasetStamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub domain: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    pub steps: usize,
    pub class_loss: f64,
    pub domain_loss: f64,
    pub total_loss: f64,
    pub clamped_logs: usize,
    /// Mean pre-clipping global gradient norm.
    pub grad_norm: f64,
    pub val: Vec<ValRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ManifestLine {
    Run(RunHeader),
    Epoch(EpochRecord),
}

/// Header plus one record per completed epoch, stored as JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub header: RunHeader,
    pub epochs: Vec<EpochRecord>,
}

impl RunManifest {
    pub const VERSION: u32 = 1;

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ManifestLine::Run(self.header.clone())).expect("manifest header");
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&ManifestLine::Epoch(e.clone())).expect("epoch record"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let parse = |l: &str| serde_json::from_str::<ManifestLine>(l).map_err(|e| Error::Manifest(e.to_string()));
        let header = match lines.next().map(parse).transpose()? {
            Some(ManifestLine::Run(h)) => h,
            _ => return Err(Error::Manifest("first record must be the run header".into())),
        };
        if header.version != Self::VERSION {
            return Err(Error::Manifest(format!("unsupported manifest version {}", header.version)));
        }
        let mut epochs = Vec::new();
        for line in lines {
            match parse(line)? {
                ManifestLine::Epoch(e) => epochs.push(e),
                ManifestLine::Run(_) => return Err(Error::Manifest("duplicate run header".into())),
            }
        }
        Ok(RunManifest { header, epochs })
    }

    /// Whether every recorded λ equals the closed-form schedule value.
    pub fn lambda_trace_matches(&self) -> bool {
        let total = self.header.train.epochs as f64;
        self.epochs.iter().all(|e| {
            lambda_value(self.header.train.lambda_kind, e.epoch as f64 / total).is_ok_and(|l| l == e.lambda)
        })
    }
}

/// Optional extras for [`train_with`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Held-out sets scored after evaluation epochs, tagged by name.
    pub validation: Vec<(String, &'a LabeledImageSet)>,
    /// Validation tag whose accuracy picks the best model (default: the first).
    pub select_on: Option<String>,
    /// Receives `last_good.grla` after every epoch and `best.grla` on improvement.
    pub checkpoint_dir: Option<PathBuf>,
    pub on_epoch: Option<&'a dyn Fn(&EpochRecord)>,
}

pub struct TrainOutcome<T: Float> {
    pub model: DannModel<T>,
    pub manifest: RunManifest,
    /// Epoch and parameters with the best selection accuracy, if validation ran.
    pub best: Option<(usize, DannModel<T>)>,
}

/// Trains with default options; see [`train_with`].
pub fn train<T: Float>(
    model: DannModel<T>,
    source: Option<&LabeledImageSet>,
    target: Option<&LabeledImageSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(model, source, target, cfg, &TrainOptions::default())
}

fn stamp(set: Option<&LabeledImageSet>, with_labels: bool) -> DatasetStamp {
    match set {
        Some(s) => DatasetStamp {
            domain: s.domain_id.clone(),
            n: s.len(),
            hash: if with_labels { s.content_hash() } else { s.image_hash() },
        },
        None => DatasetStamp {
            domain: String::new(),
            n: 0,
            hash: String::new(),
        },
    }
}

/// Index stream over `n` rows that reshuffles each time it wraps.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cycler { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Per epoch: λ from the schedule at p = epoch/epochs, linear LR decay,
/// then minibatches of half source and half target rows. Each step runs
/// forward with λ, the masked loss, backward, clipping, and SGD.
pub fn train_with<T: Float>(
    mut model: DannModel<T>,
    source: Option<&LabeledImageSet>,
    target: Option<&LabeledImageSet>,
    cfg: &TrainConfig,
    opts: &TrainOptions<'_>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let source = source.filter(|s| !s.is_empty());
    let target = target.filter(|t| !t.is_empty());
    if source.is_none() && !(cfg.allow_target_only && target.is_some()) {
        return Err(Error::EmptyDataset("source domain has no rows".into()));
    }
    for set in source.iter().chain(target.iter()) {
        model.check_input(&[1, set.image_shape()[0], set.image_shape()[1], set.image_shape()[2]])?;
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }

    let (ns, nt) = (source.map_or(0, |s| s.len()), target.map_or(0, |t| t.len()));
    let per_domain = if ns > 0 && nt > 0 { cfg.batch_size / 2 } else { cfg.batch_size };
    let source_leads = ns >= nt;
    let lead_n = ns.max(nt);
    let steps = lead_n.div_ceil(per_domain);

    let mut manifest = RunManifest {
        header: RunHeader {
            version: RunManifest::VERSION,
            seed: cfg.seed,
            train: cfg.clone(),
            model: model.config().clone(),
            source: stamp(source, true),
            target: stamp(target, false),
        },
        epochs: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut follower = Cycler::new(if source_leads { nt } else { ns }, &mut rng);
    let mut best: Option<(usize, f64, DannModel<T>)> = None;
    let mut last_good: Option<PathBuf> = None;
    let mask = cfg.class_mask();

    for epoch in 0..cfg.epochs {
        let lambda = lambda_value(cfg.lambda_kind, epoch as f64 / cfg.epochs as f64)?;
        let lr = lr_value(cfg.lr, epoch, cfg.epochs)?;
        let mut lead: Vec<usize> = (0..lead_n).collect();
        lead.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut clamped = 0usize;

        for step in 0..steps {
            let lo = step * per_domain;
            let lead_rows = &lead[lo..(lo + per_domain).min(lead_n)];
            let follow_rows = if ns > 0 && nt > 0 {
                follower.take(lead_rows.len(), &mut rng)
            } else {
                Vec::new()
            };
            let (src_rows, tgt_rows): (&[usize], &[usize]) = match (source_leads, ns > 0) {
                (true, _) => (lead_rows, &follow_rows),
                (false, true) => (&follow_rows, lead_rows),
                (false, false) => (&[], lead_rows),
            };
            let n = src_rows.len() + tgt_rows.len();
            let mut data = Vec::with_capacity(n * model.config().input_shape.iter().product::<usize>());
            let mut labels = Vec::with_capacity(n);
            let mut domains = Vec::with_capacity(n);
            for (set, rows, d) in [(source, src_rows, 0u8), (target, tgt_rows, 1u8)] {
                if let Some(set) = set.filter(|_| !rows.is_empty()) {
                    data.extend(set.batch::<T>(rows).into_data());
                    labels.extend(rows.iter().map(|&i| set.labels()[i] as usize));
                    domains.extend(std::iter::repeat_n(d, rows.len()));
                }
            }
            let [ch, h, w] = model.config().input_shape;
            let x = Tensor::new(vec![n, ch, h, w], data)?;

            let diverged = |loss: f64| Error::Diverged {
                epoch,
                step,
                loss,
                last_good: last_good.clone(),
            };
            let mut g = Graph::<T>::with_seed(Mode::Train, rng.random());
            let xv = g.constant(x)?;
            let run = (|| -> Result<_> {
                let out = model.forward(&mut g, xv, lambda)?;
                let batch = BatchLabels::new(&labels, &domains);
                let (loss, br) = total_loss_with(&mut g, out.class_probs, out.domain_logits, &batch, mask)?;
                Ok((out, loss, br))
            })();
            let (out, loss, br) = match run {
                Err(Error::Tensor(TensorError::NonFinite { .. })) => return Err(diverged(f64::NAN)),
                other => other?,
            };
            if !br.total.is_finite() || br.total > DIVERGENCE_LIMIT {
                return Err(diverged(br.total));
            }
            let mut grads_map = match g.backward(loss) {
                Err(TensorError::NonFiniteGradient { .. }) => return Err(diverged(br.total)),
                other => other?,
            };
            let mut grads: Vec<Tensor<T>> = out
                .bound
                .vars
                .iter()
                .map(|&v| grads_map.take(v).expect("every parameter is a gradient leaf"))
                .collect();
            let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm)?;
            for (p, gr) in model.params_mut().iter_mut().zip(&grads) {
                sgd_step(&mut p.value, gr, lr, cfg.weight_decay)?;
            }
            sums[0] += br.class_loss;
            sums[1] += br.domain_loss;
            sums[2] += br.total;
            sums[3] += norm;
            clamped += br.clamped_logs;
        }
        if !model.all_finite() {
            return Err(Error::Diverged {
                epoch,
                step: steps,
                loss: f64::NAN,
                last_good,
            });
        }

        let mut record = EpochRecord {
            epoch,
            lambda,
            lr,
            steps,
            class_loss: sums[0] / steps as f64,
            domain_loss: sums[1] / steps as f64,
            total_loss: sums[2] / steps as f64,
            clamped_logs: clamped,
            grad_norm: sums[3] / steps as f64,
            val: Vec::new(),
        };
        let last = epoch + 1 == cfg.epochs;
        if !opts.validation.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let select = opts.select_on.clone().unwrap_or_else(|| opts.validation[0].0.clone());
            for (tag, set) in &opts.validation {
                let m = evaluate(&model, set, tag, cfg.eval_batch_size)?;
                if *tag == select && best.as_ref().is_none_or(|b| m.accuracy > b.1) {
                    best = Some((epoch, m.accuracy, model.clone()));
                    if let Some(dir) = &opts.checkpoint_dir {
                        save_checkpoint(&dir.join("best.grla"), &Checkpoint::new(model.clone(), Some(manifest.clone())))?;
                    }
                }
                record.val.push(ValRecord {
                    domain: tag.clone(),
                    accuracy: m.accuracy,
                    precision: m.precision,
                    recall: m.recall,
                    f1: m.f1,
                });
            }
        }
        if let Some(cb) = opts.on_epoch {
            cb(&record);
        }
        manifest.epochs.push(record);
        if let Some(dir) = &opts.checkpoint_dir {
            let path = dir.join("last_good.grla");
            save_checkpoint(&path, &Checkpoint::new(model.clone(), Some(manifest.clone())))?;
            last_good = Some(path);
        }
    }
    Ok(TrainOutcome {
        model,
        manifest,
        best: best.map(|(e, _, m)| (e, m)),
    })
}

/// Class probabilities for every row of `set`, computed in chunks.
pub fn predict_set<T: Float>(model: &DannModel<T>, set: &LabeledImageSet, chunk: usize) -> Result<Tensor<T>> {
    if set.is_empty() {
        return Err(Error::EmptyDataset(set.domain_id.clone()));
    }
    let c = model.config().num_classes;
    let mut data = Vec::with_capacity(set.len() * c);
    let rows: Vec<usize> = (0..set.len()).collect();
    for part in rows.chunks(chunk.max(1)) {
        data.extend(model.predict_proba(&set.batch::<T>(part))?.into_data());
    }
    Ok(Tensor::new(vec![set.len(), c], data)?)
}

/// Eval-mode metrics of `model` on a labeled set.
pub fn evaluate<T: Float>(model: &DannModel<T>, set: &LabeledImageSet, tag: &str, chunk: usize) -> Result<MetricsReport> {
    let probs = predict_set(model, set, chunk)?;
    let pred = crate::model::argmax_rows(&probs);
    let truth: Vec<usize> = set.labels().iter().map(|&l| l as usize).collect();
    Ok(compute_metrics(&pred, &truth, model.config().num_classes)?.with_tag(tag))
}
