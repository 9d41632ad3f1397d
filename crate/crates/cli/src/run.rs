//! Running a configured experiment end to end.

use std::path::Path;

use grla_core::checkpoint::{save_checkpoint, Checkpoint};
use grla_core::data::{channel_mean_baseline, mean_image_baseline, LabeledImageSet};
use grla_core::evaluation::{compute_metrics, ensemble_predict_set, MetricsReport};
use grla_core::model::{argmax_rows, DannModel};
use grla_core::trainer::{evaluate, train_with, EpochRecord, TrainConfig, TrainOptions, TrainOutcome};

use crate::config::{ExperimentConfig, Protocol};
use crate::error::CliResult;
use crate::io::{metrics_csv, write_text, MetricsRow};
use crate::world::{build_world, Part, World};

/// Aux tensor names for the two attribution baselines.
pub const BASELINE_PIXEL: &str = "baseline_pixel";
pub const BASELINE_CHANNEL: &str = "baseline_channel";

pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    /// The scored model (or ensemble) on the target test split.
    pub target_test: Option<MetricsReport>,
    /// Ensemble members on the target test split.
    pub members: Vec<(String, MetricsReport)>,
}

fn log_epoch(label: &str, total: usize) -> impl Fn(&EpochRecord) + '_ {
    move |e: &EpochRecord| {
        let val: Vec<String> = e.val.iter().map(|v| format!("{} {:.4}", v.domain, v.accuracy)).collect();
        eprintln!(
            "[{label}] epoch {}/{total} lambda {:.4} lr {:.5} class {:.4} domain {:.4}{}",
            e.epoch + 1,
            e.lambda,
            e.lr,
            e.class_loss,
            e.domain_loss,
            if val.is_empty() { String::new() } else { format!(" | {}", val.join(", ")) }
        );
    }
}

fn fit(
    cfg: &ExperimentConfig,
    train_cfg: &TrainConfig,
    source: &LabeledImageSet,
    target: Option<&LabeledImageSet>,
    validation: Vec<(String, &LabeledImageSet)>,
    out: &Path,
    label: &str,
) -> CliResult<TrainOutcome<f32>> {
    let model = DannModel::<f32>::build(cfg.model.clone())?;
    let log = log_epoch(label, train_cfg.epochs);
    let opts = TrainOptions {
        validation,
        select_on: None,
        checkpoint_dir: Some(out.join("checkpoints")),
        on_epoch: Some(&log),
    };
    let outcome = train_with(model, Some(source), target, train_cfg, &opts)?;
    let mut ckpt = Checkpoint::new(outcome.model.clone(), Some(outcome.manifest.clone()));
    let mut pool = vec![source];
    pool.extend(target);
    ckpt.aux.insert(BASELINE_PIXEL.into(), mean_image_baseline(&pool)?);
    ckpt.aux.insert(BASELINE_CHANNEL.into(), channel_mean_baseline(&pool)?);
    save_checkpoint(&out.join("model.grla"), &ckpt)?;
    write_text(&out.join("manifest.jsonl"), &outcome.manifest.to_jsonl())?;
    Ok(outcome)
}

fn score_all(model: &DannModel<f32>, world: &World, chunk: usize) -> CliResult<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (name, sp) in &world.domains {
        for part in [Part::Val, Part::Test] {
            rows.push(MetricsRow {
                split: part.name().into(),
                report: evaluate(model, sp.get(part), name, chunk)?,
            });
        }
    }
    Ok(rows)
}

/// Trains per `cfg` into `out` and writes the checkpoint, manifest, metrics
/// and resolved config. `train_cfg` overrides `cfg.train` (e.g. to inject a leak).
pub fn run_experiment(cfg: &ExperimentConfig, train_cfg: &TrainConfig, out: &Path) -> CliResult<RunSummary> {
    std::fs::create_dir_all(out).map_err(crate::error::io_err(out))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let world = build_world(cfg)?;
    if let Some(r) = &world.stain_reference {
        write_text(&out.join("stain_stats.toml"), &r.to_toml())?;
    }
    let chunk = train_cfg.eval_batch_size;
    let summary = match cfg.protocol {
        Protocol::Dann => {
            let source = world.combined(&cfg.source, Part::Train)?;
            let source_val = world.combined(&cfg.source, Part::Val)?;
            let target = cfg.target.as_ref().map(|t| &world.domains[t]);
            let mut validation = vec![("source_val".to_string(), &source_val)];
            if let Some(t) = target {
                validation.push(("target_val".to_string(), &t.val));
            }
            let outcome = fit(cfg, train_cfg, &source, target.map(|t| &t.train), validation, out, "dann")?;
            let rows = score_all(&outcome.model, &world, chunk)?;
            let target_test = cfg.target.as_ref().and_then(|t| {
                rows.iter()
                    .find(|r| r.split == "test" && &r.report.domain_tag == t)
                    .map(|r| r.report.clone())
            });
            RunSummary {
                rows,
                target_test,
                members: Vec::new(),
            }
        }
        Protocol::Ensemble => {
            let target = cfg.target.as_ref().expect("validated");
            let test = &world.domains[target].test;
            let mut models = Vec::new();
            let mut rows = Vec::new();
            let mut members = Vec::new();
            for s in &cfg.source {
                let sp = &world.domains[s];
                let dir = out.join("members").join(s);
                let outcome = fit(cfg, train_cfg, &sp.train, None, vec![(format!("{s}_val"), &sp.val)], &dir, s)?;
                let m = evaluate(&outcome.model, test, &format!("{target}@{s}"), chunk)?;
                rows.push(MetricsRow {
                    split: "test".into(),
                    report: m.clone(),
                });
                members.push((s.clone(), m));
                models.push(outcome.model);
            }
            let refs: Vec<&DannModel<f32>> = models.iter().collect();
            let probs = ensemble_predict_set(&refs, test, chunk)?;
            let truth: Vec<usize> = test.labels().iter().map(|&l| l as usize).collect();
            let report = compute_metrics(&argmax_rows(&probs), &truth, cfg.model.num_classes)?.with_tag(format!("{target}@ensemble"));
            rows.push(MetricsRow {
                split: "test".into(),
                report: report.clone(),
            });
            RunSummary {
                rows,
                target_test: Some(report),
                members,
            }
        }
    };
    write_text(&out.join("metrics.csv"), &metrics_csv(&summary.rows))?;
    Ok(summary)
}
