//! One function per subcommand; each returns the process exit code.

use std::path::{Path, PathBuf};

use grla_core::attribution::{integrated_gradients, render_attribution, write_raw, IgOptions, RenderMode};
use grla_core::checkpoint::{load_checkpoint, Checkpoint};
use grla_core::data::{synth_domain, DomainRecipe, LabeledImageSet, ShiftSpec};
use grla_core::evaluation::{compute_metrics, cross_domain_eval, ensemble_predict_set, verify_no_leakage};
use grla_core::model::{argmax_rows, DannModel};
use grla_core::stain::{compute_stain_stats, normalize_image, StainStats};
use grla_core::trainer::{evaluate, Leak, TrainConfig};
use grla_core::Error;
use grla_tensor::Tensor;

use crate::config::ExperimentConfig;
use crate::error::{exit, io_err, CliError, CliResult};
use crate::io::{image_files, metrics_csv, read_rgb, save_image, to_rgb8, write_text, MetricsRow};
use crate::run::{run_experiment, BASELINE_CHANNEL, BASELINE_PIXEL};
use crate::world::{build_world, load_eval_dir, Part};

/// Where evaluation data comes from: dataset directories, or every domain
/// of a config at one split.
pub enum DataSource {
    Dirs { dirs: Vec<PathBuf>, preset: Option<String>, lenient: bool },
    Config { path: PathBuf, part: Part, seed_override: Option<u64> },
}

impl DataSource {
    /// Named datasets at the model's image size.
    pub fn load(&self, size: (usize, usize)) -> CliResult<Vec<(String, LabeledImageSet)>> {
        match self {
            DataSource::Dirs { dirs, preset, lenient } => dirs
                .iter()
                .map(|d| {
                    let set = load_eval_dir(d, preset.as_deref(), size, *lenient)?;
                    Ok((set.domain_id.clone(), set))
                })
                .collect(),
            DataSource::Config { path, part, seed_override } => {
                let cfg = ExperimentConfig::load(path, *seed_override)?;
                let [_, h, w] = cfg.model.input_shape;
                if (h, w) != size {
                    return Err(Error::Shape(format!("config images are {h}×{w}, the model expects {}×{}", size.0, size.1)).into());
                }
                let world = build_world(&cfg)?;
                Ok(world
                    .domains
                    .into_iter()
                    .map(|(name, sp)| (name, sp.get(*part).clone()))
                    .collect())
            }
        }
    }

    fn split_name(&self) -> &'static str {
        match self {
            DataSource::Dirs { .. } => "all",
            DataSource::Config { part, .. } => part.name(),
        }
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: Option<&ExperimentConfig>) -> CliResult<PathBuf> {
    flag.or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .ok_or_else(|| CliError::Config("out_dir: pass --out or set out_dir in the config".into()))
}

fn load_model(path: &Path) -> CliResult<Checkpoint<f32>> {
    if !path.is_file() {
        return Err(CliError::artifact(path, "checkpoint not found"));
    }
    Ok(load_checkpoint::<f32>(path)?)
}

fn image_size(model: &DannModel<f32>) -> (usize, usize) {
    let [_, h, w] = model.config().input_shape;
    (h, w)
}

fn print_rows(rows: &[MetricsRow]) {
    for r in rows {
        let m = &r.report;
        println!(
            "{:<5} {:<24} n={:<5} accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}",
            r.split, m.domain_tag, m.n, m.accuracy, m.precision, m.recall, m.f1
        );
    }
}

pub fn train(config: &Path, seed_override: Option<u64>, out: Option<PathBuf>, lenient: bool) -> CliResult<u8> {
    let mut cfg = ExperimentConfig::load(config, seed_override)?;
    cfg.data.lenient |= lenient;
    let out = out_dir(out, Some(&cfg))?;
    let summary = run_experiment(&cfg, &cfg.train, &out)?;
    print_rows(&summary.rows);
    println!("wrote {}", out.display());
    Ok(exit::OK)
}

pub fn eval(checkpoint: &Path, data: &DataSource, out: &Path) -> CliResult<u8> {
    let ckpt = load_model(checkpoint)?;
    let sets = data.load(image_size(&ckpt.model))?;
    let chunk = 128;
    let rows = sets
        .iter()
        .map(|(name, set)| {
            Ok(MetricsRow {
                split: data.split_name().into(),
                report: evaluate(&ckpt.model, set, name, chunk)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_text(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    print_rows(&rows);
    Ok(exit::OK)
}

pub fn ensemble(checkpoints: &[PathBuf], data: &DataSource, out: &Path) -> CliResult<u8> {
    let members = checkpoints.iter().map(|p| load_model(p)).collect::<CliResult<Vec<_>>>()?;
    let first = members.first().ok_or_else(|| CliError::Config("checkpoint: give at least one".into()))?;
    let sets = data.load(image_size(&first.model))?;
    let refs: Vec<&DannModel<f32>> = members.iter().map(|c| &c.model).collect();
    let mut rows = Vec::new();
    for (name, set) in &sets {
        let probs = ensemble_predict_set(&refs, set, 128)?;
        let truth: Vec<usize> = set.labels().iter().map(|&l| l as usize).collect();
        let report = compute_metrics(&argmax_rows(&probs), &truth, first.model.config().num_classes)?.with_tag(name.clone());
        rows.push(MetricsRow {
            split: data.split_name().into(),
            report,
        });
    }
    write_text(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    print_rows(&rows);
    Ok(exit::OK)
}

/// `NAME=PATH`, or a bare path named after its file stem (or its parent
/// directory when the stem is `model`).
pub fn named_path(arg: &str) -> (String, PathBuf) {
    if let Some((name, path)) = arg.split_once('=') {
        return (name.to_string(), PathBuf::from(path));
    }
    let path = PathBuf::from(arg);
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.parent().and_then(|p| p.file_name()) {
        Some(parent) if stem == "model" => parent.to_string_lossy().into_owned(),
        _ => stem,
    };
    (name, path)
}

pub fn crossdomain(models: &[String], data: &DataSource, out: &Path) -> CliResult<u8> {
    let loaded = models
        .iter()
        .map(|m| {
            let (name, path) = named_path(m);
            Ok((name, load_model(&path)?))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let first = &loaded.first().ok_or_else(|| CliError::Config("model: give at least one".into()))?.1;
    let sets = data.load(image_size(&first.model))?;
    let model_refs: Vec<(String, &DannModel<f32>)> = loaded.iter().map(|(n, c)| (n.clone(), &c.model)).collect();
    let set_refs: Vec<(String, &LabeledImageSet)> = sets.iter().map(|(n, s)| (n.clone(), s)).collect();
    let matrix = cross_domain_eval(&model_refs, &set_refs, 128)?;
    write_text(&out.join("crossdomain.csv"), &matrix.to_csv()?)?;
    save_image(&image::DynamicImage::ImageRgb8(matrix.heatmap(48)), &out.join("crossdomain.png"))?;
    for (name, row) in matrix.rows.iter().zip(matrix.accuracy_grid()) {
        let cells: Vec<String> = row.iter().map(|a| format!("{a:.4}")).collect();
        println!("{name:<24} {}", cells.join(" "));
    }
    Ok(exit::OK)
}

fn reference_stats(reference: &Path) -> CliResult<StainStats> {
    if reference.is_file() && reference.extension().is_some_and(|e| e == "toml") {
        let text = std::fs::read_to_string(reference).map_err(io_err(reference))?;
        return Ok(StainStats::from_toml(&text)?);
    }
    if !reference.exists() {
        return Err(CliError::artifact(reference, "reference not found"));
    }
    let images = if reference.is_dir() {
        image_files(reference)?
            .into_iter()
            .map(|rel| read_rgb(&reference.join(rel)).map(|t| t.0))
            .collect::<CliResult<Vec<_>>>()?
    } else {
        vec![read_rgb(reference)?.0]
    };
    let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
    Ok(compute_stain_stats(&refs, &reference.display().to_string())?)
}

pub fn stain_normalize(input: &Path, reference: &Path, out: &Path) -> CliResult<u8> {
    let reference = reference_stats(reference)?;
    let files = image_files(input)?;
    if files.is_empty() {
        return Err(CliError::artifact(input, "no image files"));
    }
    let images = files
        .iter()
        .map(|rel| read_rgb(&input.join(rel)))
        .collect::<CliResult<Vec<_>>>()?;
    let refs: Vec<&[f32]> = images.iter().map(|i| i.0.as_slice()).collect();
    let own = compute_stain_stats(&refs, &input.display().to_string())?;
    for (rel, (pixels, h, w)) in files.iter().zip(&images) {
        let normalized = normalize_image(pixels, &own, &reference)?;
        save_image(&image::DynamicImage::ImageRgb8(to_rgb8(&normalized, *h, *w)), &out.join(rel))?;
    }
    write_text(&out.join("reference_stats.toml"), &reference.to_toml())?;
    write_text(&out.join("input_stats.toml"), &own.to_toml())?;
    println!("normalized {} images into {}", files.len(), out.display());
    Ok(exit::OK)
}

/// `channel` or `pixel` select a baseline stored in the checkpoint; anything
/// else is read as an image file.
pub fn attribute(
    checkpoint: &Path,
    image_path: &Path,
    out_prefix: &Path,
    steps: usize,
    baseline: &str,
    class: Option<usize>,
) -> CliResult<u8> {
    let ckpt = load_model(checkpoint)?;
    let model = ckpt.model.cast::<f64>();
    let [c, h, w] = model.config().input_shape;
    let load = |path: &Path| -> CliResult<Tensor<f64>> {
        let (pixels, ih, iw) = read_rgb(path)?;
        if (ih, iw) != (h, w) {
            return Err(Error::Shape(format!("{} is {ih}×{iw}, the model expects {h}×{w}", path.display())).into());
        }
        Ok(Tensor::new(vec![c, h, w], pixels.iter().map(|&v| v as f64).collect()).map_err(Error::from)?)
    };
    let image = load(image_path)?;
    let base = match baseline {
        "pixel" | "channel" => {
            let key = if baseline == "pixel" { BASELINE_PIXEL } else { BASELINE_CHANNEL };
            let t = ckpt
                .aux
                .get(key)
                .ok_or_else(|| CliError::artifact(checkpoint, format!("no stored {key}")))?;
            t.cast::<f64>()
        }
        path => load(Path::new(path))?,
    };
    let class = match class {
        Some(k) => k,
        None => model.predict(&image.clone().reshape(vec![1, c, h, w]).map_err(Error::from)?)?[0],
    };
    let opts = IgOptions {
        steps,
        ..IgOptions::default()
    };
    let mut map = integrated_gradients(&model, &image, &base, class, &opts)?;
    map.input_ref = image_path.display().to_string();

    let stem = out_prefix.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "attribution".into());
    let sibling = |suffix: &str| out_prefix.with_file_name(format!("{stem}{suffix}"));
    let underlying: Vec<f32> = image.data().iter().map(|&v| v as f32).collect();
    let gray = render_attribution(&map, RenderMode::Grayscale, None)?;
    save_image(&gray.image, &sibling("_gray.png"))?;
    let overlay = render_attribution(&map, RenderMode::Overlay, Some(&underlying))?;
    save_image(&overlay.image, &sibling("_overlay.png"))?;
    let raw = sibling(".grlt");
    let mut bytes = Vec::new();
    write_raw(&map, &mut bytes).map_err(io_err(&raw))?;
    std::fs::write(&raw, bytes).map_err(io_err(&raw))?;
    if gray.all_zero {
        eprintln!("attribution map is all zero");
    }
    println!(
        "completeness_gap {:e} relative {:e} output_delta {:e} class {class} steps {steps}",
        map.completeness_gap,
        map.relative_gap(),
        map.output_delta
    );
    Ok(exit::OK)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InjectLeak {
    /// Target rows weighted 0.01 in the class loss.
    SoftMask,
    /// Target rows weighted like source rows.
    Unmasked,
}

pub fn verify(config: &Path, seed_override: Option<u64>, out: Option<PathBuf>, leak: Option<InjectLeak>) -> CliResult<u8> {
    let cfg = ExperimentConfig::load(config, seed_override)?;
    let out = out_dir(out, Some(&cfg))?;
    let target = cfg
        .target
        .clone()
        .ok_or_else(|| CliError::Config("target: verification needs a target domain".into()))?;
    let world = build_world(&cfg)?;
    let source = world.combined(&cfg.source, Part::Train)?;
    let t = &world.domains[&target];
    let train_cfg = TrainConfig {
        leak: leak.map(|l| match l {
            InjectLeak::SoftMask => Leak::SoftMask(0.01),
            InjectLeak::Unmasked => Leak::UnmaskedTargets,
        }),
        ..cfg.train.clone()
    };
    let report = verify_no_leakage::<f32>(&cfg.model, &train_cfg, &source, &t.train, &t.test)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&out.join("verify_report.json"), &json)?;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "experiment A (target labels rewritten): {} sha256 {} vs {}",
        verdict(report.experiment_a.passed),
        report.experiment_a.checkpoint_true_labels,
        report.experiment_a.checkpoint_zeroed_labels
    );
    println!(
        "experiment B (target only): {} accuracy {:.4} class loss {:?}",
        verdict(report.experiment_b.passed),
        report.experiment_b.target_accuracy,
        report.experiment_b.class_loss_per_epoch
    );
    println!("verification: {}", verdict(report.passed));
    Ok(if report.passed { exit::OK } else { exit::VERIFICATION_FAILED })
}

/// Writes synthetic domains as `out/<name>/{sparse,dense}/NNNNN.png`.
pub fn synth(out: &Path, n_per_class: usize, size: usize, seed: u64, recipes: &[String]) -> CliResult<u8> {
    let spec = ShiftSpec {
        n_per_class,
        image_size: [3, size, size],
        seed,
        ..ShiftSpec::default()
    };
    for (i, name) in recipes.iter().enumerate() {
        let recipe = DomainRecipe::preset(name)?;
        let domain = format!("synth_{name}");
        let set = synth_domain(&spec, &recipe, i as u64 + 1, &domain)?;
        for k in 0..set.len() {
            let sub = if set.labels()[k] == 0 { "sparse" } else { "dense" };
            let img = to_rgb8(set.image(k), size, size);
            save_image(&image::DynamicImage::ImageRgb8(img), &out.join(&domain).join(sub).join(format!("{k:05}.png")))?;
        }
        println!("{domain}: {} images", set.len());
    }
    Ok(exit::OK)
}
