//! Datasets named by a config, split and optionally stain normalized.

use std::collections::BTreeMap;
use std::path::Path;

use grla_core::data::{
    load_image_dataset, split, synth_domain, BinarizationMap, DomainRecipe, LabeledImageSet, LoadOptions,
};
use grla_core::stain::{compute_stain_stats, normalize_dataset_with, set_stain_stats, StainStats};

use crate::config::{ExperimentConfig, FolderDomain};
use crate::error::{CliError, CliResult};

/// Train, validation and test rows of one domain.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledImageSet,
    pub val: LabeledImageSet,
    pub test: LabeledImageSet,
}

impl Splits {
    pub fn get(&self, part: Part) -> &LabeledImageSet {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        }
    }
}

pub struct World {
    pub domains: BTreeMap<String, Splits>,
    /// Reference statistics, when stain normalization is on.
    pub stain_reference: Option<StainStats>,
    pub skipped_files: usize,
}

pub fn binarization_for(name: &str, preset: Option<&str>, classes: Option<&BTreeMap<String, u8>>) -> CliResult<BinarizationMap> {
    Ok(match classes {
        Some(map) => BinarizationMap::new(name, map.iter().map(|(k, v)| (k.clone(), *v)))?,
        None => BinarizationMap::preset(preset.unwrap_or(name))?,
    })
}

fn load_folder(f: &FolderDomain, size: (usize, usize), lenient: bool) -> CliResult<(LabeledImageSet, usize)> {
    let map = binarization_for(&f.name, f.preset.as_deref(), f.classes.as_ref())?;
    let report = load_image_dataset(&f.path, &map, &LoadOptions { size, lenient })?;
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.path.display(), s.reason);
    }
    let mut set = report.set;
    set.domain_id = f.name.clone();
    Ok((set, report.skipped.len()))
}

/// Every domain of the config, whole and unsplit.
pub fn load_domains(cfg: &ExperimentConfig) -> CliResult<(Vec<LabeledImageSet>, usize)> {
    let mut sets = Vec::new();
    let mut skipped = 0;
    if let Some(s) = &cfg.data.synth {
        let spec = cfg.shift_spec();
        for (i, d) in s.domains.iter().enumerate() {
            let recipe = match (&d.recipe, &d.preset) {
                (Some(r), _) => r.clone(),
                (None, Some(p)) => DomainRecipe::preset(p)?,
                (None, None) => unreachable!("validated"),
            };
            sets.push(synth_domain(&spec, &recipe, i as u64 + 1, &d.name)?);
        }
    }
    let [_, h, w] = cfg.model.input_shape;
    for f in &cfg.data.folders {
        let (set, n) = load_folder(f, (h, w), cfg.data.lenient)?;
        skipped += n;
        sets.push(set);
    }
    Ok((sets, skipped))
}

/// Loads and splits every domain. With stain normalization on, the
/// reference is the union of the source training splits, and each domain
/// is mapped from its own training-split statistics.
pub fn build_world(cfg: &ExperimentConfig) -> CliResult<World> {
    let (sets, skipped_files) = load_domains(cfg)?;
    let spec = cfg.split_spec();
    let mut domains = BTreeMap::new();
    for set in sets {
        let (train, val, test) = split(&set, &spec)?;
        domains.insert(set.domain_id.clone(), Splits { train, val, test });
    }
    let mut stain_reference = None;
    if cfg.stain_norm {
        let images: Vec<&[f32]> = cfg
            .source
            .iter()
            .flat_map(|s| {
                let t = &domains[s].train;
                (0..t.len()).map(move |i| t.image(i))
            })
            .collect();
        let reference = compute_stain_stats(&images, &format!("{}:train", cfg.source.join("+")))?;
        for (name, sp) in domains.iter_mut() {
            let own = set_stain_stats(&sp.train, &format!("{name}:train"))?;
            sp.train = normalize_dataset_with(&sp.train, &own, &reference)?;
            sp.val = normalize_dataset_with(&sp.val, &own, &reference)?;
            sp.test = normalize_dataset_with(&sp.test, &own, &reference)?;
        }
        stain_reference = Some(reference);
    }
    Ok(World {
        domains,
        stain_reference,
        skipped_files,
    })
}

impl World {
    /// One part of several domains stacked under a joint name.
    pub fn combined(&self, names: &[String], part: Part) -> CliResult<LabeledImageSet> {
        let sets: Vec<&LabeledImageSet> = names.iter().map(|n| self.domains[n].get(part)).collect();
        if sets.len() == 1 {
            return Ok(sets[0].clone());
        }
        Ok(LabeledImageSet::concat(names.join("+"), &sets)?)
    }
}

/// Loads a dataset directory for evaluation at the given image size.
pub fn load_eval_dir(dir: &Path, preset: Option<&str>, size: (usize, usize), lenient: bool) -> CliResult<LabeledImageSet> {
    if crate::io::image_files(dir)?.is_empty() {
        return Err(CliError::artifact(dir, "no image files"));
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let f = FolderDomain {
        name,
        path: dir.to_path_buf(),
        preset: preset.map(str::to_string),
        classes: None,
    };
    Ok(load_folder(&f, size, lenient)?.0)
}
