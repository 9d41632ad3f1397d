//! The experiment configuration file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use grla_core::data::{ClassRecipe, DomainRecipe, ShiftSpec, SplitSpec};
use grla_core::model::DannConfig;
use grla_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One model on the combined source domains, adapted to the target.
    Dann,
    /// One model per source domain, averaged on the held-out target.
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub stratify: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let d = SplitSpec::default();
        SplitConfig {
            ratios: d.ratios,
            stratify: d.stratify,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDomain {
    pub name: String,
    /// Built-in look: `source`, `target` or `auxiliary`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<DomainRecipe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthData {
    pub n_per_class: usize,
    pub image_size: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<[ClassRecipe; 2]>,
    pub domains: Vec<SynthDomain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderDomain {
    pub name: String,
    /// Relative paths are resolved against the config file's directory.
    pub path: PathBuf,
    /// Built-in binarization; defaults to the domain name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Explicit sublabel → class map, instead of a preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<BTreeMap<String, u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthData>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folders: Vec<FolderDomain>,
    /// Skip undecodable image files instead of failing.
    #[serde(default)]
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives every random choice: data generation, splits, initialization, batching.
    pub seed: u64,
    pub protocol: Protocol,
    pub source: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub stain_norm: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitConfig,
    pub data: DataConfig,
    pub model: DannConfig,
    pub train: TrainConfig,
}

fn bad(key: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {why}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads, parses and validates a config file; relative data paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path, seed_override: Option<u64>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for f in &mut cfg.data.folders {
            if f.path.is_relative() {
                f.path = base.join(&f.path);
            }
        }
        if let Some(seed) = seed_override {
            cfg.seed = seed;
            cfg.model.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.resolve()
    }

    /// Checks every cross-field rule and copies the top-level seed into
    /// the model and training sections.
    pub fn resolve(mut self) -> CliResult<Self> {
        for (key, nested) in [("model.seed", self.model.seed), ("train.seed", self.train.seed)] {
            if nested != 0 && nested != self.seed {
                return Err(bad(key, format!("{nested} conflicts with the top-level seed {}; set only `seed`", self.seed)));
            }
        }
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.model.validate().map_err(|e| bad("model", e))?;
        self.train.validate().map_err(|e| bad("train", e))?;
        self.split_spec().validate().map_err(|e| bad("split.ratios", e))?;

        let names = self.domain_names();
        match (&self.data.synth, self.data.folders.is_empty()) {
            (Some(_), false) => return Err(bad("data", "give either [data.synth] or [[data.folders]], not both")),
            (None, true) => return Err(bad("data", "no domains: add [data.synth] or [[data.folders]]")),
            _ => {}
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(bad("data", format!("domain {n:?} is listed twice")));
            }
        }
        if let Some(s) = &self.data.synth {
            if s.image_size != self.model.input_shape {
                return Err(bad(
                    "data.synth.image_size",
                    format!("{:?} differs from model.input_shape {:?}", s.image_size, self.model.input_shape),
                ));
            }
            for d in &s.domains {
                if d.preset.is_some() == d.recipe.is_some() {
                    return Err(bad("data.synth.domains", format!("{}: give exactly one of preset or recipe", d.name)));
                }
            }
            self.shift_spec().validate_shared().map_err(|e| bad("data.synth", e))?;
        }
        for f in &self.data.folders {
            if f.preset.is_some() && f.classes.is_some() {
                return Err(bad("data.folders", format!("{}: give at most one of preset or classes", f.name)));
            }
        }
        if self.source.is_empty() {
            return Err(bad("source", "at least one source domain is required"));
        }
        for s in &self.source {
            if !names.contains(s) {
                return Err(bad("source", format!("unknown domain {s:?}")));
            }
        }
        if let Some(t) = &self.target {
            if !names.contains(t) {
                return Err(bad("target", format!("unknown domain {t:?}")));
            }
            if self.source.contains(t) {
                return Err(bad("target", format!("{t:?} is also a source domain")));
            }
        }
        if self.protocol == Protocol::Ensemble && self.target.is_none() {
            return Err(bad("target", "the ensemble protocol scores a held-out target domain"));
        }
        Ok(self)
    }

    pub fn domain_names(&self) -> Vec<String> {
        match &self.data.synth {
            Some(s) => s.domains.iter().map(|d| d.name.clone()).collect(),
            None => self.data.folders.iter().map(|f| f.name.clone()).collect(),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            ratios: self.split.ratios,
            seed: self.seed,
            stratify: self.split.stratify,
        }
    }

    /// Generator settings shared by every synthetic domain.
    pub fn shift_spec(&self) -> ShiftSpec {
        let s = self.data.synth.as_ref().expect("synthetic data");
        let d = ShiftSpec::default();
        ShiftSpec {
            n_per_class: s.n_per_class,
            image_size: s.image_size,
            classes: s.classes.unwrap_or(d.classes),
            seed: self.seed,
            ..d
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
