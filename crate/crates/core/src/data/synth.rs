use grla_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledImageSet;
use crate::error::{Error, Result};

/// Nucleus count and radius ranges for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRecipe {
    pub nuclei: (usize, usize),
    pub radius: (f64, f64),
}

/// Appearance of one domain under a Beer–Lambert stain model:
/// `I = illumination · exp(−(h·H + e·E))`, then a hue rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRecipe {
    /// Optical density of the nuclear stain at full concentration, per RGB channel.
    pub hematoxylin: [f64; 3],
    /// Optical density of the background stain, per RGB channel.
    pub eosin: [f64; 3],
    pub illumination: [f64; 3],
    /// Rotation about the gray axis, in degrees.
    pub hue_rotation: f64,
    /// Relative amplitude of the smooth background texture.
    pub texture: f64,
    pub texture_seed: u64,
    /// Per-image multiplicative jitter of both stain strengths.
    pub stain_jitter: f64,
    pub noise_std: f64,
}

impl DomainRecipe {
    /// Purple nuclei on a pink background.
    pub fn source() -> Self {
        DomainRecipe {
            hematoxylin: [1.05, 1.15, 0.45],
            eosin: [0.05, 0.55, 0.10],
            illumination: [0.96, 0.94, 0.96],
            hue_rotation: 0.0,
            texture: 0.25,
            texture_seed: 11,
            stain_jitter: 0.15,
            noise_std: 0.015,
        }
    }

    /// Violet nuclei on a pale blue background under yellowish light.
    pub fn auxiliary() -> Self {
        DomainRecipe {
            hematoxylin: [0.60, 0.95, 1.05],
            eosin: [0.15, 0.30, 0.55],
            illumination: [0.93, 0.90, 0.80],
            hue_rotation: 15.0,
            texture: 0.25,
            texture_seed: 47,
            stain_jitter: 0.15,
            noise_std: 0.015,
        }
    }

    /// Built-in recipe by name: `source`, `target` or `auxiliary`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "source" => Ok(Self::source()),
            "target" => Ok(Self::target()),
            "auxiliary" => Ok(Self::auxiliary()),
            other => Err(Error::Config(format!("unknown synthetic recipe {other:?}"))),
        }
    }

    /// The source stains under dimmer light, with a heavier, bluer counterstain.
    pub fn target() -> Self {
        DomainRecipe {
            hematoxylin: [1.05, 1.15, 0.45],
            eosin: [0.30, 0.80, 0.35],
            illumination: [0.80, 0.78, 0.80],
            hue_rotation: 0.0,
            texture: 0.25,
            texture_seed: 29,
            stain_jitter: 0.15,
            noise_std: 0.015,
        }
    }
}

/// Parameters of a synthetic source/target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    pub n_per_class: usize,
    /// Channels, height, width; channels must be 3.
    pub image_size: [usize; 3],
    /// Class 0 (sparse, small nuclei) and class 1 (dense, large nuclei).
    pub classes: [ClassRecipe; 2],
    pub source: DomainRecipe,
    pub target: DomainRecipe,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            n_per_class: 500,
            image_size: [3, 32, 32],
            classes: [
                ClassRecipe {
                    nuclei: (3, 6),
                    radius: (1.5, 2.2),
                },
                ClassRecipe {
                    nuclei: (9, 14),
                    radius: (2.0, 2.8),
                },
            ],
            source: DomainRecipe::source(),
            target: DomainRecipe::target(),
            seed: 0,
        }
    }
}

impl ShiftSpec {
    /// Checks image size and class mechanics, leaving the domain recipes aside.
    pub fn validate_shared(&self) -> Result<()> {
        let [c, h, w] = self.image_size;
        if c != 3 || h < 8 || w < 8 {
            return Err(Error::Config(format!("synthetic images must be 3×H×W with H, W ≥ 8, got {:?}", self.image_size)));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        for (k, r) in self.classes.iter().enumerate() {
            if r.nuclei.0 > r.nuclei.1 || !(r.radius.0 > 0.0 && r.radius.0 <= r.radius.1) {
                return Err(Error::Config(format!("class {k} recipe has an empty range")));
            }
        }
        let [a, b] = self.classes;
        if a.nuclei.1 >= b.nuclei.0 && a.radius.1 >= b.radius.0 {
            return Err(Error::Config(
                "degenerate recipe: class nucleus counts and radii overlap, so density does not separate the classes".into(),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shared()?;
        if self.source == self.target {
            return Err(Error::Config("source and target recipes are identical; there is no shift".into()));
        }
        Ok(())
    }

    /// Density oracle whose area threshold sits at the geometric mean of the
    /// expected nuclear fractions of the two classes.
    pub fn oracle(&self) -> DensityOracle {
        let [_, h, w] = self.image_size;
        let area = |r: &ClassRecipe| {
            let n = (r.nuclei.0 + r.nuclei.1) as f64 / 2.0;
            let (a, b) = r.radius;
            let r2 = (a * a + a * b + b * b) / 3.0;
            n * std::f64::consts::PI * r2 / (h * w) as f64
        };
        DensityOracle {
            pixel_threshold: 0.15,
            area_threshold: (area(&self.classes[0]) * area(&self.classes[1]).min(0.5)).sqrt(),
        }
    }
}

fn smooth_texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.15..0.45);
            (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = waves.iter().map(|(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            out.push(s / waves.len() as f64);
        }
    }
    out
}

/// Rotation about the (1,1,1) axis by `deg` degrees (Rodrigues).
fn hue_matrix(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let k = 1.0 / 3.0f64.sqrt();
    let t = 1.0 - c;
    let d = c + t * k * k;
    let a = t * k * k - s * k;
    let b = t * k * k + s * k;
    [[d, a, b], [b, d, a], [a, b, d]]
}

/// Nucleus layout of one image: centres, radii and stain strengths.
fn nuclei(rng: &mut ChaCha8Rng, recipe: &ClassRecipe, h: usize, w: usize) -> Vec<(f64, f64, f64, f64)> {
    let n = rng.random_range(recipe.nuclei.0..=recipe.nuclei.1);
    (0..n)
        .map(|_| {
            let r = rng.random_range(recipe.radius.0..=recipe.radius.1);
            let cy = rng.random_range(r..(h as f64 - r));
            let cx = rng.random_range(r..(w as f64 - r));
            (cy, cx, r, rng.random_range(0.85..1.15))
        })
        .collect()
}

fn render(
    layout: &[(f64, f64, f64, f64)],
    recipe: &DomainRecipe,
    texture: &[f64],
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
) -> Vec<f32> {
    let noise = Normal::new(0.0, recipe.noise_std.max(0.0)).expect("noise");
    let jh = 1.0 + recipe.stain_jitter * rng.random_range(-1.0..1.0);
    let je = 1.0 + recipe.stain_jitter * rng.random_range(-1.0..1.0);
    let rot = hue_matrix(recipe.hue_rotation);
    let mut out = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let hc = layout
                .iter()
                .map(|&(cy, cx, r, s)| {
                    let d = ((py - cy).powi(2) + (px - cx).powi(2)).sqrt();
                    s * (r - d + 0.5).clamp(0.0, 1.0)
                })
                .fold(0.0, f64::max);
            let ec = 1.0 + recipe.texture * texture[y * w + x];
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                let od = jh * hc * recipe.hematoxylin[c] + je * ec * recipe.eosin[c];
                rgb[c] = recipe.illumination[c] * (-od).exp();
            }
            for c in 0..3 {
                let v = rot[c][0] * rgb[0] + rot[c][1] * rgb[1] + rot[c][2] * rgb[2] + noise.sample(rng);
                out[c * h * w + y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// One synthetic domain drawn with `spec`'s class mechanics and seed; the
/// nucleus layouts come from the independent random stream `layout_stream`.
/// The pair generator uses streams 1 and 2.
pub fn synth_domain(spec: &ShiftSpec, recipe: &DomainRecipe, layout_stream: u64, name: &str) -> Result<LabeledImageSet> {
    spec.validate_shared()?;
    let [c, h, w] = spec.image_size;
    let mut geometry = ChaCha8Rng::seed_from_u64(spec.seed);
    geometry.set_stream(layout_stream);
    let mut look = ChaCha8Rng::seed_from_u64(recipe.texture_seed ^ spec.seed.rotate_left(17));
    let n = 2 * spec.n_per_class;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        let layout = nuclei(&mut geometry, &spec.classes[label as usize], h, w);
        let texture = smooth_texture(&mut look, h, w);
        data.extend(render(&layout, recipe, &texture, &mut look, h, w));
        labels.push(label);
    }
    let mut set = LabeledImageSet::new(name, Tensor::new(vec![n, c, h, w], data)?, labels)?;
    set.sublabel_map = [("sparse".to_string(), 0), ("dense".to_string(), 1)].into();
    Ok(set)
}

/// Source and target sets with identical class mechanics and different
/// stain, illumination and hue. Labels alternate 0, 1, 0, 1, …
pub fn synth_shifted_pair(spec: &ShiftSpec) -> Result<(LabeledImageSet, LabeledImageSet)> {
    spec.validate()?;
    Ok((
        synth_domain(spec, &spec.source, 1, "synth_source")?,
        synth_domain(spec, &spec.target, 2, "synth_target")?,
    ))
}

/// Closed-form classifier: an image is dense when the fraction of pixels
/// that stand out from the image median exceeds `area_threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityOracle {
    /// Minimum deviation (max over channels) for a pixel to count as nuclear.
    pub pixel_threshold: f64,
    pub area_threshold: f64,
}

/// Fraction of pixels whose largest per-channel deviation from the
/// channel median exceeds `pixel_threshold`. `image` is C×H×W.
pub fn nuclear_fraction(image: &[f32], channels: usize, pixel_threshold: f64) -> f64 {
    let plane = image.len() / channels;
    let medians: Vec<f32> = image
        .chunks(plane)
        .map(|p| {
            let mut v = p.to_vec();
            v.sort_by(f32::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    let count = (0..plane)
        .filter(|&j| {
            (0..channels).any(|c| ((image[c * plane + j] - medians[c]) as f64).abs() > pixel_threshold)
        })
        .count();
    count as f64 / plane as f64
}

impl DensityOracle {
    pub fn classify(&self, image: &[f32], channels: usize) -> u8 {
        u8::from(nuclear_fraction(image, channels, self.pixel_threshold) > self.area_threshold)
    }
}

/// Accuracy of `oracle` on `set`.
pub fn density_oracle(set: &LabeledImageSet, oracle: &DensityOracle) -> f64 {
    let c = set.image_shape()[0];
    let hits = (0..set.len())
        .filter(|&i| oracle.classify(set.image(i), c) == set.labels()[i])
        .count();
    hits as f64 / set.len() as f64
}
