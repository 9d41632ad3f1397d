//! Reinhard-style stain normalization: moment matching per channel in the
//! decorrelated lαβ colour space.

use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};

const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];

/// Floor applied to LMS responses before taking logarithms.
const LMS_FLOOR: f64 = 1e-4;

/// Standard deviation below which a channel counts as constant.
const MIN_STD: f64 = 1e-9;

fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

/// RGB in [0, 1] to lαβ.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lms = mat_vec(&RGB_TO_LMS, rgb).map(|v| v.max(LMS_FLOOR).log10());
    let (s3, s6, s2) = (3f64.sqrt(), 6f64.sqrt(), 2f64.sqrt());
    [
        (lms[0] + lms[1] + lms[2]) / s3,
        (lms[0] + lms[1] - 2.0 * lms[2]) / s6,
        (lms[0] - lms[1]) / s2,
    ]
}

/// lαβ back to (unclamped) RGB.
pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let (s3, s6, s2) = (3f64.sqrt(), 6f64.sqrt(), 2f64.sqrt());
    let [l, a, b] = lab;
    let lms = [
        l / s3 + a / s6 + b / s2,
        l / s3 + a / s6 - b / s2,
        l / s3 - 2.0 * a / s6,
    ]
    .map(|v| 10f64.powf(v));
    mat_vec(&invert3(RGB_TO_LMS), lms)
}

/// Global per-channel lαβ moments of a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StainStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub reference_id: String,
}

impl StainStats {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("stain stats serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

fn pixels(image: &[f32]) -> impl Iterator<Item = [f64; 3]> + '_ {
    let plane = image.len() / 3;
    (0..plane).map(move |j| [0, 1, 2].map(|c| image[c * plane + j] as f64))
}

/// Per-channel lαβ mean and standard deviation over every pixel of `images`
/// (each 3×H×W, RGB in [0, 1]).
pub fn compute_stain_stats(images: &[&[f32]], reference_id: &str) -> Result<StainStats> {
    if images.is_empty() || images.iter().all(|i| i.is_empty()) {
        return Err(Error::DegenerateReference(format!("{reference_id}: no images")));
    }
    if let Some(bad) = images.iter().find(|i| i.len() % 3 != 0) {
        return Err(Error::Shape(format!("{} values do not form 3-channel pixels", bad.len())));
    }
    let mut count = 0usize;
    let mut mean = [0.0f64; 3];
    for img in images {
        for px in pixels(img) {
            let lab = rgb_to_lab(px);
            for c in 0..3 {
                mean[c] += lab[c];
            }
            count += 1;
        }
    }
    mean = mean.map(|m| m / count as f64);
    let mut var = [0.0f64; 3];
    for img in images {
        for px in pixels(img) {
            let lab = rgb_to_lab(px);
            for c in 0..3 {
                var[c] += (lab[c] - mean[c]).powi(2);
            }
        }
    }
    let std = var.map(|v| (v / count as f64).sqrt());
    if let Some(c) = (0..3).find(|&c| !(std[c] > MIN_STD) || !mean[c].is_finite()) {
        return Err(Error::DegenerateReference(format!(
            "{reference_id}: channel {} has zero variance",
            ["l", "alpha", "beta"][c]
        )));
    }
    Ok(StainStats {
        mean,
        std,
        reference_id: reference_id.to_string(),
    })
}

/// Stats over every image of a set.
pub fn set_stain_stats(set: &LabeledImageSet, reference_id: &str) -> Result<StainStats> {
    let images: Vec<&[f32]> = (0..set.len()).map(|i| set.image(i)).collect();
    compute_stain_stats(&images, reference_id)
}

/// `(v − μ_src)·σ_ref/σ_src + μ_ref` per channel; a constant source channel
/// is only shifted by `μ_ref − μ_src`.
pub fn match_moments(lab: [f64; 3], src: &StainStats, reference: &StainStats) -> [f64; 3] {
    [0, 1, 2].map(|c| {
        let centered = lab[c] - src.mean[c];
        let scaled = if src.std[c] > 0.0 {
            centered * reference.std[c] / src.std[c]
        } else {
            centered
        };
        scaled + reference.mean[c]
    })
}

/// Normalizes one 3×H×W image; the result is clamped to [0, 1].
pub fn normalize_image(image: &[f32], src: &StainStats, reference: &StainStats) -> Result<Vec<f32>> {
    if image.len() % 3 != 0 {
        return Err(Error::Shape(format!("{} values do not form 3-channel pixels", image.len())));
    }
    let plane = image.len() / 3;
    let mut out = vec![0.0f32; image.len()];
    for (j, px) in pixels(image).enumerate() {
        let rgb = lab_to_rgb(match_moments(rgb_to_lab(px), src, reference));
        for c in 0..3 {
            let v = if rgb[c].is_finite() { rgb[c].clamp(0.0, 1.0) } else { 0.0 };
            out[c * plane + j] = v as f32;
        }
    }
    Ok(out)
}

/// Normalizes every image of `set` from the set's own statistics toward
/// `reference`. Labels and row order are unchanged.
pub fn normalize_dataset(set: &LabeledImageSet, reference: &StainStats) -> Result<LabeledImageSet> {
    let own = set_stain_stats(set, &set.domain_id)?;
    normalize_dataset_with(set, &own, reference)
}

/// As [`normalize_dataset`], with the source statistics given, e.g. those
/// of the domain's training split applied to its test split.
pub fn normalize_dataset_with(set: &LabeledImageSet, own: &StainStats, reference: &StainStats) -> Result<LabeledImageSet> {
    if set.image_shape()[0] != 3 {
        return Err(Error::Shape(format!("stain normalization needs RGB images, got {:?}", set.image_shape())));
    }
    let mut data = Vec::with_capacity(set.images().numel());
    for i in 0..set.len() {
        data.extend(normalize_image(set.image(i), own, reference)?);
    }
    let images = grla_tensor::Tensor::new(set.images().shape().to_vec(), data)?;
    set.with_images(images)
}
