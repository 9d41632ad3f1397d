//! Labeled image sets: loading, binarization, splitting, synthetic domains.

mod binarize;
mod load;
mod split;
mod synth;

use std::collections::BTreeMap;

use grla_tensor::{Float, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use binarize::BinarizationMap;
pub use load::{load_image_dataset, LoadOptions, LoadReport, SkippedFile};
pub use split::{split, split_indices, SplitSpec};
pub use synth::{
    density_oracle, nuclear_fraction, synth_domain, synth_shifted_pair, ClassRecipe, DensityOracle, DomainRecipe, ShiftSpec,
};

/// Images in [0, 1] stored N×C×H×W, with binary class labels and a domain tag.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    images: Tensor<f32>,
    labels: Vec<u8>,
    pub domain_id: String,
    /// Original sublabel → binary class, as used to build the labels.
    pub sublabel_map: BTreeMap<String, u8>,
    /// Hash of the origin, e.g. sorted (path, bytes) of a directory.
    pub fingerprint: String,
}

impl LabeledImageSet {
    /// Checks shapes, label range, and the [0, 1] pixel range.
    pub fn new(domain_id: impl Into<String>, images: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("images must be N×C×H×W, got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", shape[0], labels.len())));
        }
        let domain_id = domain_id.into();
        if labels.is_empty() {
            return Err(Error::EmptyDataset(domain_id));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
            return Err(Error::LabelOutOfRange {
                row,
                label: label as usize,
                classes: 2,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape(format!("{domain_id}: pixel values must lie in [0, 1]")));
        }
        let mut set = LabeledImageSet {
            images,
            labels,
            domain_id,
            sublabel_map: BTreeMap::new(),
            fingerprint: String::new(),
        };
        set.fingerprint = set.content_hash();
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// C, H, W of each image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        [self.labels.len() - ones, ones]
    }

    /// Same images with different labels; the fingerprint is recomputed.
    pub fn with_labels(&self, labels: Vec<u8>) -> Result<Self> {
        let mut out = LabeledImageSet::new(self.domain_id.clone(), self.images.clone(), labels)?;
        out.sublabel_map = self.sublabel_map.clone();
        Ok(out)
    }

    /// Same labels with transformed images (e.g. stain normalized).
    pub fn with_images(&self, images: Tensor<f32>) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(Error::Shape(format!(
                "replacement images {:?} do not match {:?}",
                images.shape(),
                self.images.shape()
            )));
        }
        let mut out = LabeledImageSet::new(self.domain_id.clone(), images, self.labels.clone())?;
        out.sublabel_map = self.sublabel_map.clone();
        Ok(out)
    }

    /// Rows `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape(format!("row {i} out of range for {} images", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape();
        let images = Tensor::new(vec![indices.len(), c, h, w], data)?;
        let mut out = LabeledImageSet::new(self.domain_id.clone(), images, labels)?;
        out.sublabel_map = self.sublabel_map.clone();
        Ok(out)
    }

    /// Rows of every set in order, under one domain tag. Sublabel maps are merged.
    pub fn concat(domain_id: impl Into<String>, sets: &[&LabeledImageSet]) -> Result<Self> {
        let [c, h, w] = check_same_shape(sets)?;
        let n: usize = sets.iter().map(|s| s.len()).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        let mut sublabels = BTreeMap::new();
        for s in sets {
            data.extend_from_slice(s.images.data());
            labels.extend_from_slice(&s.labels);
            sublabels.extend(s.sublabel_map.iter().map(|(k, v)| (k.clone(), *v)));
        }
        let mut out = LabeledImageSet::new(domain_id, Tensor::new(vec![n, c, h, w], data)?, labels)?;
        out.sublabel_map = sublabels;
        Ok(out)
    }

    /// Stacks rows `indices` into one batch tensor of element type `T`.
    pub fn batch<T: Float>(&self, indices: &[usize]) -> Tensor<T> {
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape")
    }

    /// SHA-256 over the image bytes alone.
    pub fn image_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// SHA-256 over images and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.image_hash().as_bytes());
        h.update(&self.labels);
        hex(&h.finalize())
    }

    /// Per-channel mean over every pixel of every image.
    pub fn channel_means(&self) -> Vec<f64> {
        let [c, h, w] = self.image_shape();
        let mut sums = vec![0.0f64; c];
        for i in 0..self.len() {
            for (ch, plane) in self.image(i).chunks(h * w).enumerate() {
                sums[ch] += plane.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let count = (self.len() * h * w) as f64;
        sums.into_iter().map(|s| s / count).collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn check_same_shape(sets: &[&LabeledImageSet]) -> Result<[usize; 3]> {
    let first = sets
        .first()
        .ok_or_else(|| Error::EmptyDataset("no image sets given".into()))?
        .image_shape();
    if let Some(bad) = sets.iter().find(|s| s.image_shape() != first) {
        return Err(Error::Shape(format!(
            "image shape {:?} of {} differs from {:?}",
            bad.image_shape(),
            bad.domain_id,
            first
        )));
    }
    Ok(first)
}

/// Per-pixel, per-channel mean image over every image of `sets`.
pub fn mean_image_baseline(sets: &[&LabeledImageSet]) -> Result<Tensor<f32>> {
    let [c, h, w] = check_same_shape(sets)?;
    let mut acc = vec![0.0f64; c * h * w];
    let mut count = 0usize;
    for set in sets {
        for i in 0..set.len() {
            for (a, &v) in acc.iter_mut().zip(set.image(i)) {
                *a += v as f64;
            }
            count += 1;
        }
    }
    let data = acc.into_iter().map(|s| (s / count as f64) as f32).collect();
    Ok(Tensor::new(vec![c, h, w], data)?)
}

/// Image where every pixel of a channel holds that channel's mean over `sets`.
pub fn channel_mean_baseline(sets: &[&LabeledImageSet]) -> Result<Tensor<f32>> {
    let [c, h, w] = check_same_shape(sets)?;
    let mut sums = vec![0.0f64; c];
    let mut count = 0usize;
    for set in sets {
        let means = set.channel_means();
        for (s, m) in sums.iter_mut().zip(means) {
            *s += m * set.len() as f64;
        }
        count += set.len();
    }
    let mut data = Vec::with_capacity(c * h * w);
    for s in sums {
        data.extend(std::iter::repeat_n((s / count as f64) as f32, h * w));
    }
    Ok(Tensor::new(vec![c, h, w], data)?)
}
