use std::path::{Path, PathBuf};

use grla_tensor::Tensor;
use image::imageops::FilterType;
use sha2::{Digest, Sha256};

use super::{hex, BinarizationMap, LabeledImageSet};
use crate::error::{io_err, Error, Result};

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadOptions {
    /// Target height and width; images are resized bilinearly when they differ.
    pub size: (usize, usize),
    /// Skip undecodable files instead of failing.
    pub lenient: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            size: (32, 32),
            lenient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub set: LabeledImageSet,
    /// Relative paths of the loaded files, in row order.
    pub files: Vec<PathBuf>,
    pub skipped: Vec<SkippedFile>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files under `root/<sublabel>/`, sorted by relative path.
pub(crate) fn list_images(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(root).map_err(io_err(root))?;
    for entry in entries {
        let entry = entry.map_err(io_err(root))?;
        let dir = entry.path();
        if !dir.is_dir() {
            continue;
        }
        let sublabel = entry.file_name().to_string_lossy().into_owned();
        for file in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let file = file.map_err(io_err(&dir))?.path();
            if file.is_file() && is_image(&file) {
                out.push((sublabel.clone(), file));
            }
        }
    }
    out.sort_by(|a, b| a.1.cmp(&b.1));
    Ok(out)
}

/// Decodes one file to RGB in [0, 1], C×H×W, resized to `size`.
pub fn decode_image(bytes: &[u8], size: (usize, usize)) -> std::result::Result<Vec<f32>, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    let mut rgb = img.to_rgb8();
    let (h, w) = size;
    if rgb.width() as usize != w || rgb.height() as usize != h {
        rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
    }
    let mut out = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Reads `root/<sublabel>/*.{png,jpg,jpeg,bmp}` in lexicographic path order.
/// Grayscale files are replicated to three channels.
pub fn load_image_dataset(root: &Path, map: &BinarizationMap, opts: &LoadOptions) -> Result<LoadReport> {
    let (h, w) = opts.size;
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("image size {h}×{w} must be positive")));
    }
    let mut subdirs: Vec<String> = std::fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    subdirs.sort();
    let mut used = std::collections::BTreeMap::new();
    for d in &subdirs {
        used.insert(d.clone(), map.class_of(d)?);
    }

    let mut hasher = Sha256::new();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut files = Vec::new();
    let mut skipped = Vec::new();
    for (sublabel, path) in list_images(root)? {
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
        match decode_image(&bytes, opts.size) {
            Ok(pixels) => {
                hasher.update(rel.to_string_lossy().as_bytes());
                hasher.update((bytes.len() as u64).to_le_bytes());
                hasher.update(&bytes);
                data.extend(pixels);
                labels.push(used[&sublabel]);
                files.push(rel);
            }
            Err(message) if opts.lenient => skipped.push(SkippedFile { path, reason: message }),
            Err(message) => return Err(Error::Decode { path, message }),
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset(root.display().to_string()));
    }
    let domain = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| map.domain.clone());
    let images = Tensor::new(vec![labels.len(), 3, h, w], data)?;
    let mut set = LabeledImageSet::new(domain, images, labels)?;
    set.sublabel_map = used;
    set.fingerprint = hex(&hasher.finalize());
    Ok(LoadReport { set, files, skipped })
}
