//! File formats written by the commands.

use std::path::{Path, PathBuf};

use grla_core::evaluation::MetricsReport;
use image::RgbImage;

use crate::error::{io_err, CliError, CliResult};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

pub fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files anywhere under `root`, as paths relative to it, sorted.
pub fn image_files(root: &Path) -> CliResult<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
        for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if is_image(&path) {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

/// An image file as RGB in [0, 1], C×H×W, at its own size.
pub fn read_rgb(path: &Path) -> CliResult<(Vec<f32>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| CliError::artifact(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * h * w + y as usize * w + x as usize] = f32::from(px.0[c]) / 255.0;
        }
    }
    Ok((out, h, w))
}

pub fn to_rgb8(chw: &[f32], h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let j = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (chw[c * h * w + j].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn save_image(img: &image::DynamicImage, path: &Path) -> CliResult<()> {
    ensure_parent(path)?;
    img.save(path).map_err(|e| CliError::artifact(path, e.to_string()))
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(io_err(p)),
        _ => Ok(()),
    }
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(io_err(path))
}

/// One metrics row with the partition it was measured on.
pub struct MetricsRow {
    pub split: String,
    pub report: MetricsReport,
}

pub const METRICS_HEADER: [&str; 7] = ["split", "domain", "n", "accuracy", "precision", "recall", "f1"];

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).expect("in-memory write");
    for r in rows {
        let [domain, n, acc, p, rec, f1] = r.report.csv_row();
        w.write_record([r.split.as_str(), &domain, &n, &acc, &p, &rec, &f1])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
