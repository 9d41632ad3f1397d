use grla_tensor::Float;
use image::{Rgb, RgbImage};
use rayon::prelude::*;

use super::MetricsReport;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::DannModel;
use crate::trainer::evaluate;

/// Rows are training domains, columns evaluation domains.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossDomainMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<MetricsReport>>,
}

/// Scores every model on every dataset; cells are evaluated in parallel.
pub fn cross_domain_eval<T: Float>(
    models: &[(String, &DannModel<T>)],
    datasets: &[(String, &LabeledImageSet)],
    chunk: usize,
) -> Result<CrossDomainMatrix> {
    if models.is_empty() || datasets.is_empty() {
        return Err(Error::Config("cross-domain evaluation needs at least one model and one dataset".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|i| (0..datasets.len()).map(move |j| (i, j)))
        .collect();
    let reports = pairs
        .par_iter()
        .map(|&(i, j)| evaluate(models[i].1, datasets[j].1, &datasets[j].0, chunk))
        .collect::<Result<Vec<_>>>()?;
    let mut it = reports.into_iter();
    let cells = (0..models.len())
        .map(|_| it.by_ref().take(datasets.len()).collect())
        .collect();
    Ok(CrossDomainMatrix {
        rows: models.iter().map(|m| m.0.clone()).collect(),
        cols: datasets.iter().map(|d| d.0.clone()).collect(),
        cells,
    })
}

impl CrossDomainMatrix {
    /// RFC 4180 table with one line per cell.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record(["train_domain", "eval_domain", "n", "accuracy", "precision", "recall", "f1"])
            .map_err(csv_err)?;
        for (r, row) in self.rows.iter().zip(&self.cells) {
            for (c, m) in self.cols.iter().zip(row) {
                w.write_record([
                    r.clone(),
                    c.clone(),
                    m.n.to_string(),
                    m.accuracy.to_string(),
                    m.precision.to_string(),
                    m.recall.to_string(),
                    m.f1.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Accuracy grid, row-major.
    pub fn accuracy_grid(&self) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .map(|row| row.iter().map(|m| m.accuracy).collect())
            .collect()
    }

    /// Heatmap of accuracies: dark blue at 0 through yellow at 1, one
    /// square per cell separated by white lines.
    pub fn heatmap(&self, cell: u32) -> RgbImage {
        let grid = self.accuracy_grid();
        let (rows, cols) = (grid.len() as u32, grid.first().map_or(0, Vec::len) as u32);
        let mut img = RgbImage::from_pixel(cols * (cell + 1) + 1, rows * (cell + 1) + 1, Rgb([255, 255, 255]));
        for (r, row) in grid.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let color = ramp(v);
                let (x0, y0) = (c as u32 * (cell + 1) + 1, r as u32 * (cell + 1) + 1);
                for y in y0..y0 + cell {
                    for x in x0..x0 + cell {
                        img.put_pixel(x, y, color);
                    }
                }
            }
        }
        img
    }
}

fn ramp(v: f64) -> Rgb<u8> {
    let t = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    Rgb([lerp(30.0, 250.0), lerp(40.0, 220.0), lerp(120.0, 40.0)])
}
