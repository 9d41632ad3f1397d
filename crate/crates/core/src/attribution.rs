//! Integrated Gradients along the straight path from a baseline image,
//! with grayscale and overlay renderings.

use std::io::{Read, Write};

use grla_tensor::{DType, Float, Graph, Mode, Tensor, Var};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DannModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Riemann {
    /// Points α = k/steps for k = 1..=steps.
    #[default]
    Right,
    /// Points α = (k − ½)/steps.
    Midpoint,
}

/// Which output of the label head is attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgOutput {
    #[default]
    Probability,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IgOptions {
    pub steps: usize,
    pub rule: Riemann,
    pub output: IgOutput,
    /// Interpolation points evaluated per graph.
    pub chunk: usize,
}

impl Default for IgOptions {
    fn default() -> Self {
        IgOptions {
            steps: 100,
            rule: Riemann::Right,
            output: IgOutput::Probability,
            chunk: 64,
        }
    }
}

/// Signed per-pixel attributions for one image, shaped like the input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub input_ref: String,
    pub target_class: usize,
    pub steps: usize,
    /// F(x) − F(baseline).
    pub output_delta: f64,
    /// |Σ attributions − (F(x) − F(baseline))|.
    pub completeness_gap: f64,
}

impl AttributionMap {
    /// Gap as a fraction of |F(x) − F(baseline)|.
    pub fn relative_gap(&self) -> f64 {
        self.completeness_gap / self.output_delta.abs()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

fn path_points(steps: usize, rule: Riemann) -> Vec<f64> {
    (1..=steps)
        .map(|k| match rule {
            Riemann::Right => k as f64 / steps as f64,
            Riemann::Midpoint => (k as f64 - 0.5) / steps as f64,
        })
        .collect()
}

/// Integrated Gradients for any scalar function of one input. `f` maps a
/// batch of inputs (shape N × input shape) to N outputs.
pub fn integrated_gradients_fn<T, F>(f: F, image: &Tensor<T>, baseline: &Tensor<T>, opts: &IgOptions) -> Result<(Vec<f64>, f64, f64)>
where
    T: Float,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if image.shape() != baseline.shape() {
        return Err(Error::Shape(format!(
            "baseline {:?} does not match image {:?}",
            baseline.shape(),
            image.shape()
        )));
    }
    if opts.steps == 0 {
        return Err(Error::Config("integrated gradients needs at least one step".into()));
    }
    let x = image.to_f64_vec();
    let b = baseline.to_f64_vec();
    let n = x.len();

    let eval = |alphas: &[f64], grads: &mut Option<&mut Vec<f64>>| -> Result<Vec<f64>> {
        let mut data = Vec::with_capacity(alphas.len() * n);
        for &a in alphas {
            data.extend((0..n).map(|j| T::from_f64(b[j] + a * (x[j] - b[j]))));
        }
        let mut shape = vec![alphas.len()];
        shape.extend_from_slice(image.shape());
        let mut g = Graph::<T>::new(Mode::Eval);
        let input = g.leaf(Tensor::new(shape, data)?, grads.is_some())?;
        let out = f(&mut g, input)?;
        let values: Vec<f64> = g.value(out).to_f64_vec();
        if values.len() != alphas.len() {
            return Err(Error::Shape(format!("attributed function returned {} values for {} inputs", values.len(), alphas.len())));
        }
        if let Some(acc) = grads.as_deref_mut() {
            let total = g.sum(out)?;
            let gr = g.backward(total)?;
            let gx = gr.get(input).expect("input gradient");
            for row in gx.data().chunks(n) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v.as_f64();
                }
            }
        }
        Ok(values)
    };

    let mut acc = vec![0.0f64; n];
    let alphas = path_points(opts.steps, opts.rule);
    for part in alphas.chunks(opts.chunk.max(1)) {
        eval(part, &mut Some(&mut acc))?;
    }
    let ends = eval(&[0.0, 1.0], &mut None)?;
    let delta = ends[1] - ends[0];
    let values: Vec<f64> = (0..n).map(|j| (x[j] - b[j]) * acc[j] / opts.steps as f64).collect();
    let gap = (values.iter().sum::<f64>() - delta).abs();
    Ok((values, delta, gap))
}

/// Label-head output `target_class` of `model` for a batch, in eval mode.
pub fn class_output<T: Float>(model: &DannModel<T>, target_class: usize, output: IgOutput) -> impl Fn(&mut Graph<T>, Var) -> Result<Var> + '_ {
    move |g: &mut Graph<T>, x: Var| {
        let bound = model.bind(g, false)?;
        let f = model.extract_features(g, &bound, x)?;
        let logits = model.label_logits(g, &bound, f)?;
        let scores = match output {
            IgOutput::Probability => g.softmax(logits)?,
            IgOutput::Logit => logits,
        };
        let n = g.shape(scores)[0];
        let c = model.config().num_classes;
        let mut pick = vec![T::zero(); n * c];
        for i in 0..n {
            pick[i * c + target_class] = T::one();
        }
        let pick = g.constant(Tensor::new(vec![n, c], pick)?)?;
        let masked = g.mul(scores, pick)?;
        let col = g.constant(Tensor::full(&[c, 1], T::one()))?;
        Ok(g.matmul(masked, col)?)
    }
}

/// Integrated Gradients of one class output of `model` for a C×H×W image.
pub fn integrated_gradients<T: Float>(
    model: &DannModel<T>,
    image: &Tensor<T>,
    baseline: &Tensor<T>,
    target_class: usize,
    opts: &IgOptions,
) -> Result<AttributionMap> {
    let [c, h, w] = model.config().input_shape;
    if image.shape() != [c, h, w] {
        return Err(Error::Shape(format!("model expects a {c}×{h}×{w} image, got {:?}", image.shape())));
    }
    if target_class >= model.config().num_classes {
        return Err(Error::LabelOutOfRange {
            row: 0,
            label: target_class,
            classes: model.config().num_classes,
        });
    }
    let (values, delta, gap) = integrated_gradients_fn(class_output(model, target_class, opts.output), image, baseline, opts)?;
    Ok(AttributionMap {
        shape: image.shape().to_vec(),
        values,
        input_ref: String::new(),
        target_class,
        steps: opts.steps,
        output_delta: delta,
        completeness_gap: gap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Grayscale,
    Overlay,
}

/// A rendered map; `all_zero` flags a map with no signal.
pub struct Rendered {
    pub image: image::DynamicImage,
    pub all_zero: bool,
}

/// Channel sum divided by its largest magnitude, in [−1, 1].
fn signed_plane(map: &AttributionMap) -> Result<(Vec<f64>, usize, usize, bool)> {
    if map.shape.len() != 3 {
        return Err(Error::Shape(format!("attribution map must be C×H×W, got {:?}", map.shape)));
    }
    let (c, h, w) = (map.shape[0], map.shape[1], map.shape[2]);
    let plane = h * w;
    let s: Vec<f64> = (0..plane).map(|j| (0..c).map(|k| map.values[k * plane + j]).sum()).collect();
    let m = s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m == 0.0 {
        return Ok((vec![0.0; plane], h, w, true));
    }
    Ok((s.into_iter().map(|v| v / m).collect(), h, w, false))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale: 0.5 + 0.5·s, so positive is white and negative black.
/// Overlay: gray blended toward red (+) or blue (−) by |s|, then mixed
/// 50/50 with the underlying image.
pub fn render_attribution(map: &AttributionMap, mode: RenderMode, underlying: Option<&[f32]>) -> Result<Rendered> {
    let (s, h, w, all_zero) = signed_plane(map)?;
    let image = match mode {
        RenderMode::Grayscale => {
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(0.5 + 0.5 * s[y as usize * w + x as usize])]));
            image::DynamicImage::ImageLuma8(img)
        }
        RenderMode::Overlay => {
            let under = underlying.ok_or_else(|| Error::Config("overlay rendering needs the underlying image".into()))?;
            if under.len() != 3 * h * w {
                return Err(Error::Shape(format!("underlying image has {} values, expected 3×{h}×{w}", under.len())));
            }
            let plane = h * w;
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let j = y as usize * w + x as usize;
                let v = s[j];
                let tint = if v >= 0.0 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
                let a = v.abs();
                Rgb([0, 1, 2].map(|c| {
                    let color = 0.5 + (tint[c] - 0.5) * a;
                    to_u8(0.5 * under[c * plane + j] as f64 + 0.5 * color)
                }))
            });
            image::DynamicImage::ImageRgb8(img)
        }
    };
    Ok(Rendered { image, all_zero })
}

const RAW_MAGIC: &[u8; 4] = b"GRLT";

/// Flat little-endian f64 values after a header of magic, dtype, rank and dims.
pub fn write_raw(map: &AttributionMap, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(RAW_MAGIC)?;
    out.write_all(&[DType::F64.code(), map.shape.len() as u8])?;
    for &d in &map.shape {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(map.values.len() * 8);
    f64::write_le(&map.values, &mut buf);
    out.write_all(&buf)
}

/// Reads back a tensor written by [`write_raw`].
pub fn read_raw(mut input: impl Read) -> Result<Tensor<f64>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("raw attribution: {e}")))?;
    let bad = || Error::Checkpoint("malformed raw attribution file".into());
    if bytes.len() < 6 || &bytes[..4] != RAW_MAGIC || bytes[4] != DType::F64.code() {
        return Err(bad());
    }
    let ndim = bytes[5] as usize;
    let dims_end = 6 + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(bad());
    }
    let shape: Vec<usize> = bytes[6..dims_end]
        .chunks(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let data = &bytes[dims_end..];
    if data.len() != shape.iter().product::<usize>() * 8 {
        return Err(bad());
    }
    Ok(Tensor::new(shape, f64::read_le(data))?)
}
