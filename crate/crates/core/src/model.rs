//! Dual-branch domain-adversarial network.
//!
//! A residual convolutional extractor produces a feature vector that feeds a
//! label head directly and a domain head through the gradient reversal layer.

use grla_tensor::{Float, Graph, Mode, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One residual stage: `blocks` basic blocks with `filters` channels, the first
/// of which downsamples by `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub filters: usize,
    pub blocks: usize,
    pub stride: usize,
}

impl StageSpec {
    pub const fn new(filters: usize, blocks: usize, stride: usize) -> Self {
        StageSpec { filters, blocks, stride }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DannConfig {
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub feature_dim: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub stages: Vec<StageSpec>,
    pub seed: u64,
}

impl Default for DannConfig {
    fn default() -> Self {
        DannConfig {
            input_shape: [3, 32, 32],
            feature_dim: 512,
            num_classes: 2,
            dropout_rate: 0.5,
            stages: vec![StageSpec::new(16, 2, 1), StageSpec::new(32, 2, 2)],
            seed: 0,
        }
    }
}

impl DannConfig {
    /// 32×32 inputs, 64-d features, two residual stages.
    pub fn desk() -> Self {
        DannConfig {
            feature_dim: 64,
            ..Default::default()
        }
    }

    /// Smallest extractor used for quick CPU experiments: one block per stage,
    /// both stages downsampling.
    pub fn compact() -> Self {
        DannConfig {
            feature_dim: 64,
            stages: vec![StageSpec::new(8, 1, 2), StageSpec::new(16, 1, 2)],
            ..Default::default()
        }
    }

    /// ResNet-50 stage layout (3, 4, 6, 3 blocks) at 224×224 with basic blocks.
    pub fn resnet_style() -> Self {
        DannConfig {
            input_shape: [3, 224, 224],
            feature_dim: 512,
            stages: vec![
                StageSpec::new(64, 3, 2),
                StageSpec::new(128, 4, 2),
                StageSpec::new(256, 6, 2),
                StageSpec::new(512, 3, 2),
            ],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input_shape {:?} has a zero dimension", self.input_shape)));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("extractor needs at least one stage".into()));
        }
        let (mut sh, mut sw) = (h, w);
        for (i, st) in self.stages.iter().enumerate() {
            if st.filters == 0 || st.blocks == 0 || st.stride == 0 {
                return Err(Error::Config(format!("stage {i}: filters, blocks and stride must be positive")));
            }
            if st.stride > sh || st.stride > sw {
                return Err(Error::Config(format!(
                    "stage {i}: spatial underflow, stride {} on a {sh}×{sw} map",
                    st.stride
                )));
            }
            sh = conv_out(sh, st.stride);
            sw = conv_out(sw, st.stride);
        }
        Ok(())
    }

    /// Spatial size after each stage.
    pub fn stage_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        self.stages
            .iter()
            .map(|st| {
                h = conv_out(h, st.stride);
                w = conv_out(w, st.stride);
                (h, w)
            })
            .collect()
    }
}

/// 3×3 convolution with padding 1.
fn conv_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Float> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    conv1: (usize, usize),
    conv2: (usize, usize),
    projection: Option<(usize, usize)>,
    stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    blocks: Vec<BlockLayout>,
    embed: (usize, usize),
    label_head: (usize, usize),
    domain_head: (usize, usize),
}

/// How the domain head sees the features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainPath {
    Reversal(f64),
    /// Plain identity; only meaningful for diagnostics of the reversal.
    Identity,
}

/// Parameters registered in a graph for one forward pass, in model order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub bound: Bound,
    pub features: Var,
    pub class_logits: Var,
    pub class_probs: Var,
    pub domain_logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DannModel<T: Float = f32> {
    config: DannConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

struct Builder<'a, T: Float> {
    params: Vec<Param<T>>,
    rng: &'a mut ChaCha8Rng,
    init: bool,
}

impl<T: Float> Builder<'_, T> {
    fn he(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let n: usize = shape.iter().product();
        let data = if self.init {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| T::from_f64(normal.sample(self.rng))).collect()
        } else {
            vec![T::zero(); n]
        };
        self.params.push(Param {
            name,
            value: Tensor::new(shape, data).expect("consistent shape"),
        });
        self.params.len() - 1
    }

    fn zeros(&mut self, name: String, len: usize) -> usize {
        self.params.push(Param {
            name,
            value: Tensor::zeros(&[len]),
        });
        self.params.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> (usize, usize) {
        let w = self.he(format!("{prefix}.weight"), vec![cout, cin, k, k], cin * k * k);
        let b = self.zeros(format!("{prefix}.bias"), cout);
        (w, b)
    }

    fn affine(&mut self, prefix: &str, fan_in: usize, out: usize) -> (usize, usize) {
        let w = self.he(format!("{prefix}.weight"), vec![fan_in, out], fan_in);
        let b = self.zeros(format!("{prefix}.bias"), out);
        (w, b)
    }
}

fn assemble<T: Float>(config: &DannConfig, rng: &mut ChaCha8Rng, init: bool) -> (Vec<Param<T>>, Layout) {
    let mut b = Builder {
        params: Vec::new(),
        rng,
        init,
    };
    let mut blocks = Vec::new();
    let mut cin = config.input_shape[0];
    for (si, st) in config.stages.iter().enumerate() {
        for bi in 0..st.blocks {
            let stride = if bi == 0 { st.stride } else { 1 };
            let prefix = format!("stage{si}.block{bi}");
            let conv1 = b.conv(&format!("{prefix}.conv1"), cin, st.filters, 3);
            let conv2 = b.conv(&format!("{prefix}.conv2"), st.filters, st.filters, 3);
            let projection = (cin != st.filters || stride != 1).then(|| b.conv(&format!("{prefix}.proj"), cin, st.filters, 1));
            blocks.push(BlockLayout {
                conv1,
                conv2,
                projection,
                stride,
            });
            cin = st.filters;
        }
    }
    let embed = b.affine("embed", cin, config.feature_dim);
    let label_head = b.affine("label_head", config.feature_dim, config.num_classes);
    let domain_head = b.affine("domain_head", config.feature_dim, 1);
    (
        b.params,
        Layout {
            blocks,
            embed,
            label_head,
            domain_head,
        },
    )
}

/// Closed-form parameter count of the architecture described by `config`.
pub fn parameter_count(config: &DannConfig) -> usize {
    let mut total = 0;
    let mut cin = config.input_shape[0];
    for st in &config.stages {
        for bi in 0..st.blocks {
            let stride = if bi == 0 { st.stride } else { 1 };
            let f = st.filters;
            total += cin * f * 9 + f + f * f * 9 + f;
            if cin != f || stride != 1 {
                total += cin * f + f;
            }
            cin = f;
        }
    }
    let fd = config.feature_dim;
    total + cin * fd + fd + fd * config.num_classes + config.num_classes + fd + 1
}

impl<T: Float> DannModel<T> {
    /// He-initialized (fan-in) weights, zero biases, deterministic in `config.seed`.
    pub fn build(config: DannConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (params, layout) = assemble(&config, &mut rng, true);
        Ok(DannModel { config, params, layout })
    }

    /// Reassembles a model from named tensors, e.g. read from a checkpoint.
    pub fn from_named(config: DannConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut params, layout) = assemble::<T>(&config, &mut rng, false);
        if named.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                params.len(),
                named.len()
            )));
        }
        for (p, (name, value)) in params.iter_mut().zip(named) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match stored {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    value.shape()
                )));
            }
            if !value.all_finite() {
                return Err(Error::Checkpoint(format!("parameter {name} holds non-finite values")));
            }
            p.value = value;
        }
        Ok(DannModel { config, params, layout })
    }

    pub fn config(&self) -> &DannConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Indices of the parameters that belong to the feature extractor.
    pub fn extractor_param_indices(&self) -> std::ops::Range<usize> {
        0..self.layout.label_head.0
    }

    pub fn label_head_param_indices(&self) -> std::ops::Range<usize> {
        self.layout.label_head.0..self.layout.domain_head.0
    }

    pub fn domain_head_param_indices(&self) -> std::ops::Range<usize> {
        self.layout.domain_head.0..self.params.len()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Registers every parameter as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect::<grla_tensor::Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.config.input_shape;
        if shape.len() != 4 || shape[0] == 0 || shape[1..] != [c, h, w] {
            return Err(Error::Shape(format!(
                "model expects N×{c}×{h}×{w} input with N >= 1, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Residual extractor, global pooling, affine embedding, relu, dropout.
    pub fn extract_features(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let v = &bound.vars;
        let mut h = x;
        for blk in &self.layout.blocks {
            let c1 = g.conv2d(h, v[blk.conv1.0], blk.stride, 1)?;
            let c1 = g.bias_add(c1, v[blk.conv1.1])?;
            let a1 = g.relu(c1)?;
            let c2 = g.conv2d(a1, v[blk.conv2.0], 1, 1)?;
            let c2 = g.bias_add(c2, v[blk.conv2.1])?;
            let skip = match blk.projection {
                Some((w, b)) => {
                    let p = g.conv2d(h, v[w], blk.stride, 0)?;
                    g.bias_add(p, v[b])?
                }
                None => h,
            };
            let sum = g.add(c2, skip)?;
            h = g.relu(sum)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let e = g.linear(pooled, v[self.layout.embed.0], v[self.layout.embed.1])?;
        let e = g.relu(e)?;
        Ok(g.dropout(e, self.config.dropout_rate)?)
    }

    pub fn label_logits(&self, g: &mut Graph<T>, bound: &Bound, features: Var) -> Result<Var> {
        let (w, b) = self.layout.label_head;
        Ok(g.linear(features, bound.vars[w], bound.vars[b])?)
    }

    /// Raw domain logit `z` of shape (N, 1), without any reversal.
    pub fn domain_logits(&self, g: &mut Graph<T>, bound: &Bound, features: Var) -> Result<Var> {
        let (w, b) = self.layout.domain_head;
        Ok(g.linear(features, bound.vars[w], bound.vars[b])?)
    }

    /// Full dual-branch pass; dropout follows the graph's mode.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, lambda: f64) -> Result<ForwardOutput> {
        self.forward_with(g, x, DomainPath::Reversal(lambda))
    }

    pub fn forward_with(&self, g: &mut Graph<T>, x: Var, path: DomainPath) -> Result<ForwardOutput> {
        let bound = self.bind(g, true)?;
        let features = self.extract_features(g, &bound, x)?;
        let class_logits = self.label_logits(g, &bound, features)?;
        let class_probs = g.softmax(class_logits)?;
        let domain_in = match path {
            DomainPath::Reversal(lambda) => g.gradient_reversal(features, lambda)?,
            DomainPath::Identity => features,
        };
        let domain_logits = self.domain_logits(g, &bound, domain_in)?;
        Ok(ForwardOutput {
            bound,
            features,
            class_logits,
            class_probs,
            domain_logits,
        })
    }

    /// Eval-mode class probabilities; nothing is differentiated.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut g = Graph::<T>::new(Mode::Eval);
        let bound = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let f = self.extract_features(&mut g, &bound, xv)?;
        let logits = self.label_logits(&mut g, &bound, f)?;
        let probs = g.softmax(logits)?;
        Ok(g.value(probs).clone())
    }

    /// Same parameters in another precision.
    pub fn cast<U: Float>(&self) -> DannModel<U> {
        DannModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Argmax of [`predict_proba`](Self::predict_proba); ties go to the lower class index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_proba(x)?))
    }
}

pub fn argmax_rows<T: Float>(probs: &Tensor<T>) -> Vec<usize> {
    let c = *probs.shape().last().unwrap_or(&1);
    probs
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
