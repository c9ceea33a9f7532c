//! Attention CNN with a Gaussian fuzzy classification head.
//!
//! The backbone is a stack of 3x3 conv / relu stages with optional
//! squeeze-excitation, followed by a channel-attention gate, a spatial-
//! attention gate, a pooled dense projection to the head feature, and the
//! fuzzy head. Widths, strides, and head dimension are configurable so the
//! same code runs a desk-scale network in tests.
//!
//! Parameters live in a flat named registry with a fixed registration
//! order; the checkpoint format serializes them in that order.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::tensor::{Element, Padding, Tensor};

/// Hard floor for fuzzy head widths.
pub const SIGMA_MIN: f64 = 1e-3;

/// Checkpoint container format version.
pub const CHECKPOINT_VERSION: u32 = 1;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DRGRADE\0";

/// One backbone stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub channels: usize,
    /// Spatial stride, 1 or 2.
    pub stride: usize,
    pub se: bool,
    /// Squeeze-excitation bottleneck divisor; must divide `channels`.
    pub se_reduction: usize,
}

/// Architecture description: input geometry, stages, head feature size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub stages: Vec<StageConfig>,
    /// Dimension of the fuzzy head feature.
    pub head_dim: usize,
}

impl BackboneConfig {
    /// Desk-scale default: four SE stages halving resolution each time.
    pub fn desk_default() -> Self {
        BackboneConfig {
            input_h: 64,
            input_w: 64,
            stages: [16, 32, 64, 128]
                .into_iter()
                .map(|channels| StageConfig { channels, stride: 2, se: true, se_reduction: 4 })
                .collect(),
            head_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0 || self.input_w == 0 {
            return Err(Error::config("backbone: zero input extent".to_string()));
        }
        if self.stages.is_empty() {
            return Err(Error::config("backbone: at least one stage required".to_string()));
        }
        if self.head_dim == 0 {
            return Err(Error::config("backbone: head_dim must be at least 1".to_string()));
        }
        let mut stride_product = 1usize;
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 {
                return Err(Error::config(format!("stage {i}: zero channels")));
            }
            if s.stride != 1 && s.stride != 2 {
                return Err(Error::config(format!(
                    "stage {i}: stride {} not in {{1, 2}}",
                    s.stride
                )));
            }
            if s.se {
                if s.se_reduction == 0 || s.channels % s.se_reduction != 0 {
                    return Err(Error::config(format!(
                        "stage {i}: reduction {} does not divide {} channels",
                        s.se_reduction, s.channels
                    )));
                }
            }
            stride_product *= s.stride;
        }
        if stride_product > self.input_h.min(self.input_w) {
            return Err(Error::config(format!(
                "stride product {stride_product} exceeds input extent {}x{}",
                self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    /// Spatial extent of the final feature map.
    pub fn output_hw(&self) -> (usize, usize) {
        let mut h = self.input_h;
        let mut w = self.input_w;
        for s in &self.stages {
            h = h.div_ceil(s.stride);
            w = w.div_ceil(s.stride);
        }
        (h, w)
    }

    pub fn output_channels(&self) -> usize {
        self.stages.last().expect("validated non-empty").channels
    }

    /// Canonical text form stored in checkpoints.
    pub fn to_text(&self, num_classes: usize) -> String {
        let mut out = format!("v1\ninput={}x{}\n", self.input_h, self.input_w);
        for s in &self.stages {
            out.push_str(&format!(
                "stage={},{},{},{}\n",
                s.channels,
                s.stride,
                if s.se { 1 } else { 0 },
                s.se_reduction
            ));
        }
        out.push_str(&format!("head_dim={}\nclasses={num_classes}\n", self.head_dim));
        out
    }

    /// Parse the canonical text form back. Inverse of [`Self::to_text`].
    pub fn from_text(text: &str) -> Result<(Self, usize)> {
        let bad = |line: &str| Error::config(format!("architecture text: bad line {line:?}"));
        let mut lines = text.lines();
        if lines.next() != Some("v1") {
            return Err(Error::config("architecture text: missing v1 header".to_string()));
        }
        let mut input = None;
        let mut stages = Vec::new();
        let mut head_dim = None;
        let mut classes = None;
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| bad(line))?;
            match key {
                "input" => {
                    let (h, w) = value.split_once('x').ok_or_else(|| bad(line))?;
                    input = Some((
                        h.parse().map_err(|_| bad(line))?,
                        w.parse().map_err(|_| bad(line))?,
                    ));
                }
                "stage" => {
                    let parts: Vec<&str> = value.split(',').collect();
                    if parts.len() != 4 {
                        return Err(bad(line));
                    }
                    stages.push(StageConfig {
                        channels: parts[0].parse().map_err(|_| bad(line))?,
                        stride: parts[1].parse().map_err(|_| bad(line))?,
                        se: match parts[2] {
                            "1" => true,
                            "0" => false,
                            _ => return Err(bad(line)),
                        },
                        se_reduction: parts[3].parse().map_err(|_| bad(line))?,
                    });
                }
                "head_dim" => head_dim = Some(value.parse().map_err(|_| bad(line))?),
                "classes" => classes = Some(value.parse().map_err(|_| bad(line))?),
                _ => return Err(bad(line)),
            }
        }
        let (input_h, input_w) =
            input.ok_or_else(|| Error::config("architecture text: missing input".to_string()))?;
        let cfg = BackboneConfig {
            input_h,
            input_w,
            stages,
            head_dim: head_dim
                .ok_or_else(|| Error::config("architecture text: missing head_dim".to_string()))?,
        };
        let k = classes
            .ok_or_else(|| Error::config("architecture text: missing classes".to_string()))?;
        cfg.validate()?;
        Ok((cfg, k))
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
}

enum InitKind {
    /// He-uniform with the given fan-in.
    Fan(usize),
    Zero,
    /// Uniform in [-0.5, 0.5].
    Centroid,
    /// Constant chosen so the effective sigma starts at 1.
    SigmaRaw,
}

fn param_specs(cfg: &BackboneConfig, num_classes: usize) -> Vec<(String, Vec<usize>, InitKind)> {
    let mut specs = Vec::new();
    let mut in_c = 3usize;
    for (i, s) in cfg.stages.iter().enumerate() {
        specs.push((
            format!("stage{i}.conv.weight"),
            vec![s.channels, in_c, 3, 3],
            InitKind::Fan(in_c * 9),
        ));
        specs.push((format!("stage{i}.conv.bias"), vec![s.channels], InitKind::Zero));
        if s.se {
            let mid = s.channels / s.se_reduction;
            specs.push((
                format!("stage{i}.se.w1"),
                vec![s.channels, mid],
                InitKind::Fan(s.channels),
            ));
            specs.push((format!("stage{i}.se.w2"), vec![mid, s.channels], InitKind::Fan(mid)));
        }
        in_c = s.channels;
    }
    let c = cfg.output_channels();
    specs.push(("attn.channel.wm".to_string(), vec![c, c], InitKind::Fan(c)));
    specs.push(("attn.channel.wn".to_string(), vec![c, c], InitKind::Fan(c)));
    specs.push(("attn.spatial.kernel".to_string(), vec![1, 2, 7, 7], InitKind::Fan(2 * 49)));
    specs.push(("head.proj.weight".to_string(), vec![c, cfg.head_dim], InitKind::Fan(c)));
    specs.push(("head.proj.bias".to_string(), vec![cfg.head_dim], InitKind::Zero));
    specs.push((
        "head.centroids".to_string(),
        vec![num_classes, cfg.head_dim],
        InitKind::Centroid,
    ));
    specs.push(("head.sigma_raw".to_string(), vec![num_classes], InitKind::SigmaRaw));
    specs
}

/// The full network: configuration plus the ordered parameter registry.
#[derive(Debug, Clone)]
pub struct Model<E: Element> {
    pub cfg: BackboneConfig,
    pub num_classes: usize,
    params: Vec<Param<E>>,
    by_name: HashMap<String, usize>,
}

/// Outputs of one forward pass, with the refined feature map retained for
/// gradient-based localization.
pub struct ForwardPass<E: Element> {
    /// Softmax-normalized class probabilities, `[n, k]`.
    pub probs: Tensor<E>,
    /// Unnormalized Gaussian memberships in (0, 1], `[n, k]`.
    pub memberships: Tensor<E>,
    /// Pre-softmax scores `-d^2 / (2 sigma^2)`, `[n, k]`.
    pub logits: Tensor<E>,
    /// Head feature vectors, `[n, d]`.
    pub features: Tensor<E>,
    /// Post-attention map F', `[n, c, h, w]`; gradients accumulate here
    /// during backward, which is what the localization pass reads.
    pub refined: Tensor<E>,
    /// Pre-attention backbone output, `[n, c, h, w]`.
    pub backbone: Tensor<E>,
}

impl<E: Element> Model<E> {
    /// Fresh model with seeded initialization.
    pub fn init(cfg: BackboneConfig, num_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes {num_classes} must be at least 2"
            )));
        }
        let sigma_raw_init = (0.999f64.exp() - 1.0).ln();
        let mut params = Vec::new();
        let mut by_name = HashMap::new();
        for (ordinal, (name, shape, kind)) in
            param_specs(&cfg, num_classes).into_iter().enumerate()
        {
            let len: usize = shape.iter().product();
            let mut rng = stream(seed, Domain::Init, ordinal as u64, 0);
            let data: Vec<E> = match kind {
                InitKind::Zero => vec![E::zero(); len],
                InitKind::Fan(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..len)
                        .map(|_| E::from_f64(rng.random_range(-bound..bound)))
                        .collect()
                }
                InitKind::Centroid => {
                    (0..len).map(|_| E::from_f64(rng.random_range(-0.5..0.5))).collect()
                }
                InitKind::SigmaRaw => vec![E::from_f64(sigma_raw_init); len],
            };
            by_name.insert(name.clone(), params.len());
            params.push(Param { name, value: Tensor::param(data, &shape)? });
        }
        Ok(Model { cfg, num_classes, params, by_name })
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn num_scalar_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.by_name.get(name).map(|&i| &self.params[i].value)
    }

    /// Replace one parameter; the value must be a gradient-tracking leaf
    /// of the same shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let &i = self
            .by_name
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if value.shape() != self.params[i].value.shape() {
            return Err(Error::shape(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.shape(),
                self.params[i].value.shape()
            )));
        }
        if !value.tracks_grad() {
            return Err(Error::config(format!("parameter {name} must track gradients")));
        }
        self.params[i].value = value;
        Ok(())
    }

    /// Copy of this model with every parameter replaced in registry order.
    pub fn with_params(&self, values: &[Tensor<E>]) -> Result<Self> {
        if values.len() != self.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        let mut out = self.clone();
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.params[i].value.shape() {
                return Err(Error::shape(format!(
                    "parameter {}: shape {:?} does not match {:?}",
                    self.params[i].name,
                    v.shape(),
                    self.params[i].value.shape()
                )));
            }
            out.params[i].value = v.clone();
        }
        Ok(out)
    }

    /// Precision-cast copy (parameters stay gradient-tracking leaves).
    pub fn cast<T: Element>(&self) -> Model<T> {
        Model {
            cfg: self.cfg.clone(),
            num_classes: self.num_classes,
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast_param::<T>() })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    fn p(&self, name: &str) -> &Tensor<E> {
        self.param(name).expect("registered parameter")
    }

    /// Backbone stages only: conv / relu / optional SE per stage.
    pub fn backbone_forward(&self, input: &Tensor<E>) -> Result<Tensor<E>> {
        let shape = input.shape();
        if shape.len() != 4
            || shape[1] != 3
            || shape[2] != self.cfg.input_h
            || shape[3] != self.cfg.input_w
        {
            return Err(Error::shape(format!(
                "backbone input {:?}, expected [n, 3, {}, {}]",
                shape, self.cfg.input_h, self.cfg.input_w
            )));
        }
        input.assert_finite("backbone input")?;
        let mut f = input.clone();
        for (i, s) in self.cfg.stages.iter().enumerate() {
            f = f
                .conv2d(self.p(&format!("stage{i}.conv.weight")), s.stride, Padding::Same)?
                .add_channel_bias(self.p(&format!("stage{i}.conv.bias")))?
                .relu();
            if s.se {
                f = se_block(
                    &f,
                    self.p(&format!("stage{i}.se.w1")),
                    self.p(&format!("stage{i}.se.w2")),
                )?;
            }
        }
        Ok(f)
    }

    /// Channel then spatial attention over the backbone output.
    pub fn refine(&self, f: &Tensor<E>) -> Result<Tensor<E>> {
        let mc = channel_attention(f, self.p("attn.channel.wm"), self.p("attn.channel.wn"))?;
        let gated = f.scale_channels(&mc)?;
        let ms = spatial_attention(&gated, self.p("attn.spatial.kernel"))?;
        gated.scale_spatial(&ms)
    }

    /// Full pass: backbone, attention refinement, pooled projection, fuzzy
    /// head.
    pub fn forward(&self, input: &Tensor<E>) -> Result<ForwardPass<E>> {
        let backbone = self.backbone_forward(input)?;
        let refined = self.refine(&backbone)?;
        let pooled = refined.global_avg_pool()?;
        let features = pooled.dense(self.p("head.proj.weight"), self.p("head.proj.bias"))?;
        let fuzzy = fuzzy_head(&features, self.p("head.centroids"), self.p("head.sigma_raw"))?;
        Ok(ForwardPass {
            probs: fuzzy.probs,
            memberships: fuzzy.memberships,
            logits: fuzzy.logits,
            features,
            refined,
            backbone,
        })
    }

    /// Drop accumulated gradients on every parameter.
    pub fn clear_grads(&self) {
        for p in &self.params {
            p.value.clear_grad();
        }
    }
}

/// Squeeze-excitation: gate each channel by a bottleneck MLP of its
/// globally pooled descriptor. Zero weights give a uniform 0.5 gate.
pub fn se_block<E: Element>(
    f: &Tensor<E>,
    w1: &Tensor<E>,
    w2: &Tensor<E>,
) -> Result<Tensor<E>> {
    let z = f.global_avg_pool()?;
    let s = z.matmul(w1)?.relu().matmul(w2)?.sigmoid();
    f.scale_channels(&s)
}

/// Channel-attention gate from pooled average and max descriptors.
pub fn channel_attention<E: Element>(
    f: &Tensor<E>,
    wm: &Tensor<E>,
    wn: &Tensor<E>,
) -> Result<Tensor<E>> {
    let avg = f.global_avg_pool()?.matmul(wm)?;
    let max = f.global_max_pool()?.matmul(wn)?;
    Ok(avg.add(&max)?.sigmoid())
}

/// Spatial-attention gate: per-position mean/max across channels, a 7x7
/// same-padded conv down to one plane, and a sigmoid.
pub fn spatial_attention<E: Element>(f: &Tensor<E>, kernel: &Tensor<E>) -> Result<Tensor<E>> {
    if kernel.shape() != [1, 2, 7, 7] {
        return Err(Error::shape(format!(
            "spatial attention kernel {:?}, expected [1, 2, 7, 7]",
            kernel.shape()
        )));
    }
    let pooled = f.channel_pool()?;
    Ok(pooled.conv2d(kernel, 1, Padding::Same)?.sigmoid())
}

/// Fuzzy head outputs.
pub struct FuzzyOut<E: Element> {
    pub memberships: Tensor<E>,
    pub probs: Tensor<E>,
    pub logits: Tensor<E>,
}

/// Gaussian memberships and their softmax normalization.
///
/// `mu[n, k] = exp(-|x_n - c_k|^2 / (2 sigma_k^2))` with
/// `sigma_k = SIGMA_MIN + softplus(sigma_raw_k)`; probabilities are the
/// row softmax of the log-memberships, so large distances cannot
/// underflow the normalization.
pub fn fuzzy_head<E: Element>(
    x: &Tensor<E>,
    centroids: &Tensor<E>,
    sigma_raw: &Tensor<E>,
) -> Result<FuzzyOut<E>> {
    x.assert_finite("fuzzy head input")?;
    let d2 = x.pairwise_sqdist(centroids)?;
    let sigma = sigma_raw.softplus().add_scalar(SIGMA_MIN);
    let inv_two_sigma_sq = sigma.mul(&sigma)?.mul_scalar(2.0).recip();
    let logits = d2.scale_cols(&inv_two_sigma_sq)?.neg();
    let probs = logits.softmax_rows()?;
    let memberships = logits.exp();
    Ok(FuzzyOut { memberships, probs, logits })
}

/// Training metadata stored beside the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
}

impl CheckpointMeta {
    fn to_text(&self) -> String {
        let mut out = format!("epoch={}\nseed={}\n", self.epoch, self.seed);
        for (name, value) in &self.metrics {
            out.push_str(&format!("metric:{name}={value}\n"));
        }
        out
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut meta = CheckpointMeta::default();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::data(format!("checkpoint metadata: bad line {line:?}")))?;
            match key {
                "epoch" => meta.epoch = value.parse().map_err(|_| bad_meta(line))?,
                "seed" => meta.seed = value.parse().map_err(|_| bad_meta(line))?,
                _ => {
                    let name = key
                        .strip_prefix("metric:")
                        .ok_or_else(|| bad_meta(line))?;
                    meta.metrics
                        .push((name.to_string(), value.parse().map_err(|_| bad_meta(line))?));
                }
            }
        }
        Ok(meta)
    }
}

fn bad_meta(line: &str) -> Error {
    Error::data(format!("checkpoint metadata: bad line {line:?}"))
}

/// Serialize a model: magic, version, architecture text, parameter blobs
/// in registration order (f32 little-endian), then metadata text.
pub fn save_checkpoint(model: &Model<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg_text = model.cfg.to_text(model.num_classes);
    out.extend_from_slice(&(cfg_text.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    for p in &model.params {
        out.extend_from_slice(&(p.value.len() as u64).to_le_bytes());
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta_text = meta.to_text();
    out.extend_from_slice(&(meta_text.len() as u64).to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let slice = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::data("checkpoint: truncated file".to_string()))?;
        self.pos += n;
        Ok(slice)
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<&'a str> {
        let len = self.u64_le()? as usize;
        std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::data("checkpoint: non-UTF-8 text block".to_string()))
    }
}

/// Load a checkpoint, rebuilding the model from its stored architecture.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader { bytes: &bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::data(format!(
            "{}: not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32_le()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "{}: checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let cfg_text = r.text()?.to_string();
    let (cfg, num_classes) = BackboneConfig::from_text(&cfg_text)?;
    let mut params = Vec::new();
    let mut by_name = HashMap::new();
    for (name, shape, _) in param_specs(&cfg, num_classes) {
        let want: usize = shape.iter().product();
        let len = r.u64_le()? as usize;
        if len != want {
            return Err(Error::data(format!(
                "checkpoint parameter {name}: {len} values, expected {want}"
            )));
        }
        let raw = r.take(len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        by_name.insert(name.clone(), params.len());
        params.push(Param { name, value: Tensor::param(data, &shape)? });
    }
    let meta = CheckpointMeta::from_text(r.text()?)?;
    Ok((Model { cfg, num_classes, params, by_name }, meta))
}

/// Load and verify the stored architecture matches `cfg` / `num_classes`.
pub fn load_checkpoint_expecting(
    path: &Path,
    cfg: &BackboneConfig,
    num_classes: usize,
) -> Result<(Model<f32>, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    if &model.cfg != cfg || model.num_classes != num_classes {
        return Err(Error::config(format!(
            "{}: checkpoint architecture does not match the configured one\nstored:\n{}\nconfigured:\n{}",
            path.display(),
            model.cfg.to_text(model.num_classes),
            cfg.to_text(num_classes)
        )));
    }
    Ok((model, meta))
}
