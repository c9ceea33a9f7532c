//! Optimization: smoothed focal loss, AdamW, plateau scheduling, and the
//! epoch loop with history export.

use std::path::PathBuf;

use rand::seq::SliceRandom;

use crate::dataset::{DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::image::{mixup, sample_mixup_lambda, AugmentConfig, FundusImage};
use crate::model::{save_checkpoint, CheckpointMeta, Model};
use crate::rng::{stream, Domain};
use crate::tensor::{finite_diff_check, Element, Tensor};

/// Focal loss with label smoothing.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Per-class weights, mean-normalized; one entry per merged class.
    pub alpha: Vec<f64>,
    /// Focusing exponent; 0 recovers cross-entropy.
    pub gamma: f64,
    /// Label-smoothing mass in [0, 1).
    pub epsilon: f64,
}

impl LossConfig {
    pub fn uniform(num_classes: usize) -> Self {
        LossConfig { alpha: vec![1.0; num_classes], gamma: 2.0, epsilon: 0.1 }
    }

    /// Inverse-class-frequency weights normalized to mean 1. Classes
    /// absent from `labels` are weighted as if they had one sample.
    pub fn inverse_frequency(labels: &[usize], num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("loss: zero classes".to_string()));
        }
        let mut counts = vec![0usize; num_classes];
        for &l in labels {
            if l >= num_classes {
                return Err(Error::data(format!(
                    "loss: label {l} outside 0..{num_classes}"
                )));
            }
            counts[l] += 1;
        }
        let raw: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
        let mean = raw.iter().sum::<f64>() / num_classes as f64;
        Ok(LossConfig {
            alpha: raw.into_iter().map(|w| w / mean).collect(),
            gamma: 2.0,
            epsilon: 0.1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.alpha.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::config(format!(
                "loss: alpha weights must be positive, got {:?}",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config(format!("loss: gamma {} must be >= 0", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config(format!(
                "loss: smoothing epsilon {} outside [0, 1)",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Blend a probability vector toward uniform: `(1 - eps) y + eps / K`.
/// Expects `y` to sum to 1; the output then does too.
pub fn smooth_labels(y: &[f32], epsilon: f64) -> Vec<f32> {
    let k = y.len().max(1);
    let floor = (epsilon / k as f64) as f32;
    let keep = (1.0 - epsilon) as f32;
    y.iter().map(|&v| keep * v + floor).collect()
}

fn check_rows_sum_to_one<E: Element>(t: &Tensor<E>, what: &str) -> Result<()> {
    let k = t.shape()[1];
    for (row, chunk) in t.data().chunks_exact(k).enumerate() {
        let s: f64 = chunk.iter().map(|&v| v.to_f64()).sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::numeric(format!("{what}: row {row} sums to {s}, expected 1")));
        }
    }
    Ok(())
}

/// Mean focal loss over a batch:
/// `-(1/N) sum_nk alpha_k (1 - p_nk)^gamma t_nk log(p_nk)`, with the
/// probability clamped to 1e-12 inside the log. Differentiable through
/// `probs`; `targets` and the class weights enter as constants.
pub fn focal_loss<E: Element>(
    probs: &Tensor<E>,
    targets: &Tensor<E>,
    cfg: &LossConfig,
) -> Result<Tensor<E>> {
    cfg.validate()?;
    if probs.shape().len() != 2 || probs.shape() != targets.shape() {
        return Err(Error::shape(format!(
            "focal loss: probs {:?} vs targets {:?}",
            probs.shape(),
            targets.shape()
        )));
    }
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    if k != cfg.alpha.len() {
        return Err(Error::shape(format!(
            "focal loss: {k} classes but {} alpha weights",
            cfg.alpha.len()
        )));
    }
    check_rows_sum_to_one(probs, "focal loss probs")?;
    check_rows_sum_to_one(targets, "focal loss targets")?;
    let weights: Vec<E> = targets
        .data()
        .iter()
        .enumerate()
        .map(|(i, &t)| E::from_f64(cfg.alpha[i % k] * t.to_f64()))
        .collect();
    let w = Tensor::new(weights, probs.shape())?;
    let modulator = probs.one_minus().pow_const(cfg.gamma);
    let logp = probs.ln_clamped(1e-12);
    Ok(modulator.mul(&logp)?.mul(&w)?.sum_all().mul_scalar(-1.0 / n as f64))
}

/// AdamW with decoupled weight decay. Moments are kept and updated in
/// f64 regardless of the parameter precision.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new<E: Element>(model: &Model<E>, lr: f64, weight_decay: f64) -> Self {
        let moments: Vec<Vec<f64>> =
            model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Optimizer {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: moments.clone(),
            v: moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter; reads the accumulated gradients
    /// and replaces each parameter with a fresh leaf.
    pub fn step<E: Element>(&mut self, model: &mut Model<E>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..model.params().len() {
            let (name, shape, data, grad) = {
                let p = &model.params()[i];
                let g = p.value.grad().ok_or_else(|| {
                    Error::numeric(format!("optimizer: parameter {} has no gradient", p.name))
                })?;
                (p.name.clone(), p.value.shape().to_vec(), p.value.to_vec(), g)
            };
            let mut next = vec![E::zero(); data.len()];
            for j in 0..data.len() {
                let g = grad[j].to_f64();
                if !g.is_finite() {
                    return Err(Error::numeric(format!(
                        "optimizer: non-finite gradient in parameter {name}"
                    )));
                }
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                let p = data[j].to_f64();
                let decayed = p - self.lr * self.weight_decay * p;
                next[j] = E::from_f64(decayed - self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
            model.set_param(&name, Tensor::param(next, &shape)?)?;
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Absolute improvement below this does not reset the wait counter.
    pub threshold: f64,
    best: f64,
    wait: usize,
}

impl Default for Scheduler {
    fn default() -> Self {
        Scheduler {
            factor: 0.5,
            patience: 5,
            min_lr: 1e-6,
            threshold: 1e-4,
            best: f64::INFINITY,
            wait: 0,
        }
    }
}

impl Scheduler {
    /// Feed one monitored value; returns the learning rate to use next.
    pub fn step(&mut self, lr: f64, monitored: f64) -> f64 {
        if self.best - monitored > self.threshold {
            self.best = monitored;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,train_acc,val_acc,lr\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc, r.lr
            ));
        }
        out
    }
}

/// Materialized train/val samples, already preprocessed to the model's
/// input geometry.
pub struct TrainSet {
    pub train: Vec<(FundusImage, usize)>,
    pub val: Vec<(FundusImage, usize)>,
    pub num_classes: usize,
}

impl TrainSet {
    /// Load every train/val sample through `preprocess`. Test-split and
    /// unassigned samples are skipped.
    pub fn load(
        index: &DatasetIndex,
        preprocess: &dyn Fn(FundusImage) -> Result<FundusImage>,
    ) -> Result<Self> {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, s) in index.samples.iter().enumerate() {
            let dest = match s.split {
                Some(Split::Train) => &mut train,
                Some(Split::Val) => &mut val,
                _ => continue,
            };
            dest.push((preprocess(s.load_image()?)?, index.merged_label(i)));
        }
        Ok(TrainSet { train, val, num_classes: index.merge.num_classes() })
    }
}

/// Everything the epoch loop needs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Beta concentration for mixup; `None` disables mixing.
    pub mixup_alpha: Option<f64>,
    pub scheduler: Scheduler,
    pub seed: u64,
    /// When set, `final.ckpt` and `best.ckpt` are written here.
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            loss: LossConfig::uniform(num_classes),
            augment: AugmentConfig::default(),
            mixup_alpha: None,
            scheduler: Scheduler::default(),
            seed,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train: batch_size must be at least 1".to_string()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("train: lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "train: weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if let Some(a) = self.mixup_alpha {
            if !(a > 0.0) {
                return Err(Error::config(format!("train: mixup alpha {a} must be positive")));
            }
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

/// Final and best-validation models plus the per-epoch history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub best: Model<f32>,
    /// 1-based epoch of the best validation loss; 0 when no epochs ran.
    pub best_epoch: usize,
    pub history: TrainHistory,
}

fn one_hot(label: usize, k: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; k];
    y[label] = 1.0;
    y
}

fn stack_batch(pixels: &[Vec<f32>], h: usize, w: usize) -> Result<Tensor<f32>> {
    let n = pixels.len();
    let mut data = Vec::with_capacity(n * 3 * h * w);
    for p in pixels {
        data.extend_from_slice(p);
    }
    Tensor::new(data, &[n, 3, h, w])
}

fn accuracy(probs: &Tensor<f32>, labels: &[usize]) -> f64 {
    let k = probs.shape()[1];
    let mut hits = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let chunk = &probs.data()[row * k..(row + 1) * k];
        let mut arg = 0usize;
        for (j, &v) in chunk.iter().enumerate() {
            if v > chunk[arg] {
                arg = j;
            }
        }
        if arg == label {
            hits += 1;
        }
    }
    hits as f64 / labels.len().max(1) as f64
}

/// Forward one split without augmentation; mean loss and accuracy.
fn evaluate_split(
    model: &Model<f32>,
    samples: &[(FundusImage, usize)],
    loss_cfg: &LossConfig,
    batch_size: usize,
    k: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    for batch in samples.chunks(batch_size) {
        let pixels: Vec<Vec<f32>> = batch.iter().map(|(img, _)| img.to_chw()).collect();
        let labels: Vec<usize> = batch.iter().map(|&(_, l)| l).collect();
        let (h, w) = (batch[0].0.height, batch[0].0.width);
        let x = stack_batch(&pixels, h, w)?;
        let out = model.forward(&x)?;
        let targets: Vec<f32> = labels
            .iter()
            .flat_map(|&l| smooth_labels(&one_hot(l, k), loss_cfg.epsilon))
            .collect();
        let t = Tensor::new(targets, &[batch.len(), k])?;
        let loss = focal_loss(&out.probs, &t, loss_cfg)?;
        loss_sum += loss.item().to_f64() * batch.len() as f64;
        acc_sum += accuracy(&out.probs, &labels) * batch.len() as f64;
    }
    let n = samples.len() as f64;
    Ok((loss_sum / n, acc_sum / n))
}

/// Run the full optimization loop. Per epoch: seeded shuffle, augmented
/// (and optionally mixed) mini-batches, focal loss on smoothed targets,
/// AdamW updates, a clean-validation pass, and a scheduler step. All
/// configured epochs run; there is no early stop.
pub fn train(model: Model<f32>, data: &TrainSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(model, data, cfg, &mut |_| {})
}

pub fn train_with_progress(
    mut model: Model<f32>,
    data: &TrainSet,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs > 0 && (data.train.is_empty() || data.val.is_empty()) {
        return Err(Error::data(format!(
            "train: empty split (train {}, val {})",
            data.train.len(),
            data.val.len()
        )));
    }
    let k = data.num_classes;
    if k != model.num_classes {
        return Err(Error::config(format!(
            "train: dataset has {k} classes, model expects {}",
            model.num_classes
        )));
    }
    for (img, label) in data.train.iter().chain(&data.val) {
        if img.height != model.cfg.input_h || img.width != model.cfg.input_w {
            return Err(Error::shape(format!(
                "train: sample {} is {}x{}, model expects {}x{}",
                img.source_id, img.height, img.width, model.cfg.input_h, model.cfg.input_w
            )));
        }
        if *label >= k {
            return Err(Error::data(format!("train: label {label} outside 0..{k}")));
        }
    }

    let mut opt = Optimizer::new(&model, cfg.lr, cfg.weight_decay);
    let mut sched = cfg.scheduler.clone();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Model<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut stream(cfg.seed, Domain::Shuffle, epoch as u64, 0));

        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for (batch_no, batch_ids) in order.chunks(cfg.batch_size).enumerate() {
            let context = |e: Error| {
                Error::numeric(format!("epoch {epoch} batch {batch_no}: {e}"))
            };
            // Augment each sample on a stream keyed by its stable dataset
            // position, so neither shuffle order nor worker count matters.
            let mut pixels = Vec::with_capacity(batch_ids.len());
            let mut targets = Vec::with_capacity(batch_ids.len());
            let mut labels = Vec::with_capacity(batch_ids.len());
            for &id in batch_ids {
                let (img, label) = &data.train[id];
                let mut rng = stream(cfg.seed, Domain::Augment, epoch as u64, id as u64);
                let aug = img.augment(&cfg.augment, &mut rng).map_err(context)?;
                pixels.push(aug.to_chw());
                targets.push(one_hot(*label, k));
                labels.push(*label);
            }
            if let Some(alpha) = cfg.mixup_alpha {
                let lambdas: Vec<f64> = batch_ids
                    .iter()
                    .enumerate()
                    .map(|(slot, _)| {
                        let global = batch_no * cfg.batch_size + slot;
                        let mut rng =
                            stream(cfg.seed, Domain::Mixup, epoch as u64, global as u64);
                        sample_mixup_lambda(alpha, &mut rng)
                    })
                    .collect::<Result<_>>()?;
                let mut mixed = Vec::with_capacity(pixels.len());
                for i in 0..pixels.len() {
                    let j = (i + 1) % pixels.len();
                    mixed.push(
                        mixup(&pixels[i], &targets[i], &pixels[j], &targets[j], lambdas[i])
                            .map_err(context)?,
                    );
                }
                for (i, (x, y)) in mixed.into_iter().enumerate() {
                    pixels[i] = x;
                    targets[i] = y;
                }
            }
            let flat_targets: Vec<f32> = targets
                .iter()
                .flat_map(|y| smooth_labels(y, cfg.loss.epsilon))
                .collect();

            let x = stack_batch(&pixels, model.cfg.input_h, model.cfg.input_w)?;
            let t = Tensor::new(flat_targets, &[batch_ids.len(), k])?;
            let out = model.forward(&x).map_err(context)?;
            let loss = focal_loss(&out.probs, &t, &cfg.loss).map_err(context)?;
            let loss_value = loss.item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::numeric(format!(
                    "epoch {epoch} batch {batch_no}: loss is {loss_value}"
                )));
            }
            loss.backward().map_err(context)?;
            opt.step(&mut model).map_err(context)?;

            loss_sum += loss_value * batch_ids.len() as f64;
            acc_sum += accuracy(&out.probs, &labels) * batch_ids.len() as f64;
        }

        let n = data.train.len() as f64;
        let (val_loss, val_acc) =
            evaluate_split(&model, &data.val, &cfg.loss, cfg.batch_size, k)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_loss,
            train_acc: acc_sum / n,
            val_acc,
            lr: opt.lr,
        };
        opt.lr = sched.step(opt.lr, val_loss);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
        }
        progress(&record);
        history.records.push(record);
    }

    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model.clone()),
    };
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        let meta_for = |epoch: usize| {
            let metrics = history
                .records
                .iter()
                .find(|r| r.epoch == epoch)
                .map(|r| {
                    vec![
                        ("train_loss".to_string(), r.train_loss),
                        ("val_loss".to_string(), r.val_loss),
                        ("train_acc".to_string(), r.train_acc),
                        ("val_acc".to_string(), r.val_acc),
                    ]
                })
                .unwrap_or_default();
            CheckpointMeta { epoch: epoch as u64, seed: cfg.seed, metrics }
        };
        save_checkpoint(&model, &meta_for(cfg.epochs), &dir.join("final.ckpt"))?;
        save_checkpoint(&best_model, &meta_for(best_epoch), &dir.join("best.ckpt"))?;
    }
    Ok(TrainOutcome { model, best: best_model, best_epoch, history })
}

/// Recompute one clean batch in f64 and compare the analytic loss
/// gradient of the named parameters against central finite differences.
/// Returns the worst relative error.
pub fn verify_batch_gradients(
    model: &Model<f32>,
    samples: &[(FundusImage, usize)],
    loss_cfg: &LossConfig,
    param_names: &[&str],
    fd_eps: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("gradient check: empty batch".to_string()));
    }
    let k = model.num_classes;
    let m64 = model.cast::<f64>();
    let pixels: Vec<Vec<f32>> = samples.iter().map(|(img, _)| img.to_chw()).collect();
    let (h, w) = (samples[0].0.height, samples[0].0.width);
    let x_data: Vec<f64> =
        pixels.iter().flat_map(|p| p.iter().map(|&v| v as f64)).collect();
    let x = Tensor::<f64>::new(x_data, &[samples.len(), 3, h, w])?;
    let targets: Vec<f64> = samples
        .iter()
        .flat_map(|&(_, l)| smooth_labels(&one_hot(l, k), loss_cfg.epsilon))
        .map(|v| v as f64)
        .collect();
    let t = Tensor::<f64>::new(targets, &[samples.len(), k])?;

    let picked: Vec<Tensor<f64>> = param_names
        .iter()
        .map(|name| {
            m64.param(name)
                .cloned()
                .ok_or_else(|| Error::config(format!("gradient check: unknown parameter {name}")))
        })
        .collect::<Result<_>>()?;
    let names: Vec<String> = param_names.iter().map(|s| s.to_string()).collect();
    finite_diff_check(
        |ts| {
            let mut m = m64.clone();
            for (name, tensor) in names.iter().zip(ts) {
                m.set_param(name, tensor.clone())?;
            }
            let out = m.forward(&x)?;
            focal_loss(&out.probs, &t, loss_cfg)
        },
        &picked,
        fd_eps,
    )
}
