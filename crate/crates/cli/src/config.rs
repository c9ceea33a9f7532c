//! Run configuration: one TOML file covering dataset, preprocessing,
//! augmentation, model, loss, optimizer, and scheduler. Unknown keys are
//! rejected so typos fail loudly instead of silently using a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use drgrade_core::dataset::{ClassMergeMap, SyntheticSpec};
use drgrade_core::error::{Error, Result};
use drgrade_core::image::{AugmentConfig, FundusImage, GammaMode};
use drgrade_core::model::{BackboneConfig, StageConfig};
use drgrade_core::train::{LossConfig, Scheduler, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub preprocess: PreprocessSection,
    pub augment: AugmentSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub optimizer: OptimizerSection,
    pub scheduler: SchedulerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            epochs: 100,
            out_dir: PathBuf::from("run"),
            dataset: DatasetSection::default(),
            preprocess: PreprocessSection::default(),
            augment: AugmentSection::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            optimizer: OptimizerSection::default(),
            scheduler: SchedulerSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// "synthetic" or "csv".
    pub source: String,
    pub csv: Option<PathBuf>,
    pub images: Option<PathBuf>,
    /// Synthetic sample counts per raw grade 0..=4.
    pub per_class: [usize; 5],
    /// Synthetic square image side.
    pub image_size: usize,
    /// "five" keeps the raw grades; "three" merges to No DR / NPDR / PDR.
    pub class_merge: String,
    pub split: [f64; 3],
    /// Replicate minority train records up to the largest class.
    pub oversample: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: "synthetic".to_string(),
            csv: None,
            images: None,
            per_class: [40; 5],
            image_size: 64,
            class_merge: "five".to_string(),
            split: [0.70, 0.15, 0.15],
            oversample: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    pub crop_threshold: u8,
    /// Square side fed to the model.
    pub size: usize,
    pub clahe_tiles: [usize; 2],
    pub clahe_clip: f64,
    pub clahe_before_gamma: bool,
    /// A number applies a fixed exponent; "adaptive" targets mean 0.5.
    pub gamma: GammaSpec,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            crop_threshold: 10,
            size: 224,
            clahe_tiles: [8, 8],
            clahe_clip: 2.0,
            clahe_before_gamma: true,
            gamma: GammaSpec::Named("adaptive".to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSpec {
    Fixed(f64),
    Named(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotation_deg: f64,
    pub zoom: [f64; 2],
    pub brightness: [f64; 2],
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentConfig::default();
        AugmentSection {
            enabled: true,
            hflip_prob: d.hflip_prob,
            vflip_prob: d.vflip_prob,
            rotation_deg: d.rotation_deg,
            zoom: [d.zoom_range.0, d.zoom_range.1],
            brightness: [d.brightness_delta.0, d.brightness_delta.1],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub head_dim: usize,
    pub stage: Vec<StageSection>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = BackboneConfig::desk_default();
        ModelSection {
            head_dim: desk.head_dim,
            stage: desk.stages.iter().map(StageSection::from).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub channels: usize,
    pub stride: usize,
    pub se: bool,
    pub se_reduction: usize,
}

impl Default for StageSection {
    fn default() -> Self {
        StageSection { channels: 16, stride: 2, se: true, se_reduction: 4 }
    }
}

impl From<&StageConfig> for StageSection {
    fn from(s: &StageConfig) -> Self {
        StageSection {
            channels: s.channels,
            stride: s.stride,
            se: s.se,
            se_reduction: s.se_reduction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub gamma: f64,
    pub label_smoothing: f64,
    /// "uniform" or "inverse" (inverse train-class frequency).
    pub alpha_mode: String,
    /// Explicit per-class weights; overrides `alpha_mode` when present.
    pub alpha: Option<Vec<f64>>,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            gamma: 2.0,
            label_smoothing: 0.1,
            alpha_mode: "inverse".to_string(),
            alpha: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Beta concentration for mixup; 0 disables mixing.
    pub mixup_alpha: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 16,
            mixup_alpha: AugmentConfig::default().mixup_alpha,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        let d = Scheduler::default();
        SchedulerSection { factor: d.factor, patience: d.patience, min_lr: d.min_lr }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.source.as_str() {
            "synthetic" => {}
            "csv" => {
                let csv = self.dataset.csv.as_ref().ok_or_else(|| {
                    Error::config("dataset.csv is required when dataset.source = \"csv\"")
                })?;
                let images = self.dataset.images.as_ref().ok_or_else(|| {
                    Error::config("dataset.images is required when dataset.source = \"csv\"")
                })?;
                if !csv.is_file() {
                    return Err(Error::config(format!(
                        "dataset.csv: {} does not exist",
                        csv.display()
                    )));
                }
                if !images.is_dir() {
                    return Err(Error::config(format!(
                        "dataset.images: {} is not a directory",
                        images.display()
                    )));
                }
            }
            other => {
                return Err(Error::config(format!(
                    "dataset.source: unknown source {other:?} (expected \"synthetic\" or \"csv\")"
                )))
            }
        }
        self.merge_map()?;
        let s = self.dataset.split;
        if s.iter().any(|&f| !(f > 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "dataset.split: fractions {s:?} must be positive and sum to 1"
            )));
        }
        if self.preprocess.size < 8 {
            return Err(Error::config(format!(
                "preprocess.size: {} is below the minimum of 8",
                self.preprocess.size
            )));
        }
        if self.preprocess.clahe_tiles.iter().any(|&t| t == 0) {
            return Err(Error::config("preprocess.clahe_tiles: tile counts must be at least 1"));
        }
        if self.preprocess.clahe_clip < 1.0 {
            return Err(Error::config(format!(
                "preprocess.clahe_clip: {} is below the minimum of 1",
                self.preprocess.clahe_clip
            )));
        }
        self.gamma_mode()?;
        self.backbone().validate()?;
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config(format!(
                "optimizer.lr: {} must be positive",
                self.optimizer.lr
            )));
        }
        if self.optimizer.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size: must be at least 1"));
        }
        if self.optimizer.mixup_alpha < 0.0 {
            return Err(Error::config(format!(
                "optimizer.mixup_alpha: {} must be non-negative",
                self.optimizer.mixup_alpha
            )));
        }
        if self.loss.gamma < 0.0 {
            return Err(Error::config(format!(
                "loss.gamma: {} must be non-negative",
                self.loss.gamma
            )));
        }
        if !(0.0..1.0).contains(&self.loss.label_smoothing) {
            return Err(Error::config(format!(
                "loss.label_smoothing: {} must lie in [0, 1)",
                self.loss.label_smoothing
            )));
        }
        match self.loss.alpha_mode.as_str() {
            "uniform" | "inverse" => {}
            other => {
                return Err(Error::config(format!(
                    "loss.alpha_mode: unknown mode {other:?} (expected \"uniform\" or \"inverse\")"
                )))
            }
        }
        if let Some(alpha) = &self.loss.alpha {
            let k = self.merge_map()?.num_classes();
            if alpha.len() != k {
                return Err(Error::config(format!(
                    "loss.alpha: {} weights for {k} merged classes",
                    alpha.len()
                )));
            }
            if alpha.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::config("loss.alpha: weights must be positive"));
            }
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor <= 1.0) {
            return Err(Error::config(format!(
                "scheduler.factor: {} must lie in (0, 1]",
                self.scheduler.factor
            )));
        }
        if self.scheduler.min_lr < 0.0 {
            return Err(Error::config(format!(
                "scheduler.min_lr: {} must be non-negative",
                self.scheduler.min_lr
            )));
        }
        Ok(())
    }

    pub fn merge_map(&self) -> Result<ClassMergeMap> {
        match self.dataset.class_merge.as_str() {
            "five" => Ok(ClassMergeMap::identity()),
            "three" => Ok(ClassMergeMap::three_class()),
            other => Err(Error::config(format!(
                "dataset.class_merge: unknown mode {other:?} (expected \"five\" or \"three\")"
            ))),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            size: self.dataset.image_size,
            per_class: self.dataset.per_class,
            seed: self.seed,
            ..SyntheticSpec::default()
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            input_h: self.preprocess.size,
            input_w: self.preprocess.size,
            stages: self
                .model
                .stage
                .iter()
                .map(|s| StageConfig {
                    channels: s.channels,
                    stride: s.stride,
                    se: s.se,
                    se_reduction: s.se_reduction,
                })
                .collect(),
            head_dim: self.model.head_dim,
        }
    }

    pub fn gamma_mode(&self) -> Result<GammaMode> {
        match &self.preprocess.gamma {
            GammaSpec::Fixed(g) => Ok(GammaMode::Fixed(*g)),
            GammaSpec::Named(name) if name == "adaptive" => Ok(GammaMode::Adaptive),
            GammaSpec::Named(other) => Err(Error::config(format!(
                "preprocess.gamma: expected a number or \"adaptive\", got {other:?}"
            ))),
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        if !self.augment.enabled {
            return AugmentConfig::disabled();
        }
        let mut cfg = AugmentConfig::default();
        cfg.hflip_prob = self.augment.hflip_prob;
        cfg.vflip_prob = self.augment.vflip_prob;
        cfg.rotation_deg = self.augment.rotation_deg;
        cfg.zoom_range = (self.augment.zoom[0], self.augment.zoom[1]);
        cfg.brightness_delta = (self.augment.brightness[0], self.augment.brightness[1]);
        cfg.mixup_alpha = self.optimizer.mixup_alpha;
        cfg
    }

    /// The crop -> resize -> enhancement chain from the `[preprocess]`
    /// section, as a closure over owned copies of the parameters.
    pub fn preprocess_fn(&self) -> Result<impl Fn(FundusImage) -> Result<FundusImage>> {
        let threshold = self.preprocess.crop_threshold;
        let size = self.preprocess.size;
        let tiles = (self.preprocess.clahe_tiles[0], self.preprocess.clahe_tiles[1]);
        let clip = self.preprocess.clahe_clip;
        let clahe_first = self.preprocess.clahe_before_gamma;
        let gamma = self.gamma_mode()?;
        Ok(move |img: FundusImage| {
            let img = img.circular_crop(threshold).resize(size, size)?;
            if clahe_first {
                img.clahe(tiles, clip)?.gamma_correct(gamma)
            } else {
                img.gamma_correct(gamma)?.clahe(tiles, clip)
            }
        })
    }

    /// Loss weights for `num_classes` merged classes; `train_labels`
    /// feeds the inverse-frequency mode.
    pub fn loss_config(&self, train_labels: &[usize], num_classes: usize) -> Result<LossConfig> {
        let mut cfg = if let Some(alpha) = &self.loss.alpha {
            let mean = alpha.iter().sum::<f64>() / alpha.len() as f64;
            LossConfig {
                alpha: alpha.iter().map(|a| a / mean).collect(),
                gamma: self.loss.gamma,
                epsilon: self.loss.label_smoothing,
            }
        } else if self.loss.alpha_mode == "inverse" {
            LossConfig::inverse_frequency(train_labels, num_classes)?
        } else {
            LossConfig::uniform(num_classes)
        };
        cfg.gamma = self.loss.gamma;
        cfg.epsilon = self.loss.label_smoothing;
        Ok(cfg)
    }

    pub fn train_config(
        &self,
        train_labels: &[usize],
        num_classes: usize,
        out_dir: Option<PathBuf>,
    ) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(num_classes, self.seed);
        cfg.epochs = self.epochs;
        cfg.batch_size = self.optimizer.batch_size;
        cfg.lr = self.optimizer.lr;
        cfg.weight_decay = self.optimizer.weight_decay;
        cfg.loss = self.loss_config(train_labels, num_classes)?;
        cfg.augment = self.augment_config();
        cfg.mixup_alpha =
            (self.optimizer.mixup_alpha > 0.0).then_some(self.optimizer.mixup_alpha);
        cfg.scheduler.factor = self.scheduler.factor;
        cfg.scheduler.patience = self.scheduler.patience;
        cfg.scheduler.min_lr = self.scheduler.min_lr;
        cfg.out_dir = out_dir;
        Ok(cfg)
    }

    /// Canonical serialized form; its hash identifies the resolved run.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config serialize: {e}")))
    }
}
