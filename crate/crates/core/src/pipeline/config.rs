use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{IouCriterion, DEFAULT_THRESHOLDS};
use crate::hiding::{DropoutMode, FeatureFill, PatchChoice};
use crate::numerics::ConvNetConfig;
use crate::synth::{
    dataset_info, generate_image_dataset, generate_sequence_dataset, DatasetInfo, ImageDataset,
    SequenceDataset, SyntheticImageSpec, SyntheticSequenceSpec,
};

pub const DEFAULT_IMAGE_THRESHOLD: f64 = 0.2;
pub const DEFAULT_TEMPORAL_THRESHOLD: f64 = 0.5;

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetRef {
    Dir {
        path: PathBuf,
    },
    SyntheticImages {
        #[serde(default)]
        spec: SyntheticImageSpec,
        n_train: usize,
        n_val: usize,
        #[serde(default)]
        seed: u64,
    },
    SyntheticSequences {
        #[serde(default)]
        spec: SyntheticSequenceSpec,
        n_train: usize,
        n_val: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Images(ImageDataset),
    Sequences(SequenceDataset),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Image,
    Temporal,
}

impl DatasetRef {
    pub fn task(&self) -> Result<Task> {
        Ok(match self {
            DatasetRef::SyntheticImages { .. } => Task::Image,
            DatasetRef::SyntheticSequences { .. } => Task::Temporal,
            DatasetRef::Dir { path } => match dataset_info(path)? {
                DatasetInfo::Images { .. } => Task::Image,
                DatasetInfo::Sequences { .. } => Task::Temporal,
            },
        })
    }

    pub fn load(&self) -> Result<Dataset> {
        Ok(match self {
            DatasetRef::Dir { path } => match dataset_info(path)? {
                DatasetInfo::Images { .. } => Dataset::Images(ImageDataset::load(path)?),
                DatasetInfo::Sequences { .. } => Dataset::Sequences(SequenceDataset::load(path)?),
            },
            DatasetRef::SyntheticImages {
                spec,
                n_train,
                n_val,
                seed,
            } => Dataset::Images(generate_image_dataset(spec, *n_train, *n_val, *seed)?),
            DatasetRef::SyntheticSequences {
                spec,
                n_train,
                n_val,
                seed,
            } => Dataset::Sequences(generate_sequence_dataset(spec, *n_train, *n_val, *seed)?),
        })
    }

    /// Resolves relative directory paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        if let DatasetRef::Dir { path } = self {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
}

impl Dataset {
    pub fn task(&self) -> Task {
        match self {
            Dataset::Images(_) => Task::Image,
            Dataset::Sequences(_) => Task::Temporal,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Dataset::Images(d) => d.train.first().map_or(3, |s| s.image.shape()[0]),
            Dataset::Sequences(d) => d.spec.dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Dataset::Images(d) => d.spec.num_classes,
            Dataset::Sequences(d) => d.spec.num_classes,
        }
    }

    pub fn train_inputs(&self) -> Vec<(u64, usize, &crate::numerics::Tensor)> {
        match self {
            Dataset::Images(d) => d.train.iter().map(|s| (s.id, s.label, &s.image)).collect(),
            Dataset::Sequences(d) => d.train.iter().map(|s| (s.id, s.label, &s.features)).collect(),
        }
    }

    pub fn val_inputs(&self) -> Vec<(u64, usize, &crate::numerics::Tensor)> {
        match self {
            Dataset::Images(d) => d.val.iter().map(|s| (s.id, s.label, &s.image)).collect(),
            Dataset::Sequences(d) => d.val.iter().map(|s| (s.id, s.label, &s.features)).collect(),
        }
    }
}

/// Value written into hidden pixels or frames.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillConfig {
    /// Per-channel mean of the training split.
    #[default]
    Mean,
    Zero,
    Value(Vec<f64>),
}

impl FillConfig {
    pub fn resolve(&self, mean: &[f64]) -> Vec<f64> {
        match self {
            FillConfig::Mean => mean.to_vec(),
            FillConfig::Zero => vec![0.0; mean.len()],
            FillConfig::Value(v) => v.clone(),
        }
    }
}

fn default_dropout_mode() -> DropoutMode {
    DropoutMode::TrainOnly
}

/// Training-time input transform of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HidingConfig {
    #[default]
    None,
    Image {
        patch_size: usize,
        hide_prob: f64,
        #[serde(default)]
        fill: FillConfig,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        mixed_sizes: Vec<PatchChoice>,
    },
    FeatureMap {
        /// Index of the conv layer whose (post-ReLU) output is hidden.
        layer: usize,
        patch_size: usize,
        hide_prob: f64,
        #[serde(default)]
        fill: FeatureFill,
    },
    Dropout {
        rate: f64,
        #[serde(default = "default_dropout_mode")]
        mode: DropoutMode,
    },
    Temporal {
        segment: usize,
        hide_prob: f64,
        #[serde(default)]
        fill: FillConfig,
    },
}

impl HidingConfig {
    pub fn label(&self) -> &'static str {
        match self {
            HidingConfig::None => "none",
            HidingConfig::Image { .. } => "image",
            HidingConfig::FeatureMap { .. } => "feature_map",
            HidingConfig::Dropout { .. } => "dropout",
            HidingConfig::Temporal { .. } => "temporal",
        }
    }
}

fn default_name() -> String {
    "run".into()
}
fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_decay_at() -> f64 {
    2.0 / 3.0
}
fn default_decay() -> f64 {
    0.1
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_true() -> bool {
    true
}
fn default_thresholds() -> Vec<f64> {
    DEFAULT_THRESHOLDS.to_vec()
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetRef,
    pub network: ConvNetConfig,
    #[serde(default)]
    pub hiding: HidingConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Fraction of the epochs after which the learning rate is multiplied by `lr_decay`.
    #[serde(default = "default_decay_at")]
    pub lr_decay_at: f64,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Fraction of the CAM maximum; defaults to 0.2 for images, 0.5 for sequences.
    #[serde(default)]
    pub cam_threshold: Option<f64>,
    /// Subtract the training mean from every input before the network.
    #[serde(default = "default_true")]
    pub center_inputs: bool,
    #[serde(default)]
    pub temporal_iou: IouCriterion,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            cfg.dataset.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn cam_threshold_for(&self, task: Task) -> f64 {
        self.cam_threshold.unwrap_or(match task {
            Task::Image => DEFAULT_IMAGE_THRESHOLD,
            Task::Temporal => DEFAULT_TEMPORAL_THRESHOLD,
        })
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let boundary = (self.lr_decay_at * self.epochs as f64).ceil() as usize;
        if epoch >= boundary && self.lr_decay_at < 1.0 {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    /// Field-level checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) || !(self.lr_decay > 0.0) {
            return bad("lr_decay_at", "must be in [0, 1] with lr_decay > 0".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "need at least one seed".into());
        }
        if let Some(t) = self.cam_threshold {
            if !(t > 0.0 && t < 1.0) {
                return bad("cam_threshold", format!("must be in (0, 1), got {t}"));
            }
        }
        if self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("thresholds", "IoU thresholds must be in [0, 1]".into());
        }
        self.network
            .validate()
            .map_err(|e| Error::Config(format!("network: {e}")))?;
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        match &self.hiding {
            HidingConfig::None => {}
            HidingConfig::Image {
                patch_size,
                hide_prob,
                ..
            } => {
                if *patch_size == 0 || !prob(*hide_prob) {
                    return bad("hiding", "patch_size >= 1 and hide_prob in [0, 1] required".into());
                }
            }
            HidingConfig::FeatureMap {
                layer,
                patch_size,
                hide_prob,
                ..
            } => {
                if *layer >= self.network.layers.len() {
                    return bad("hiding.layer", format!("network has {} layers", self.network.layers.len()));
                }
                if *patch_size == 0 || !prob(*hide_prob) {
                    return bad("hiding", "patch_size >= 1 and hide_prob in [0, 1] required".into());
                }
            }
            HidingConfig::Dropout { rate, .. } => {
                if !(0.0..1.0).contains(rate) {
                    return bad("hiding.rate", format!("must be in [0, 1), got {rate}"));
                }
            }
            HidingConfig::Temporal {
                segment, hide_prob, ..
            } => {
                if *segment == 0 || !prob(*hide_prob) {
                    return bad("hiding", "segment >= 1 and hide_prob in [0, 1] required".into());
                }
            }
        }
        Ok(())
    }

    /// Checks that need the loaded dataset.
    pub fn validate_against(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        let task = data.task();
        if self.network.in_channels != data.channels() {
            return Err(Error::Config(format!(
                "network.in_channels: {} but the dataset has {} channels",
                self.network.in_channels,
                data.channels()
            )));
        }
        if self.network.num_classes != data.num_classes() {
            return Err(Error::Config(format!(
                "network.num_classes: {} but the dataset has {} classes",
                self.network.num_classes,
                data.num_classes()
            )));
        }
        match (&self.hiding, task) {
            (HidingConfig::Temporal { .. }, Task::Image) => {
                Err(Error::Config("hiding: temporal hiding needs a sequence dataset".into()))
            }
            (HidingConfig::Image { .. } | HidingConfig::FeatureMap { .. }, Task::Temporal) => Err(
                Error::Config("hiding: image/feature-map hiding needs an image dataset".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(json)))
    }
}
