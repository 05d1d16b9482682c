use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{ContrastiveConfig, EncoderConfig};
use crate::datasets::SynthConfig;
use crate::diffusion::DiffusionTrainConfig;
use crate::error::{Error, Result};
use crate::nn::LarsConfig;
use crate::transforms::{DissolveConfig, DissolveMethod, NonShiftConfig, ShiftKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Folder,
    Npz,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Folder root or archive path; unused for synthetic data.
    pub path: String,
    /// NPZ class labels treated as normal.
    pub normal_labels: Vec<i64>,
    /// Side length every image is resampled to; 0 keeps the native size.
    pub image_size: usize,
    /// Share of anomalies mixed into the training split.
    pub contamination: f64,
    /// Fraction of the training split the denoiser sees.
    pub diffusion_fraction: f64,
    pub subsample_seed: u64,
    pub synth: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: String::new(),
            normal_labels: vec![0],
            image_size: 0,
            contamination: 0.0,
            diffusion_fraction: 1.0,
            subsample_seed: 0,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Lars,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep the epoch with the lowest mean training loss.
    TrainLoss,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiaTrainConfig {
    pub epochs: usize,
    /// Images drawn without replacement per epoch.
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub min_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    pub selection: Selection,
    /// Train with the dissolved branch; `false` gives the CSI-equivalent objective.
    pub include_dissolved: bool,
    /// Diffusion checkpoint directory; empty means `<run>/checkpoints/denoiser`.
    pub denoiser: String,
}

impl Default for DiaTrainConfig {
    fn default() -> Self {
        let lars = LarsConfig::default();
        Self {
            epochs: 200,
            samples_per_epoch: 200,
            batch_size: 32,
            optimizer: OptimizerKind::Lars,
            lr: lars.lr,
            min_lr: 0.0,
            momentum: lars.momentum,
            weight_decay: lars.weight_decay,
            trust_coefficient: lars.trust_coefficient,
            selection: Selection::TrainLoss,
            include_dissolved: true,
            denoiser: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformsConfig {
    pub shift: ShiftKind,
    pub k: usize,
    pub nonshift: NonShiftConfig,
    pub dissolve: DissolveConfig,
}

impl Default for TransformsConfig {
    fn default() -> Self {
        Self {
            shift: ShiftKind::Rotate,
            k: 4,
            nonshift: NonShiftConfig::default(),
            dissolve: DissolveConfig::default(),
        }
    }
}

/// Backbone shape; channel and class counts follow the data and shift set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub width: usize,
    pub blocks: Vec<usize>,
    pub stem_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            width: e.width,
            blocks: e.blocks,
            stem_stride: e.stem_stride,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub diffusion: DiffusionTrainConfig,
    pub dia: DiaTrainConfig,
    pub transforms: TransformsConfig,
    pub contrastive: ContrastiveConfig,
    pub backbone: BackboneConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file without validating it, for callers that apply
    /// overrides first.
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Ok(toml::from_str(&fs::read_to_string(path)?)?)
    }

    /// Fully resolved configuration; every field is written.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// First 16 hex digits of the SHA-256 of [`Self::to_toml`].
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.diffusion.validate()?;
        self.contrastive.validate()?;
        self.transforms.nonshift.validate()?;
        let max_t = (self.transforms.dissolve.method == DissolveMethod::Diffusion)
            .then_some(self.diffusion.schedule.steps);
        self.transforms.dissolve.validate(max_t)?;
        self.dataset.synth.validate()?;
        let d = &self.dia;
        if d.epochs == 0 || d.samples_per_epoch == 0 || d.batch_size == 0 {
            return Err(Error::Config(
                "dia epochs, samples_per_epoch and batch_size must be positive".into(),
            ));
        }
        if !(d.lr > 0.0) || d.min_lr < 0.0 || d.min_lr > d.lr {
            return Err(Error::Config(format!(
                "dia learning rates lr={} min_lr={} are inconsistent",
                d.lr, d.min_lr
            )));
        }
        if !(0.0..1.0).contains(&self.dataset.contamination) {
            return Err(Error::Config(format!(
                "contamination {} outside [0, 1)",
                self.dataset.contamination
            )));
        }
        if !(self.dataset.diffusion_fraction > 0.0 && self.dataset.diffusion_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "diffusion_fraction {} outside (0, 1]",
                self.dataset.diffusion_fraction
            )));
        }
        if self.dataset.kind != DatasetKind::Synthetic && self.dataset.path.is_empty() {
            return Err(Error::Config("dataset.path is required for folder and npz data".into()));
        }
        crate::transforms::ShiftSet::new(self.transforms.shift, self.transforms.k)?;
        Ok(())
    }

    /// Applies `key=value` with a dotted key path; values are TOML literals,
    /// falling back to a bare string.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        self.with_overrides(&[assignment])
    }

    /// Applies every assignment before validating, so coupled keys such as
    /// `dataset.kind` and `dataset.path` can change together.
    pub fn with_overrides(&self, assignments: &[impl AsRef<str>]) -> Result<Self> {
        let pairs = assignments
            .iter()
            .map(|a| {
                let a = a.as_ref();
                let (key, raw) = a
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override {a:?} is not key=value")))?;
                Ok((key.trim().to_string(), parse_value(raw.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_values(&pairs)
    }

    pub fn with_value(&self, key: &str, value: toml::Value) -> Result<Self> {
        self.with_values(&[(key.to_string(), value)])
    }

    pub fn with_values(&self, assignments: &[(String, toml::Value)]) -> Result<Self> {
        let mut root = toml::Value::try_from(self)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        for (key, value) in assignments {
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot
                    .as_table_mut()
                    .and_then(|t| t.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
            }
            *slot = value.clone();
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| {
            let keys: Vec<&str> = assignments.iter().map(|(k, _)| k.as_str()).collect();
            Error::Config(format!("{}: {}", keys.join(", "), e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses a TOML literal (`3`, `0.5`, `[1, 2]`, `"x"`), else keeps the raw text.
pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Parses `key=[v1, v2, ...]` into a key and its candidate values.
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<toml::Value>)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep {spec:?} is not key=[values]")))?;
    match parse_value(raw.trim()) {
        toml::Value::Array(values) if !values.is_empty() => Ok((key.trim().to_string(), values)),
        _ => Err(Error::Config(format!("sweep {spec:?} needs a non-empty array"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.hash().unwrap(), ExperimentConfig::default().hash().unwrap());
    }

    #[test]
    fn defaults_echo_training_recipe() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.diffusion.lr, 8e-5);
        assert_eq!(cfg.diffusion.grad_accum, 2);
        assert_eq!(cfg.diffusion.ema_decay, 0.995);
        assert_eq!(cfg.dia.lr, 1e-3);
        assert_eq!(cfg.dia.batch_size, 32);
        assert_eq!(cfg.dia.samples_per_epoch, 200);
        assert_eq!(cfg.contrastive.gamma_cls, 1.0);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 3\n[dia]\nepochs = 5\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.dia.epochs, 5);
        assert_eq!(cfg.dia.batch_size, 32);
        assert!(ExperimentConfig::from_toml("[dia]\nepoch = 5\n").is_err());
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::default();
        let c = cfg.with_override("transforms.dissolve.t_low=100").unwrap();
        assert_eq!(c.transforms.dissolve.t_low, 100);
        let c = cfg.with_override("transforms.dissolve.method=gaussian").unwrap();
        assert_eq!(c.transforms.dissolve.method, DissolveMethod::Gaussian);
        assert_ne!(c.hash().unwrap(), cfg.hash().unwrap());
        let err = cfg.with_override("transforms.nope=1").unwrap_err();
        assert!(err.is_config_error());
        assert!(cfg.with_override("dia.epochs=\"many\"").unwrap_err().is_config_error());
        assert!(cfg.with_override("dia.epochs=0").is_err());
    }

    #[test]
    fn coupled_overrides_validate_together() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.with_override("dataset.kind=\"folder\"").is_err());
        let c = cfg
            .with_overrides(&["dataset.kind=\"folder\"", "dataset.path=\"data\""])
            .unwrap();
        assert_eq!(c.dataset.kind, DatasetKind::Folder);
    }

    #[test]
    fn sweeps() {
        let (k, v) = parse_sweep("transforms.dissolve.resolution=[32, 64]").unwrap();
        assert_eq!(k, "transforms.dissolve.resolution");
        assert_eq!(v.len(), 2);
        assert!(parse_sweep("seed=3").is_err());
        assert!(parse_sweep("seed=[]").is_err());
    }
}
