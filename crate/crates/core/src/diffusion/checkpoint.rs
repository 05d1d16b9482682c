use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::ops::{dissolve_with, reverse_step_with, NoisePredictor};
use super::schedule::{DiffusionSchedule, ScheduleSpec};
use super::unet::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::nn::ParamStore;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const DENOISER_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps: usize,
    pub dataset_fingerprint: String,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl From<(usize, usize, usize)> for ImageShape {
    fn from((channels, height, width): (usize, usize, usize)) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }
}

impl ImageShape {
    pub fn tuple(self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenoiserManifest {
    format_version: u32,
    image_shape: ImageShape,
    schedule: ScheduleSpec,
    unet: UNetConfig,
    train: TrainMeta,
}

/// A trained ε-predictor with its EMA shadow and the schedule it was trained under.
pub struct DenoiserCheckpoint {
    unet_config: UNetConfig,
    image_shape: ImageShape,
    schedule_spec: ScheduleSpec,
    schedule: DiffusionSchedule,
    raw_params: ParamStore,
    raw: UNet,
    ema_params: ParamStore,
    ema: UNet,
    meta: TrainMeta,
}

impl DenoiserCheckpoint {
    /// Freshly initialized network; the EMA shadow starts equal to the raw weights.
    pub fn init(
        unet_config: &UNetConfig,
        image_shape: (usize, usize, usize),
        schedule_spec: ScheduleSpec,
        seed: u64,
    ) -> Result<Self> {
        let (c, h, w) = image_shape;
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("{c} channels; expected 1 or 3")));
        }
        unet_config.validate(h, w)?;
        let schedule = schedule_spec.build()?;
        let raw_params = ParamStore::new(seed, DType::F32, &Device::Cpu);
        let raw = UNet::new(&raw_params, unet_config, c)?;
        let ema_params = ParamStore::new(seed, DType::F32, &Device::Cpu);
        let ema = UNet::new(&ema_params, unet_config, c)?;
        ema_params.copy_from(&raw_params)?;
        Ok(Self {
            unet_config: unet_config.clone(),
            image_shape: image_shape.into(),
            schedule_spec,
            schedule,
            raw_params,
            raw,
            ema_params,
            ema,
            meta: TrainMeta {
                seed,
                ..Default::default()
            },
        })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        self.schedule_spec
    }

    pub fn unet_config(&self) -> &UNetConfig {
        &self.unet_config
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape.tuple()
    }

    pub fn meta(&self) -> &TrainMeta {
        &self.meta
    }

    pub(crate) fn meta_mut(&mut self) -> &mut TrainMeta {
        &mut self.meta
    }

    pub fn raw_params(&self) -> &ParamStore {
        &self.raw_params
    }

    pub fn ema_params(&self) -> &ParamStore {
        &self.ema_params
    }

    pub fn raw_net(&self) -> &UNet {
        &self.raw
    }

    /// The network used for inference: EMA weights or raw weights.
    pub fn net(&self, use_ema: bool) -> &UNet {
        if use_ema {
            &self.ema
        } else {
            &self.raw
        }
    }

    pub fn predictor(&self, use_ema: bool) -> impl NoisePredictor + '_ {
        let net = self.net(use_ema);
        move |x: &Tensor, t: &[usize]| Ok(net.forward(x, t)?.detach())
    }

    fn check_batch(&self, x: &ImageBatch) -> Result<()> {
        if x.image_shape() != self.image_shape() {
            return Err(Error::Shape(format!(
                "denoiser trained on {:?}, got images of {:?}",
                self.image_shape(),
                x.image_shape()
            )));
        }
        Ok(())
    }

    /// Dissolving transformation with this checkpoint; EMA weights unless `use_ema` is false.
    pub fn dissolve(&self, x: &ImageBatch, t: &[usize], use_ema: bool) -> Result<ImageBatch> {
        self.check_batch(x)?;
        dissolve_with(&self.predictor(use_ema), &self.schedule, x, t)
    }

    /// One ancestral step with the EMA weights.
    pub fn reverse_step(
        &self,
        x_t: &ImageBatch,
        t: usize,
        noise: Option<&ImageBatch>,
    ) -> Result<ImageBatch> {
        self.check_batch(x_t)?;
        reverse_step_with(&self.predictor(true), &self.schedule, x_t, t, noise)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = DenoiserManifest {
            format_version: DENOISER_FORMAT_VERSION,
            image_shape: self.image_shape,
            schedule: self.schedule_spec,
            unet: self.unet_config.clone(),
            train: self.meta.clone(),
        };
        fs::write(dir.join(MANIFEST_FILE), toml::to_string(&manifest)?)?;
        let mut tensors: HashMap<String, Tensor> = self.raw_params.snapshot("raw.")?;
        tensors.extend(self.ema_params.snapshot("ema.")?);
        candle_core::safetensors::save(&tensors, dir.join(WEIGHTS_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::MissingPath(manifest_path));
        }
        let text = fs::read_to_string(&manifest_path)?;
        check_format_version(&text, DENOISER_FORMAT_VERSION)?;
        let manifest: DenoiserManifest = toml::from_str(&text)?;
        let mut ckpt = Self::init(
            &manifest.unet,
            manifest.image_shape.tuple(),
            manifest.schedule,
            manifest.train.seed,
        )?;
        let weights_path = dir.join(WEIGHTS_FILE);
        if !weights_path.is_file() {
            return Err(Error::MissingPath(weights_path));
        }
        let tensors = candle_core::safetensors::load(&weights_path, &Device::Cpu)?;
        ckpt.raw_params.restore(&tensors, "raw.")?;
        ckpt.ema_params.restore(&tensors, "ema.")?;
        ckpt.meta = manifest.train;
        Ok(ckpt)
    }
}

/// Rejects a manifest whose `format_version` differs from `expected`.
pub(crate) fn check_format_version(manifest: &str, expected: u32) -> Result<()> {
    let value: toml::Table = toml::from_str(manifest)?;
    let found = value
        .get("format_version")
        .and_then(toml::Value::as_integer)
        .unwrap_or(-1);
    if found != expected as i64 {
        return Err(Error::ManifestVersion {
            found,
            expected: expected as i64,
        });
    }
    Ok(())
}

impl NoisePredictor for DenoiserCheckpoint {
    fn predict_noise(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        Ok(self.ema.forward(x, t)?.detach())
    }
}

/// Dissolving transformation `x̂_{t→0}`; see [`DenoiserCheckpoint::dissolve`].
pub fn dissolve(
    x: &ImageBatch,
    t: &[usize],
    denoiser: &DenoiserCheckpoint,
    use_ema: bool,
) -> Result<ImageBatch> {
    denoiser.dissolve(x, t, use_ema)
}

/// One reverse step `x_t → x_{t−1}`; see [`DenoiserCheckpoint::reverse_step`].
pub fn reverse_step(
    x_t: &ImageBatch,
    t: usize,
    denoiser: &DenoiserCheckpoint,
    noise: Option<&ImageBatch>,
) -> Result<ImageBatch> {
    denoiser.reverse_step(x_t, t, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ValueRange;

    fn tiny() -> UNetConfig {
        UNetConfig {
            base_width: 8,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            attention: true,
            max_groups: 4,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut ckpt = DenoiserCheckpoint::init(&tiny(), (1, 8, 8), ScheduleSpec::default(), 7).unwrap();
        ckpt.meta_mut().steps = 12;
        ckpt.meta_mut().dataset_fingerprint = "abc".into();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        ckpt.save(&a).unwrap();
        let loaded = DenoiserCheckpoint::load(&a).unwrap();
        assert_eq!(loaded.meta(), ckpt.meta());
        assert_eq!(loaded.schedule().alpha_bars(), ckpt.schedule().alpha_bars());
        loaded.save(&b).unwrap();
        for f in [MANIFEST_FILE, WEIGHTS_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = DenoiserCheckpoint::init(&tiny(), (1, 8, 8), ScheduleSpec::default(), 0).unwrap();
        ckpt.save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("format_version = 1", "format_version = 2");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            DenoiserCheckpoint::load(dir.path()),
            Err(Error::ManifestVersion { found: 2, .. })
        ));
    }

    #[test]
    fn dissolve_checks_shape_and_range() {
        let ckpt = DenoiserCheckpoint::init(&tiny(), (1, 8, 8), ScheduleSpec::default(), 0).unwrap();
        let x = ImageBatch::new((2, 1, 8, 8), vec![0.5; 128], ValueRange::Unit).unwrap();
        let out = dissolve(&x, &[100], &ckpt, true).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let wrong = ImageBatch::new((1, 1, 4, 4), vec![0.5; 16], ValueRange::Unit).unwrap();
        assert!(dissolve(&wrong, &[100], &ckpt, true).is_err());
        assert!(dissolve(&x, &[1001], &ckpt, true).is_err());
    }
}
