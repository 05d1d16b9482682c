//! 18-layer residual encoder with a projection MLP and a shift-classification head.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Linear, Module};
use serde::{Deserialize, Serialize};

use crate::diffusion::check_format_version;
use crate::error::{validation, Error, Result};
use crate::image::{Image, ImageBatch, ValueRange};
use crate::nn::{linear, BatchNorm2d, Conv2d, ParamStore};
use crate::transforms::{ShiftKind, ViewBatch};

pub const ENCODER_FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.toml";
const WEIGHTS_FILE: &str = "weights.safetensors";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channels of the first stage; later stages double it.
    pub width: usize,
    /// Basic blocks per stage.
    pub blocks: Vec<usize>,
    /// Stride of the 3×3 stem convolution.
    pub stem_stride: usize,
    pub in_channels: usize,
    pub projection_dim: usize,
    /// Number of shift classes `K`.
    pub shift_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: vec![2, 2, 2, 2],
            stem_stride: 1,
            in_channels: 3,
            projection_dim: 128,
            shift_classes: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.blocks.is_empty() || self.blocks.contains(&0) {
            return Err(validation("encoder needs a width and at least one block per stage"));
        }
        if self.stem_stride == 0 || self.projection_dim == 0 || self.shift_classes == 0 {
            return Err(validation("stem stride, projection dim and shift classes must be positive"));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(validation(format!("{} input channels; expected 1 or 3", self.in_channels)));
        }
        Ok(())
    }

    /// Total convolution and linear layers counted the usual way (stem + blocks + head).
    pub fn depth(&self) -> usize {
        1 + 2 * self.blocks.iter().sum::<usize>() + 1
    }

    /// Width of the pooled backbone feature.
    pub fn feature_dim(&self) -> usize {
        self.width << (self.blocks.len() - 1)
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(p: &ParamStore, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(&p.pp("short_conv"), cin, cout, 1, stride, 0, false)?,
                BatchNorm2d::new(&p.pp("short_bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&p.pp("conv1"), cin, cout, 3, stride, 1, false)?,
            bn1: BatchNorm2d::new(&p.pp("bn1"), cout)?,
            conv2: Conv2d::new(&p.pp("conv2"), cout, cout, 3, 1, 1, false)?,
            bn2: BatchNorm2d::new(&p.pp("bn2"), cout)?,
            shortcut,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward_t(&self.conv2.forward(&h)?, train)?;
        let skip = match &self.shortcut {
            Some((c, bn)) => bn.forward_t(&c.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

pub struct EncoderOutput {
    /// Pooled backbone features `(N, feature_dim)`.
    pub features: Tensor,
    /// Projection output `(N, D)`.
    pub z: Tensor,
    /// Shift logits `(N, K)`.
    pub logits: Tensor,
}

pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    proj1: Linear,
    proj2: Linear,
    shift_head: Linear,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::new(seed, dtype, &Device::Cpu);
        let w = config.width;
        let stem = Conv2d::new(
            &params.pp("stem"),
            config.in_channels,
            w,
            3,
            config.stem_stride,
            1,
            false,
        )?;
        let stem_bn = BatchNorm2d::new(&params.pp("stem_bn"), w)?;
        let mut blocks = Vec::new();
        let mut cin = w;
        for (stage, &count) in config.blocks.iter().enumerate() {
            let cout = w << stage;
            for i in 0..count {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let p = params.pp(format!("stage{stage}.block{i}"));
                blocks.push(BasicBlock::new(&p, cin, cout, stride)?);
                cin = cout;
            }
        }
        let f = config.feature_dim();
        Ok(Self {
            proj1: linear(&params.pp("proj1"), f, f)?,
            proj2: linear(&params.pp("proj2"), f, config.projection_dim)?,
            shift_head: linear(&params.pp("shift_head"), f, config.shift_classes)?,
            config: config.clone(),
            params,
            stem,
            stem_bn,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<EncoderOutput> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        let x = x.to_dtype(self.params.dtype())?;
        let mut h = self.stem_bn.forward_t(&self.stem.forward(&x)?, train)?.relu()?;
        for b in &self.blocks {
            h = b.forward_t(&h, train)?;
        }
        let features = h.mean(D::Minus1)?.mean(D::Minus1)?;
        let z = self
            .proj2
            .forward(&self.proj1.forward(&features)?.relu()?)?;
        let logits = self.shift_head.forward(&features)?;
        Ok(EncoderOutput {
            features,
            z,
            logits,
        })
    }

    /// Evaluation-mode projections and logits for `images`, in chunks of `chunk`.
    pub fn embed(&self, images: &[Image], chunk: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut zs = Vec::with_capacity(images.len());
        let mut logits = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let batch = ImageBatch::from_images(part, ValueRange::Unit)?;
            let out = self.forward_t(&batch.to_tensor(&Device::Cpu)?, false)?;
            zs.extend(rows(&out.z)?);
            logits.extend(rows(&out.logits)?);
        }
        Ok((zs, logits))
    }
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Evaluation-mode `(z, logits)` for a view batch.
pub fn encode(model: &Encoder, views: &ViewBatch) -> Result<(Tensor, Tensor)> {
    let out = model.forward_t(&views.to_batch()?.to_tensor(&Device::Cpu)?, false)?;
    Ok((out.z.detach(), out.logits.detach()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub epoch: usize,
    pub train_loss: f64,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub shift_kind: Option<ShiftKind>,
    /// Whether the dissolved branch was used during training.
    pub dissolved_branch: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderManifest {
    format_version: u32,
    encoder: EncoderConfig,
    meta: EncoderMeta,
}

pub struct EncoderCheckpoint {
    pub encoder: Encoder,
    pub meta: EncoderMeta,
}

impl EncoderCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = EncoderManifest {
            format_version: ENCODER_FORMAT_VERSION,
            encoder: self.encoder.config().clone(),
            meta: self.meta.clone(),
        };
        fs::write(dir.join(MANIFEST_FILE), toml::to_string(&manifest)?)?;
        self.encoder.params().save(&dir.join(WEIGHTS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::MissingPath(manifest_path));
        }
        let text = fs::read_to_string(&manifest_path)?;
        check_format_version(&text, ENCODER_FORMAT_VERSION)?;
        let manifest: EncoderManifest = toml::from_str(&text)?;
        let encoder = Encoder::new(&manifest.encoder, manifest.meta.seed, DType::F32)?;
        let weights = dir.join(WEIGHTS_FILE);
        if !weights.is_file() {
            return Err(Error::MissingPath(weights));
        }
        let tensors = candle_core::safetensors::load(&weights, &Device::Cpu)?;
        encoder.params().restore(&tensors, "")?;
        Ok(Self {
            encoder,
            meta: manifest.meta,
        })
    }
}
