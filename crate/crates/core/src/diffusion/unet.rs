//! Small ε-prediction UNet: sinusoidal timestep embedding, residual blocks
//! with additive time conditioning, one self-attention block at the lowest
//! resolution.

use candle_core::{DType, Tensor, D};
use candle_nn::{Linear, Module};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::nn::{group_norm, linear, Conv2d, GroupNorm, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub attention: bool,
    pub max_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            channel_mults: vec![1, 2, 4],
            res_blocks: 2,
            attention: true,
            max_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.base_width == 0 || self.channel_mults.is_empty() || self.res_blocks == 0 {
            return Err(validation("UNet needs a width, at least one level and one block"));
        }
        if self.base_width % 2 != 0 {
            return Err(validation("UNet base width must be even (sinusoidal embedding)"));
        }
        let factor = 1usize << (self.channel_mults.len() - 1);
        if height % factor != 0 || width % factor != 0 {
            return Err(validation(format!(
                "image {height}x{width} not divisible by {factor} for {} levels",
                self.channel_mults.len()
            )));
        }
        Ok(())
    }
}

/// `[sin(t·f_i), cos(t·f_i)]` with geometric frequencies, as in DDPM.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let scale = (10000f64).ln() / (half.max(2) - 1) as f64;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let s = step as f64;
        data.extend((0..half).map(|i| (s * (-(i as f64) * scale).exp()).sin()));
        data.extend((0..half).map(|i| (s * (-(i as f64) * scale).exp()).cos()));
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(p: &ParamStore, cin: usize, cout: usize, tdim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(&p.pp("norm1"), cin, groups)?,
            conv1: Conv2d::same(&p.pp("conv1"), cin, cout, 3)?,
            time: linear(&p.pp("time"), tdim, cout)?,
            norm2: group_norm(&p.pp("norm2"), cout, groups)?,
            conv2: Conv2d::same(&p.pp("conv2"), cout, cout, 3)?,
            skip: if cin != cout {
                Some(Conv2d::same(&p.pp("skip"), cin, cout, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(&temb.silu()?)?;
        let h = h.broadcast_add(&t.unsqueeze(2)?.unsqueeze(3)?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let x = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + x)?)
    }
}

#[derive(Debug)]
struct Attention {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
}

impl Attention {
    fn new(p: &ParamStore, ch: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: group_norm(&p.pp("norm"), ch, groups)?,
            qkv: Conv2d::same(&p.pp("qkv"), ch, 3 * ch, 1)?,
            proj: Conv2d::same(&p.pp("proj"), ch, ch, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?.reshape((n, 3, c, h * w))?;
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?;
        let scores = (q.transpose(1, 2)?.contiguous()?.matmul(&k.contiguous()?)? / (c as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = v.contiguous()?.matmul(&attn.transpose(1, 2)?.contiguous()?)?;
        Ok((self.proj.forward(&out.reshape((n, c, h, w))?)? + x)?)
    }
}

#[derive(Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    resample: Option<Conv2d>,
}

/// The ε-predictor network.
#[derive(Debug)]
pub struct UNet {
    config: UNetConfig,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    downs: Vec<Level>,
    mid1: ResBlock,
    mid_attn: Option<Attention>,
    mid2: ResBlock,
    ups: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(p: &ParamStore, config: &UNetConfig, image_channels: usize) -> Result<Self> {
        let base = config.base_width;
        let tdim = 4 * base;
        let g = config.max_groups;
        let chs: Vec<usize> = config.channel_mults.iter().map(|m| m * base).collect();
        let levels = chs.len();

        let mut downs = Vec::with_capacity(levels);
        let mut cur = base;
        for (i, &ch) in chs.iter().enumerate() {
            let lp = p.pp(format!("down{i}"));
            let mut blocks = Vec::with_capacity(config.res_blocks);
            for j in 0..config.res_blocks {
                blocks.push(ResBlock::new(&lp.pp(format!("res{j}")), cur, ch, tdim, g)?);
                cur = ch;
            }
            let resample = if i + 1 < levels {
                Some(Conv2d::new(&lp.pp("down"), ch, ch, 3, 2, 1, true)?)
            } else {
                None
            };
            downs.push(Level { blocks, resample });
        }

        let mp = p.pp("mid");
        let mid1 = ResBlock::new(&mp.pp("res0"), cur, cur, tdim, g)?;
        let mid_attn = if config.attention {
            Some(Attention::new(&mp.pp("attn"), cur, g)?)
        } else {
            None
        };
        let mid2 = ResBlock::new(&mp.pp("res1"), cur, cur, tdim, g)?;

        let mut ups = Vec::with_capacity(levels);
        for (i, &ch) in chs.iter().enumerate().rev() {
            let lp = p.pp(format!("up{i}"));
            let mut blocks = Vec::with_capacity(config.res_blocks);
            for j in 0..config.res_blocks {
                blocks.push(ResBlock::new(&lp.pp(format!("res{j}")), cur + ch, ch, tdim, g)?);
                cur = ch;
            }
            let resample = if i > 0 {
                Some(Conv2d::same(&lp.pp("up"), ch, ch, 3)?)
            } else {
                None
            };
            ups.push(Level { blocks, resample });
        }

        Ok(Self {
            config: config.clone(),
            conv_in: Conv2d::same(&p.pp("conv_in"), image_channels, base, 3)?,
            time1: linear(&p.pp("time1"), base, tdim)?,
            time2: linear(&p.pp("time2"), tdim, tdim)?,
            downs,
            mid1,
            mid_attn,
            mid2,
            ups,
            norm_out: group_norm(&p.pp("norm_out"), chs[0], g)?,
            conv_out: Conv2d::same(&p.pp("conv_out"), chs[0], image_channels, 3)?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Predicts ε for a batch `x` at per-sample timesteps `t`.
    pub fn forward(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let temb = timestep_embedding(t, self.config.base_width, x.dtype(), x.device())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;

        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::new();
        for level in &self.downs {
            for b in &level.blocks {
                h = b.forward(&h, &temb)?;
                skips.push(h.clone());
            }
            if let Some(d) = &level.resample {
                h = d.forward(&h)?;
            }
        }
        h = self.mid1.forward(&h, &temb)?;
        if let Some(a) = &self.mid_attn {
            h = a.forward(&h)?;
        }
        h = self.mid2.forward(&h, &temb)?;
        for level in &self.ups {
            for b in &level.blocks {
                let s = skips.pop().expect("one skip per down block");
                h = b.forward(&Tensor::cat(&[&h, &s], 1)?, &temb)?;
            }
            if let Some(u) = &level.resample {
                let (_, _, hh, ww) = h.dims4()?;
                h = u.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?)
    }
}
