use std::sync::Arc;

use candle_core::{Module, Tensor, Var};
use candle_nn::Linear;

use super::norm::{normalize, Grouping, Moments};
use super::params::{Init, ParamStore};
use crate::error::Result;

pub fn linear(params: &ParamStore, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let init = Init::fan_in_uniform(in_dim);
    let w = params.param("weight", (out_dim, in_dim), init)?;
    let b = params.param("bias", out_dim, init)?;
    Ok(Linear::new(w, Some(b)))
}

/// Group normalization with at most `max_groups` groups dividing `channels`.
pub fn group_norm(params: &ParamStore, channels: usize, max_groups: usize) -> Result<GroupNorm> {
    let mut groups = max_groups.min(channels).max(1);
    while channels % groups != 0 {
        groups -= 1;
    }
    Ok(GroupNorm {
        weight: params.param("weight", channels, Init::Ones)?,
        bias: params.param("bias", channels, Init::Zeros)?,
        groups,
    })
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        normalize(
            x,
            &self.weight,
            &self.bias,
            Grouping::PerSample {
                groups: self.groups,
            },
            1e-5,
            None,
        )
        .map_err(|e| candle_core::Error::Msg(e.to_string()))
    }
}

/// Batch normalization over `(N, H, W)` with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(params: &ParamStore, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: params.param("weight", channels, Init::Ones)?,
            bias: params.param("bias", channels, Init::Zeros)?,
            running_mean: params.buffer("running_mean", channels, Init::Zeros)?,
            running_var: params.buffer("running_var", channels, Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if train {
            let rec: Moments = Arc::default();
            let y = normalize(x, &self.weight, &self.bias, Grouping::PerChannel, self.eps, Some(rec.clone()))?;
            let (mean, var) = rec.lock().expect("moments lock").take().expect("forward records moments");
            let count = (n * h * w) as f64;
            let bessel = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let dev = x.device();
            let dtype = self.running_mean.dtype();
            let mean = Tensor::from_vec(mean, c, dev)?.to_dtype(dtype)?;
            let var = (Tensor::from_vec(var, c, dev)?.to_dtype(dtype)? * bessel)?;
            self.running_mean
                .set(&((self.running_mean.as_tensor() * (1.0 - m))? + (mean * m)?)?)?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (var * m)?)?)?;
            return Ok(y);
        }
        let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
        let var = self.running_var.as_tensor().reshape((1, c, 1, 1))?;
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn batch_norm_normalizes_in_training() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let bn = BatchNorm2d::new(&store, 2).unwrap();
        let x = Tensor::randn(3f64, 2.0, (4, 2, 3, 3), &Device::Cpu).unwrap();
        let y = bn.forward_t(&x, true).unwrap();
        let mean = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(mean.abs() < 1e-10);
        let vars = store.named_vars();
        let (_, running) = vars.iter().find(|(k, _)| k == "running_mean").unwrap();
        let rm = running.as_tensor().to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|v| *v > 0.0), "running mean moved toward 3");
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let bn = BatchNorm2d::new(&store, 1).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 1, 2, 2), &Device::Cpu).unwrap();
        let a = bn.forward_t(&x, false).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = bn.forward_t(&x, false).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
