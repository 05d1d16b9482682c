//! Fused per-group normalization with a per-channel affine map.
//!
//! Composed candle ops reduce over non-trailing axes in the backward pass,
//! which dominates training time; this op computes both directions in one
//! pass over contiguous NCHW memory.

use std::sync::{Arc, Mutex};

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor};

use crate::error::Result;

/// Which elements share statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// One group per channel across the batch (batch norm).
    PerChannel,
    /// `groups` contiguous channel groups per sample (group norm).
    PerSample { groups: usize },
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    n: usize,
    c: usize,
    s: usize,
}

impl Dims {
    fn of(shape: &Shape) -> candle_core::Result<Self> {
        let d = shape.dims();
        if d.len() < 2 {
            candle_core::bail!("normalization expects at least (N, C), got {d:?}");
        }
        Ok(Self {
            n: d[0],
            c: d[1],
            s: d[2..].iter().product(),
        })
    }
}

impl Grouping {
    fn count(self, d: Dims) -> usize {
        match self {
            Grouping::PerChannel => d.c,
            Grouping::PerSample { groups } => d.n * groups,
        }
    }

    /// Calls `f(group, channel, contiguous run)` for every `(n, c)` plane.
    #[inline]
    fn planes(self, d: Dims, mut f: impl FnMut(usize, usize, std::ops::Range<usize>)) {
        for n in 0..d.n {
            for c in 0..d.c {
                let g = match self {
                    Grouping::PerChannel => c,
                    Grouping::PerSample { groups } => n * groups + c / (d.c / groups),
                };
                let start = (n * d.c + c) * d.s;
                f(g, c, start..start + d.s);
            }
        }
    }
}

/// Per-group mean and biased variance, in f64.
fn moments(grouping: Grouping, d: Dims, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let groups = grouping.count(d);
    let mut sum = vec![0.0; groups];
    let mut members = vec![0usize; groups];
    grouping.planes(d, |g, _, r| {
        sum[g] += x[r.clone()].iter().sum::<f64>();
        members[g] += r.len();
    });
    let mean: Vec<f64> = sum.iter().zip(&members).map(|(s, m)| s / *m as f64).collect();
    let mut sq = vec![0.0; groups];
    grouping.planes(d, |g, _, r| {
        let mu = mean[g];
        sq[g] += x[r].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
    });
    let var = sq.iter().zip(&members).map(|(s, m)| s / *m as f64).collect();
    (mean, var)
}

fn to_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("normalization expects contiguous input".into()))?;
    Ok(match s {
        CpuStorage::F32(v) => v[a..b].iter().map(|x| *x as f64).collect(),
        CpuStorage::F64(v) => v[a..b].to_vec(),
        _ => candle_core::bail!("normalization supports f32 and f64 only"),
    })
}

fn tensor_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

/// Moments recorded by the most recent forward pass.
pub type Moments = Arc<Mutex<Option<(Vec<f64>, Vec<f64>)>>>;

struct Normalize {
    grouping: Grouping,
    eps: f64,
    record: Option<Moments>,
}

impl CustomOp3 for Normalize {
    fn name(&self) -> &'static str {
        "normalize"
    }

    fn cpu_fwd(
        &self,
        xs: &CpuStorage,
        xl: &Layout,
        ws: &CpuStorage,
        wl: &Layout,
        bs: &CpuStorage,
        bl: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = Dims::of(xl.shape())?;
        let x = to_f64(xs, xl)?;
        let (w, b) = (to_f64(ws, wl)?, to_f64(bs, bl)?);
        let (mean, var) = moments(self.grouping, d, &x);
        let mut y = vec![0.0; x.len()];
        self.grouping.planes(d, |g, c, r| {
            let inv = 1.0 / (var[g] + self.eps).sqrt();
            let (scale, shift) = (w[c] * inv, b[c] - w[c] * inv * mean[g]);
            for (o, v) in y[r.clone()].iter_mut().zip(&x[r]) {
                *o = v * scale + shift;
            }
        });
        if let Some(rec) = &self.record {
            *rec.lock().expect("moments lock") = Some((mean, var));
        }
        let out = match xs {
            CpuStorage::F32(_) => CpuStorage::F32(y.into_iter().map(|v| v as f32).collect()),
            _ => CpuStorage::F64(y),
        };
        Ok((out, xl.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = Dims::of(x.shape())?;
        let xv = tensor_f64(x)?;
        let wv = tensor_f64(w)?;
        let dy = tensor_f64(grad)?;
        let (mean, var) = moments(self.grouping, d, &xv);
        let groups = self.grouping.count(d);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        // Per-group Σ dx̂ and Σ dx̂·x̂ with dx̂ = dy·γ; per-channel Σ dy·x̂, Σ dy.
        let (mut sum_dh, mut sum_dh_h, mut members) = (vec![0.0; groups], vec![0.0; groups], vec![0usize; groups]);
        let (mut dw, mut db) = (vec![0.0; d.c], vec![0.0; d.c]);
        self.grouping.planes(d, |g, c, r| {
            let (mu, iv) = (mean[g], inv[g]);
            let (mut s_dy, mut s_dy_h) = (0.0, 0.0);
            for (xv, dy) in xv[r.clone()].iter().zip(&dy[r.clone()]) {
                let h = (xv - mu) * iv;
                s_dy += dy;
                s_dy_h += dy * h;
            }
            dw[c] += s_dy_h;
            db[c] += s_dy;
            sum_dh[g] += wv[c] * s_dy;
            sum_dh_h[g] += wv[c] * s_dy_h;
            members[g] += r.len();
        });
        let mut dx = vec![0.0; xv.len()];
        self.grouping.planes(d, |g, c, r| {
            let m = members[g] as f64;
            let (mu, iv) = (mean[g], inv[g]);
            let (a, b) = (sum_dh[g] / m, sum_dh_h[g] / m);
            for ((o, xv), dy) in dx[r.clone()].iter_mut().zip(&xv[r.clone()]).zip(&dy[r]) {
                let h = (xv - mu) * iv;
                *o = iv * (wv[c] * dy - a - h * b);
            }
        });
        let dev = x.device();
        let dx = Tensor::from_vec(dx, x.shape(), dev)?.to_dtype(x.dtype())?;
        let dw = Tensor::from_vec(dw, d.c, dev)?.to_dtype(w.dtype())?;
        let db = Tensor::from_vec(db, d.c, dev)?.to_dtype(w.dtype())?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

/// `γ_c·(x − μ_g)/√(σ²_g + ε) + β_c` with batch statistics; when `record`
/// is given it receives the per-group mean and biased variance.
pub fn normalize(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    grouping: Grouping,
    eps: f64,
    record: Option<Moments>,
) -> Result<Tensor> {
    let d = Dims::of(x.shape())?;
    if let Grouping::PerSample { groups } = grouping {
        if groups == 0 || d.c % groups != 0 {
            return Err(crate::error::Error::Shape(format!(
                "{} channels do not split into {groups} groups",
                d.c
            )));
        }
    }
    let op = Normalize {
        grouping,
        eps,
        record,
    };
    Ok(x.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, op)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn reference(x: &Tensor, w: &Tensor, b: &Tensor, grouping: Grouping) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let eps = 1e-5;
        let xhat = match grouping {
            Grouping::PerChannel => {
                let mean = x.mean_keepdim(3).unwrap().mean_keepdim(2).unwrap().mean_keepdim(0).unwrap();
                let xc = x.broadcast_sub(&mean).unwrap();
                let var = xc.sqr().unwrap().mean_keepdim(3).unwrap().mean_keepdim(2).unwrap().mean_keepdim(0).unwrap();
                xc.broadcast_div(&(var + eps).unwrap().sqrt().unwrap()).unwrap()
            }
            Grouping::PerSample { groups } => {
                let g = x.reshape((n, groups, c / groups * h * wd)).unwrap();
                let mean = g.mean_keepdim(D::Minus1).unwrap();
                let xc = g.broadcast_sub(&mean).unwrap();
                let var = xc.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
                xc.broadcast_div(&(var + eps).unwrap().sqrt().unwrap())
                    .unwrap()
                    .reshape((n, c, h, wd))
                    .unwrap()
            }
        };
        xhat.broadcast_mul(&w.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_composed_reference() {
        let dev = Device::Cpu;
        for grouping in [Grouping::PerChannel, Grouping::PerSample { groups: 2 }] {
            let x = Var::from_tensor(&Tensor::randn(1f64, 2.0, (3, 4, 3, 2), &dev).unwrap()).unwrap();
            let w = Var::from_tensor(&Tensor::randn(1f64, 0.5, 4, &dev).unwrap()).unwrap();
            let b = Var::from_tensor(&Tensor::randn(0f64, 0.5, 4, &dev).unwrap()).unwrap();
            // A non-uniform upstream gradient exercises every term.
            let probe = Tensor::randn(0f64, 1.0, (3, 4, 3, 2), &dev).unwrap();
            let ours = normalize(x.as_tensor(), w.as_tensor(), b.as_tensor(), grouping, 1e-5, None).unwrap();
            let theirs = reference(x.as_tensor(), w.as_tensor(), b.as_tensor(), grouping);
            assert!(max_diff(&ours, &theirs) < 1e-12);
            let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w, &b] {
                let d = max_diff(g1.get(v).unwrap(), g2.get(v).unwrap());
                assert!(d < 1e-10, "{grouping:?}: {d}");
            }
        }
    }

    #[test]
    fn records_moments() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[[[1f64, 3.0]]], [[[5.0, 7.0]]]], &dev).unwrap();
        let one = Tensor::ones(1, DType::F64, &dev).unwrap();
        let zero = Tensor::zeros(1, DType::F64, &dev).unwrap();
        let rec: Moments = Arc::default();
        normalize(&x, &one, &zero, Grouping::PerChannel, 1e-5, Some(rec.clone())).unwrap();
        let (mean, var) = rec.lock().unwrap().clone().unwrap();
        assert_eq!(mean, vec![4.0]);
        assert_eq!(var, vec![5.0]);
    }

    #[test]
    fn rejects_uneven_groups() {
        let x = Tensor::zeros((1, 3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let w = Tensor::ones(3, DType::F32, &Device::Cpu).unwrap();
        assert!(normalize(&x, &w, &w, Grouping::PerSample { groups: 2 }, 1e-5, None).is_err());
    }
}
