use candle_core::{CpuStorage, CustomOp3, Layout, Shape, Tensor, WithDType};
use gemm::{gemm, Parallelism};

use super::params::{Init, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn image(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input column read by output column `ox` at tap `kx`; `None` in the padding.
    #[inline]
    fn tap_x(&self, ox: usize, kx: usize) -> Option<usize> {
        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
        (ix >= 0 && (ix as usize) < self.width).then_some(ix as usize)
    }

    /// Calls `f(col_offset, image_offset, len)` for every contiguous run
    /// shared by the `(C·k·k, Ho·Wo)` column matrix of one image and the image.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_h(), self.out_w());
        for c in 0..self.channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let Some(lo) = (0..wo).find(|&ox| self.tap_x(ox, kx).is_some()) else {
                        continue;
                    };
                    let hi = (0..wo).rev().find(|&ox| self.tap_x(ox, kx).is_some()).unwrap() + 1;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        let src = (c * self.height + iy as usize) * self.width;
                        let dst = row * ho * wo + oy * wo;
                        if self.stride == 1 {
                            f(dst + lo, src + self.tap_x(lo, kx).unwrap(), hi - lo);
                        } else {
                            for ox in lo..hi {
                                f(dst + ox, src + self.tap_x(ox, kx).unwrap(), 1);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: WithDType>(&self, x: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        self.for_each_run(|dst, src, len| cols[dst..dst + len].copy_from_slice(&x[src..src + len]));
    }

    fn col2im<T: WithDType>(&self, cols: &[T], dx: &mut [T]) {
        self.for_each_run(|dst, src, len| {
            for (o, v) in dx[src..src + len].iter_mut().zip(&cols[dst..dst + len]) {
                *o += *v;
            }
        });
    }
}

/// Row-major `dst (m×n) (+)= a (m×k) · b (k×n)`, where `a_t`/`b_t` mean the
/// slices hold the transposed operand.
#[allow(clippy::too_many_arguments)]
fn matmul<T: WithDType>(
    dst: &mut [T],
    accumulate: bool,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    (m, n, k): (usize, usize, usize),
) {
    assert!(dst.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
    let (a_rs, a_cs) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (b_rs, b_cs) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the extents above bound every access made for these strides.
    unsafe {
        gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            T::one(),
            T::one(),
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("convolution expects contiguous tensors"),
    }
}

/// Convolution of `(N, C, H, W)` by `(O, C, k, k)` plus a bias, one image at
/// a time so the column matrix stays cache-resident.
struct ConvOp(Geometry);

impl ConvOp {
    fn forward<T: WithDType>(&self, x: &[T], w: &[T], b: &[T], n: usize) -> Vec<T> {
        let g = self.0;
        let (o, p, hw) = (g.out_channels, g.patch(), g.pixels());
        let mut cols = vec![T::zero(); p * hw];
        let mut y = vec![T::zero(); n * o * hw];
        for i in 0..n {
            g.im2col(&x[i * g.image()..(i + 1) * g.image()], &mut cols);
            let out = &mut y[i * o * hw..(i + 1) * o * hw];
            for (row, bias) in out.chunks_mut(hw).zip(b) {
                row.fill(*bias);
            }
            matmul(out, true, w, false, &cols, false, (o, hw, p));
        }
        y
    }

    /// Returns `(dx, dw, db)`.
    fn backward<T: WithDType>(&self, x: &[T], w: &[T], dy: &[T], n: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let g = self.0;
        let (o, p, hw) = (g.out_channels, g.patch(), g.pixels());
        let mut cols = vec![T::zero(); p * hw];
        let mut dcols = vec![T::zero(); p * hw];
        let mut dx = vec![T::zero(); n * g.image()];
        let mut dw = vec![T::zero(); o * p];
        let mut db = vec![T::zero(); o];
        for i in 0..n {
            let img = i * g.image()..(i + 1) * g.image();
            let dyi = &dy[i * o * hw..(i + 1) * o * hw];
            g.im2col(&x[img.clone()], &mut cols);
            // dW += dY · colsᵀ
            matmul(&mut dw, true, dyi, false, &cols, true, (o, p, hw));
            // dcols = Wᵀ · dY
            matmul(&mut dcols, false, w, true, dyi, false, (p, hw, o));
            g.col2im(&dcols, &mut dx[img]);
            for (acc, row) in db.iter_mut().zip(dyi.chunks(hw)) {
                *acc += row.iter().fold(T::zero(), |s, v| s + *v);
            }
        }
        (dx, dw, db)
    }
}

impl CustomOp3 for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d-gemm"
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
        let g = self.0;
        let n = xl.dims()[0];
        let out = match (xs, ws, bs) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => {
                CpuStorage::F32(self.forward(slice(x, xl)?, slice(w, wl)?, slice(b, bl)?, n))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => {
                CpuStorage::F64(self.forward(slice(x, xl)?, slice(w, wl)?, slice(b, bl)?, n))
            }
            _ => candle_core::bail!("convolution needs matching f32 or f64 operands"),
        };
        Ok((out, Shape::from((n, g.out_channels, g.out_h(), g.out_w()))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let n = x.dim(0)?;
        let dy = grad.contiguous()?;
        let (dx, dw, db) = match x.dtype() {
            candle_core::DType::F32 => {
                let f = |t: &Tensor| t.flatten_all()?.to_vec1::<f32>();
                let (dx, dw, db) = self.backward(&f(x)?, &f(w)?, &f(&dy)?, n);
                (
                    Tensor::from_vec(dx, x.shape(), x.device())?,
                    Tensor::from_vec(dw, w.shape(), w.device())?,
                    Tensor::from_vec(db, b.shape(), b.device())?,
                )
            }
            _ => {
                let f = |t: &Tensor| t.flatten_all()?.to_vec1::<f64>();
                let (dx, dw, db) = self.backward(&f(x)?, &f(w)?, &f(&dy)?, n);
                (
                    Tensor::from_vec(dx, x.shape(), x.device())?,
                    Tensor::from_vec(dw, w.shape(), w.device())?,
                    Tensor::from_vec(db, b.shape(), b.device())?,
                )
            }
        };
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

/// 2-D convolution lowered to per-image im2col + GEMM in both directions.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        params: &ParamStore,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = params.param(
            "weight",
            (out_channels, in_channels, kernel, kernel),
            Init::fan_in_uniform(fan_in),
        )?;
        let bias = if bias {
            Some(params.param("bias", out_channels, Init::fan_in_uniform(fan_in))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            padding,
        })
    }

    /// "Same" padding for odd kernels.
    pub fn same(
        params: &ParamStore,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::new(params, in_channels, out_channels, kernel, 1, kernel / 2, true)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let out_channels = self.weight.dim(0)?;
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(crate::error::Error::Shape(format!(
                "{h}x{w} input is smaller than a {}x{} kernel",
                self.kernel, self.kernel
            )));
        }
        let g = Geometry {
            channels: c,
            height: h,
            width: w,
            out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        };
        let bias = match &self.bias {
            Some(b) => b.clone(),
            None => Tensor::zeros(out_channels, self.weight.dtype(), self.weight.device())?,
        };
        Ok(x.contiguous()?
            .apply_op3(&self.weight.contiguous()?, &bias, ConvOp(g))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn conv_reference(x: &Tensor, conv: &Conv2d) -> Tensor {
        let cfg_out = x
            .conv2d(&conv.weight, conv.padding, conv.stride, 1, 1)
            .unwrap();
        match &conv.bias {
            Some(b) => cfg_out
                .broadcast_add(&b.reshape((1, b.dim(0).unwrap(), 1, 1)).unwrap())
                .unwrap(),
            None => cfg_out,
        }
    }

    #[test]
    fn matches_candle_conv2d() {
        let dev = Device::Cpu;
        let store = ParamStore::new(3, DType::F64, &dev);
        for (i, &(k, s, p)) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)].iter().enumerate() {
            let conv = Conv2d::new(&store.pp(format!("c{i}")), 2, 3, k, s, p, true).unwrap();
            let x = Tensor::randn(0f64, 1.0, (2, 2, 7, 6), &dev).unwrap();
            let got = conv.forward(&x).unwrap();
            let want = conv_reference(&x, &conv);
            let diff = (got - want)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(diff < 1e-12, "kernel {k} stride {s}: {diff}");
        }
    }

    #[test]
    fn input_gradient_matches_candle() {
        let dev = Device::Cpu;
        let store = ParamStore::new(5, DType::F64, &dev);
        let conv = Conv2d::new(&store, 2, 4, 3, 2, 1, true).unwrap();
        let x = candle_core::Var::from_tensor(
            &Tensor::randn(0f64, 1.0, (2, 2, 5, 5), &dev).unwrap(),
        )
        .unwrap();
        let ours = conv.forward(x.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap();
        let g1 = ours.backward().unwrap();
        let theirs = conv_reference(x.as_tensor(), &conv)
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let g2 = theirs.backward().unwrap();
        for t in [x.as_tensor(), &conv.weight] {
            let d = (g1.get(t).unwrap() - g2.get(t).unwrap())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(d < 1e-10, "{d}");
        }
    }
}
