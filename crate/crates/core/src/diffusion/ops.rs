//! Closed-form diffusion operations on image batches.

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::image::{ImageBatch, ValueRange};

/// Anything that predicts the noise component ε of a diffusion-domain batch.
pub trait NoisePredictor {
    fn predict_noise(&self, x: &Tensor, t: &[usize]) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, &[usize]) -> Result<Tensor>,
{
    fn predict_noise(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        self(x, t)
    }
}

/// Expands a timestep list to one entry per sample, validating each.
pub(crate) fn per_sample_steps(
    t: &[usize],
    n: usize,
    schedule: &DiffusionSchedule,
) -> Result<Vec<usize>> {
    let steps = match t.len() {
        1 => vec![t[0]; n],
        len if len == n => t.to_vec(),
        len => {
            return Err(Error::Shape(format!(
                "{len} timesteps for a batch of {n}"
            )))
        }
    };
    for &s in &steps {
        schedule.check(s)?;
    }
    Ok(steps)
}

/// Forward diffusion in closed form: `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
///
/// `[0, 1]` inputs are mapped to `[-1, 1]` first; signed inputs are used as-is.
pub fn q_sample(
    x0: &ImageBatch,
    t: usize,
    eps: &ImageBatch,
    schedule: &DiffusionSchedule,
) -> Result<ImageBatch> {
    schedule.check(t)?;
    if eps.shape() != x0.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} differs from image shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let x0 = x0.to_signed();
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    ImageBatch::new(x0.shape(), data, ValueRange::Unbounded)
}

fn predict(
    predictor: &impl NoisePredictor,
    x: &ImageBatch,
    t: &[usize],
    device: &Device,
) -> Result<Vec<f64>> {
    let eps = predictor.predict_noise(&x.to_tensor(device)?, t)?;
    if eps.dims() != [x.shape().0, x.shape().1, x.shape().2, x.shape().3] {
        return Err(Error::Shape(format!(
            "noise predictor returned {:?} for input {:?}",
            eps.dims(),
            x.shape()
        )));
    }
    Ok(eps
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?)
}

/// Single-step reverse estimate `√(1/ᾱ_t)·x − √(1/ᾱ_t − 1)·ε_θ(x, t)` in the
/// signed domain, without clamping. Arithmetic runs in f64; the coefficient
/// grows to ~157 at `t = 1000`, which would amplify f32 rounding.
pub fn dissolve_unclamped(
    predictor: &impl NoisePredictor,
    schedule: &DiffusionSchedule,
    x: &ImageBatch,
    t: &[usize],
) -> Result<ImageBatch> {
    let (n, c, h, w) = x.shape();
    let steps = per_sample_steps(t, n, schedule)?;
    let signed = x.to_signed();
    let eps = predict(predictor, &signed, &steps, &Device::Cpu)?;
    let per = c * h * w;
    let mut out = Vec::with_capacity(signed.data().len());
    for (i, &s) in steps.iter().enumerate() {
        let ab = schedule.alpha_bar(s);
        let a = (1.0 / ab).sqrt();
        let b = (1.0 / ab - 1.0).sqrt();
        let xs = &signed.data()[i * per..(i + 1) * per];
        let es = &eps[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(es).map(|(x, e)| (a * *x as f64 - b * e) as f32));
    }
    ImageBatch::new(x.shape(), out, ValueRange::Unbounded)
}

/// Dissolving transformation: one reverse evaluation on the clean input,
/// clamped back into the input's domain (`[0, 1]` for canonical inputs,
/// `[-1, 1]` otherwise).
pub fn dissolve_with(
    predictor: &impl NoisePredictor,
    schedule: &DiffusionSchedule,
    x: &ImageBatch,
    t: &[usize],
) -> Result<ImageBatch> {
    let raw = dissolve_unclamped(predictor, schedule, x, t)?;
    match x.range() {
        ValueRange::Unit => Ok(raw.to_unit()),
        _ => {
            let data = raw.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            ImageBatch::new(raw.shape(), data, ValueRange::Signed)
        }
    }
}

/// One ancestral step `x_t → x_{t−1}` with σ_t = √β_t.
///
/// The noise argument is ignored at `t = 1`.
pub fn reverse_step_with(
    predictor: &impl NoisePredictor,
    schedule: &DiffusionSchedule,
    x_t: &ImageBatch,
    t: usize,
    noise: Option<&ImageBatch>,
) -> Result<ImageBatch> {
    schedule.check(t)?;
    if let Some(z) = noise {
        if z.shape() != x_t.shape() {
            return Err(Error::Shape(format!(
                "noise shape {:?} differs from state shape {:?}",
                z.shape(),
                x_t.shape()
            )));
        }
    }
    let signed = x_t.to_signed();
    let n = signed.len();
    let eps = predict(predictor, &signed, &vec![t; n], &Device::Cpu)?;
    let alpha = schedule.alpha(t);
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let sigma = schedule.beta(t).sqrt();
    let data = signed
        .data()
        .iter()
        .zip(&eps)
        .enumerate()
        .map(|(i, (x, e))| {
            let mean = inv_sqrt_alpha * (*x as f64 - coef * e);
            let v = match noise {
                Some(z) if t > 1 => mean + sigma * z.data()[i] as f64,
                _ => mean,
            };
            v as f32
        })
        .collect();
    ImageBatch::new(signed.shape(), data, ValueRange::Unbounded)
}

/// Full `T`-step ancestral sampling chain from pure noise; returns `[0, 1]` images.
pub fn sample_with(
    predictor: &impl NoisePredictor,
    schedule: &DiffusionSchedule,
    shape: (usize, usize, usize, usize),
    rng: &mut impl Rng,
) -> Result<ImageBatch> {
    let count = shape.0 * shape.1 * shape.2 * shape.3;
    let gaussian = |rng: &mut _| -> Result<ImageBatch> {
        let data = (0..count)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z
            })
            .collect();
        ImageBatch::new(shape, data, ValueRange::Unbounded)
    };
    let mut x = gaussian(rng)?;
    for t in (1..=schedule.steps()).rev() {
        let z = if t > 1 { Some(gaussian(rng)?) } else { None };
        x = reverse_step_with(predictor, schedule, &x, t, z.as_ref())?;
    }
    Ok(x.to_unit())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::DiffusionSchedule;

    fn zero(x: &Tensor, _t: &[usize]) -> Result<Tensor> {
        Ok(x.zeros_like()?)
    }

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap()
    }

    #[test]
    fn q_sample_constant_image() {
        let x0 = ImageBatch::new((1, 1, 2, 2), vec![1.0; 4], ValueRange::Unit).unwrap();
        let eps = ImageBatch::new((1, 1, 2, 2), vec![0.0; 4], ValueRange::Unbounded).unwrap();
        let xt = q_sample(&x0, 2, &eps, &sched()).unwrap();
        for v in xt.data() {
            assert!((v - 0.848528).abs() < 1e-6);
        }
    }

    #[test]
    fn q_sample_zero_signal() {
        let x0 = ImageBatch::new((1, 1, 1, 3), vec![0.0; 3], ValueRange::Signed).unwrap();
        let eps =
            ImageBatch::new((1, 1, 1, 3), vec![0.5, -1.0, 2.0], ValueRange::Unbounded).unwrap();
        let xt = q_sample(&x0, 3, &eps, &sched()).unwrap();
        let s = (1.0f64 - 0.504).sqrt() as f32;
        assert_eq!(xt.data(), &[0.5 * s, -s, 2.0 * s]);
    }

    #[test]
    fn q_sample_shape_and_range_errors() {
        let x0 = ImageBatch::new((1, 1, 2, 2), vec![0.0; 4], ValueRange::Unit).unwrap();
        let eps = ImageBatch::new((1, 1, 1, 4), vec![0.0; 4], ValueRange::Unbounded).unwrap();
        assert!(matches!(q_sample(&x0, 1, &eps, &sched()), Err(Error::Shape(_))));
        let eps = ImageBatch::new((1, 1, 2, 2), vec![0.0; 4], ValueRange::Unbounded).unwrap();
        assert!(matches!(q_sample(&x0, 5, &eps, &sched()), Err(Error::Timestep { .. })));
        assert!(matches!(q_sample(&x0, 0, &eps, &sched()), Err(Error::Timestep { .. })));
    }

    #[test]
    fn dissolve_with_zero_stub_scales_input() {
        let x = ImageBatch::new((1, 1, 1, 1), vec![0.6], ValueRange::Signed).unwrap();
        let out = dissolve_unclamped(&zero, &sched(), &x, &[2]).unwrap();
        assert!((out.data()[0] - 0.707107).abs() < 1e-6);
    }

    #[test]
    fn dissolve_clamps_canonical_output() {
        let x = ImageBatch::new((1, 1, 1, 2), vec![0.0, 1.0], ValueRange::Unit).unwrap();
        let out = dissolve_with(&zero, &sched(), &x, &[4]).unwrap();
        assert_eq!(out.range(), ValueRange::Unit);
        assert_eq!(out.data(), &[0.0, 1.0]);
    }

    #[test]
    fn reverse_step_scalar_case() {
        // α_1 = 0.9 for the hand schedule.
        let x = ImageBatch::new((1, 1, 1, 1), vec![0.9], ValueRange::Signed).unwrap();
        let out = reverse_step_with(&zero, &sched(), &x, 1, None).unwrap();
        assert!((out.data()[0] - 0.948683).abs() < 1e-6);
    }

    #[test]
    fn reverse_step_ignores_noise_at_t1() {
        let x = ImageBatch::new((1, 1, 1, 2), vec![0.3, -0.2], ValueRange::Signed).unwrap();
        let z = ImageBatch::new((1, 1, 1, 2), vec![5.0, -7.0], ValueRange::Unbounded).unwrap();
        let a = reverse_step_with(&zero, &sched(), &x, 1, Some(&z)).unwrap();
        let b = reverse_step_with(&zero, &sched(), &x, 1, None).unwrap();
        assert_eq!(a, b);
        let c = reverse_step_with(&zero, &sched(), &x, 2, Some(&z)).unwrap();
        assert_ne!(c, reverse_step_with(&zero, &sched(), &x, 2, None).unwrap());
    }

    #[test]
    fn timestep_list_must_match_batch() {
        let x = ImageBatch::new((2, 1, 1, 1), vec![0.1, 0.2], ValueRange::Unit).unwrap();
        assert!(dissolve_with(&zero, &sched(), &x, &[1, 2, 3]).is_err());
        assert!(dissolve_with(&zero, &sched(), &x, &[1, 2]).is_ok());
    }
}
