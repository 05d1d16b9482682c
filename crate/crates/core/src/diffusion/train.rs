use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::checkpoint::DenoiserCheckpoint;
use super::schedule::ScheduleSpec;
use super::unet::UNetConfig;
use crate::datasets::ImageDataset;
use crate::error::{validation, Error, Result};
use crate::nn::{Ema, TrainOptimizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    /// Optimizer steps.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Micro-batches averaged into each optimizer step.
    pub grad_accum: usize,
    pub ema_decay: f64,
    /// Steps before which the EMA shadow copies the raw weights.
    pub ema_start: usize,
    pub hflip: bool,
    pub schedule: ScheduleSpec,
    pub unet: UNetConfig,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 25_000,
            batch_size: 16,
            lr: 8e-5,
            grad_accum: 2,
            ema_decay: 0.995,
            ema_start: 0,
            hflip: true,
            schedule: ScheduleSpec::default(),
            unet: UNetConfig::default(),
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(validation("steps, batch size and accumulation must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(validation(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(validation(format!("EMA decay {} outside [0, 1]", self.ema_decay)));
        }
        Ok(())
    }
}

/// Per-step mean L1 losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainLog {
    pub losses: Vec<f64>,
}

impl DiffusionTrainLog {
    /// Mean over steps `[start, start + window)`.
    pub fn window_mean(&self, start: usize, window: usize) -> f64 {
        let end = (start + window).min(self.losses.len());
        let s = &self.losses[start.min(end)..end];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }

    /// Running loss over the first `window` steps.
    pub fn initial(&self, window: usize) -> f64 {
        self.window_mean(0, window)
    }

    /// Running loss over the last `window` steps.
    pub fn last(&self, window: usize) -> f64 {
        self.window_mean(self.losses.len().saturating_sub(window), window)
    }
}

/// Mean absolute error between equally shaped tensors.
pub fn l1_loss(prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
    if prediction.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            prediction.dims(),
            target.dims()
        )));
    }
    Ok((prediction - target)?.abs()?.mean_all()?)
}

/// Cycles through seeded shuffles of `0..n`.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Trains an ε-predictor with L1 loss, Adam, gradient accumulation and EMA.
///
/// `on_step(step, loss)` is called after every optimizer step.
pub fn train_denoiser_with(
    dataset: &ImageDataset,
    config: &DiffusionTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(DenoiserCheckpoint, DiffusionTrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot train a denoiser on an empty dataset".into()));
    }
    let shape = dataset.image_shape().expect("non-empty");
    let mut ckpt = DenoiserCheckpoint::init(&config.unet, shape, config.schedule, seed)?;
    let schedule = ckpt.schedule().clone();
    let mut opt = TrainOptimizer::adam(ckpt.raw_params().trainable_vars(), config.lr)?;
    let mut ema = Ema::new(ckpt.ema_params(), ckpt.raw_params(), config.ema_decay)?;
    let mut sync = Ema::new(ckpt.ema_params(), ckpt.raw_params(), 0.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6469_6666);
    let mut sampler = EpochSampler::new(dataset.len());
    let (c, h, w) = shape;
    let per = c * h * w;
    let n = config.batch_size;
    let mut log = DiffusionTrainLog::default();

    for step in 0..config.steps {
        let mut total: Option<Tensor> = None;
        for _ in 0..config.grad_accum {
            let mut x0 = Vec::with_capacity(n * per);
            let mut eps = Vec::with_capacity(n * per);
            let mut ts = Vec::with_capacity(n);
            for _ in 0..n {
                let img = &dataset.images()[sampler.next(&mut rng)];
                let flip = config.hflip && rng.random_bool(0.5);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let sx = if flip { w - 1 - x } else { x };
                            x0.push(2.0 * img.get(ch, y, sx) - 1.0);
                        }
                    }
                }
                ts.push(rng.random_range(1..=schedule.steps()));
                eps.extend((0..per).map(|_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    z
                }));
            }
            let (a, b): (Vec<f32>, Vec<f32>) = ts
                .iter()
                .map(|&t| {
                    let ab = schedule.alpha_bar(t);
                    (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32)
                })
                .unzip();
            let dev = Device::Cpu;
            let x0 = Tensor::from_vec(x0, (n, c, h, w), &dev)?;
            let eps = Tensor::from_vec(eps, (n, c, h, w), &dev)?;
            let a = Tensor::from_vec(a, (n, 1, 1, 1), &dev)?;
            let b = Tensor::from_vec(b, (n, 1, 1, 1), &dev)?;
            let xt = (x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?;
            let pred = ckpt.raw_net().forward(&xt, &ts)?;
            let loss = l1_loss(&pred, &eps)?;
            total = Some(match total {
                None => loss,
                Some(t) => (t + loss)?,
            });
        }
        let loss = (total.expect("grad_accum >= 1") / config.grad_accum as f64)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::Data(format!("diffusion loss diverged at step {step}")));
        }
        opt.step(&loss.backward()?)?;
        if step < config.ema_start {
            sync.update()?;
        } else {
            ema.update()?;
        }
        log.losses.push(value);
        on_step(step, value);
    }
    let meta = ckpt.meta_mut();
    meta.steps = config.steps;
    meta.dataset_fingerprint = dataset.fingerprint().to_string();
    meta.seed = seed;
    Ok((ckpt, log))
}

pub fn train_denoiser(
    dataset: &ImageDataset,
    config: &DiffusionTrainConfig,
    seed: u64,
) -> Result<(DenoiserCheckpoint, DiffusionTrainLog)> {
    train_denoiser_with(dataset, config, seed, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_hand_case() {
        let p = Tensor::new(&[0.1f64, 0.3], &Device::Cpu).unwrap();
        let t = Tensor::new(&[0.2f64, 0.1], &Device::Cpu).unwrap();
        let v = l1_loss(&p, &t).unwrap().to_scalar::<f64>().unwrap();
        assert!((v - 0.15).abs() < 1e-12);
    }

    #[test]
    fn sampler_visits_every_index_per_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = EpochSampler::new(5);
        let mut seen: Vec<usize> = (0..5).map(|_| s.next(&mut rng)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn log_windows() {
        let log = DiffusionTrainLog {
            losses: vec![4.0, 2.0, 1.0, 1.0],
        };
        assert_eq!(log.initial(2), 3.0);
        assert_eq!(log.last(2), 1.0);
    }
}
