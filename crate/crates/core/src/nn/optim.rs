use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::Result;

/// Cosine-annealed learning rate from `base` at step 0 to `min` at `total`.
pub fn cosine_annealing(base: f64, min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (step.min(total) as f64) / total as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * p).cos())
}

fn norm(t: &Tensor) -> Result<f64> {
    Ok(t.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?.sqrt())
}

#[derive(Clone, Copy, Debug)]
pub struct LarsConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Trust coefficient η in `η·‖w‖ / (‖g‖ + λ‖w‖)`.
    pub trust_coefficient: f64,
    pub eps: f64,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-6,
            trust_coefficient: 1.0,
            eps: 1e-8,
        }
    }
}

/// Layer-wise adaptive rate scaling on top of momentum SGD.
pub struct Lars {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    config: LarsConfig,
}

impl Lars {
    pub fn new(vars: Vec<Var>, config: LarsConfig) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            vars,
            velocity,
            config,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let c = self.config;
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            let w = var.as_tensor();
            let w_norm = norm(w)?;
            let g_norm = norm(g)?;
            let local = if w_norm > 0.0 && g_norm > 0.0 {
                c.trust_coefficient * w_norm / (g_norm + c.weight_decay * w_norm + c.eps)
            } else {
                1.0
            };
            let update = ((g + (w * c.weight_decay)?)? * local)?;
            let v = match vel.take() {
                Some(prev) => ((prev * c.momentum)? + update)?,
                None => update,
            };
            var.set(&(w - (&v * c.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// Heavy-ball SGD with L2 weight decay.
pub struct MomentumSgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl MomentumSgd {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            vars,
            velocity,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            let w = var.as_tensor();
            let g = (g + (w * self.weight_decay)?)?;
            let v = match vel.take() {
                Some(prev) => ((prev * self.momentum)? + g)?,
                None => g,
            };
            var.set(&(w - (&v * self.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

/// The optimizers the training loops can be configured with.
pub enum TrainOptimizer {
    Adam(AdamW),
    Lars(Lars),
    Sgd(MomentumSgd),
}

impl TrainOptimizer {
    pub fn adam(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        Ok(TrainOptimizer::Adam(AdamW::new(vars, params)?))
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        match self {
            TrainOptimizer::Adam(o) => Ok(o.step(grads)?),
            TrainOptimizer::Lars(o) => o.step(grads),
            TrainOptimizer::Sgd(o) => o.step(grads),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        match self {
            TrainOptimizer::Adam(o) => o.set_learning_rate(lr),
            TrainOptimizer::Lars(o) => o.set_learning_rate(lr),
            TrainOptimizer::Sgd(o) => o.lr = lr,
        }
    }
}
