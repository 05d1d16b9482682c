use candle_core::Var;

use super::params::ParamStore;
use crate::error::{validation, Result};

/// Exponential moving average of model weights.
///
/// Each update sets `shadow ← d·shadow + (1 − d)·target`.
pub struct Ema {
    decay: f64,
    pairs: Vec<(Var, Var)>,
    updates: u64,
}

impl Ema {
    /// Pairs trainable variables of `shadow` and `target` by name.
    pub fn new(shadow: &ParamStore, target: &ParamStore, decay: f64) -> Result<Self> {
        let s = shadow.trainable_vars();
        let t = target.trainable_vars();
        if s.len() != t.len() || s.iter().zip(&t).any(|(a, b)| a.shape() != b.shape()) {
            return Err(validation("EMA shadow and target differ in structure"));
        }
        Self::from_pairs(s.into_iter().zip(t).collect(), decay)
    }

    pub fn from_pairs(pairs: Vec<(Var, Var)>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(validation(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(Self {
            decay,
            pairs,
            updates: 0,
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn update(&mut self) -> Result<()> {
        let d = self.decay;
        for (shadow, target) in &self.pairs {
            let next = ((shadow.as_tensor() * d)? + (target.as_tensor().detach() * (1.0 - d))?)?;
            shadow.set(&next)?;
        }
        self.updates += 1;
        Ok(())
    }
}
