use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Parameters that regenerate a schedule; this is what manifests record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// β, α and ᾱ tables for timesteps `1..=T`.
///
/// Index `t` is one-based everywhere in the public API; `t = 0` (the clean
/// image) never reaches a denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(validation("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(validation(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                // Lerp form keeps both endpoints bit-exact.
                let f = i as f64 / (steps - 1) as f64;
                (1.0 - f) * beta_start + f * beta_end
            })
            .collect(),
    };
    DiffusionSchedule::from_betas(betas)
}

impl DiffusionSchedule {
    /// Builds the tables from explicit betas, validating monotonicity.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(validation("empty beta sequence"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(validation(format!("beta {b} outside (0, 1)")));
        }
        if let Some(w) = betas.windows(2).find(|w| w[1] <= w[0]) {
            return Err(validation(format!(
                "betas must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = DoubleDouble::ONE;
        let mut alpha_bars = Vec::with_capacity(betas.len());
        for b in &betas {
            acc = acc.mul(DoubleDouble::one_minus(*b));
            let v = acc.to_f64();
            if !(v > 0.0 && v < 1.0) {
                return Err(validation(format!("cumulative alpha {v} left (0, 1)")));
            }
            alpha_bars.push(v);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Total number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Unevaluated sum `hi + lo` carrying ~106 bits of precision.
#[derive(Clone, Copy, Debug)]
struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl DoubleDouble {
    const ONE: Self = Self { hi: 1.0, lo: 0.0 };

    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        let err = (a - (s - bb)) + (b - bb);
        Self { hi: s, lo: err }
    }

    fn quick_two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        Self {
            hi: s,
            lo: b - (s - a),
        }
    }

    /// `1 − b` without rounding.
    fn one_minus(b: f64) -> Self {
        Self::two_sum(1.0, -b)
    }

    fn mul(self, o: Self) -> Self {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        Self::quick_two_sum(p, e)
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(s.alpha_bars(), &[0.9, 0.72, 0.504, 0.3024]);
        assert_eq!(s.steps(), 4);
    }

    #[test]
    fn linear_endpoints_are_exact() {
        let s = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        assert!((s.alpha_bar(1000) - 4.04e-5).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(DiffusionSchedule::from_betas(vec![0.2, 0.1]).is_err());
        assert!(DiffusionSchedule::from_betas(vec![0.1, 0.1]).is_err());
        assert!(DiffusionSchedule::from_betas(vec![0.0, 0.1]).is_err());
        assert!(DiffusionSchedule::from_betas(vec![0.5, 1.0]).is_err());
        assert!(build_schedule(10, 0.02, 1e-4, ScheduleKind::Linear).is_err());
        assert!(build_schedule(0, 1e-4, 0.02, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn timestep_bounds() {
        let s = build_schedule(10, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        assert!(s.check(0).is_err());
        assert!(s.check(11).is_err());
        assert!(s.check(1).is_ok() && s.check(10).is_ok());
    }
}
