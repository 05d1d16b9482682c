use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use super::pairs::{MatrixDesign, PairLabel, PairLabelMatrix};
use crate::error::{validation, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// Weight of the shift-classification loss.
    pub gamma_cls: f64,
    pub matrix_design: MatrixDesign,
    pub projection_dim: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            gamma_cls: 1.0,
            matrix_design: MatrixDesign::A,
            projection_dim: 128,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(validation(format!("temperature {} must be positive", self.tau)));
        }
        if !(self.gamma_cls >= 0.0 && self.gamma_cls.is_finite()) {
            return Err(validation(format!("gamma {} must be non-negative", self.gamma_cls)));
        }
        if self.projection_dim == 0 {
            return Err(validation("projection dimension must be positive"));
        }
        Ok(())
    }
}

fn mask_tensor(values: Vec<f64>, n: usize, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, (n, n), like.device())?.to_dtype(like.dtype())?)
}

/// Row-wise L2 normalization; rejects zero or non-finite rows.
pub fn normalize_rows(z: &Tensor) -> Result<Tensor> {
    let norms = z.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let values = norms.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Data(format!("embedding row {i} has norm {}", values[i])));
    }
    Ok(z.broadcast_div(&norms)?)
}

/// Matrix of `−log(exp(sim_ij/τ) / Σ_k exp(sim_ik/τ))` with the sum over
/// non-excluded `k ≠ i`.
pub fn pair_losses(z: &Tensor, labels: &PairLabelMatrix, tau: f64) -> Result<Tensor> {
    let (n, _) = z.dims2()?;
    if n != labels.size() {
        return Err(Error::Shape(format!(
            "{n} embeddings for a pair matrix of size {}",
            labels.size()
        )));
    }
    if !(tau > 0.0) {
        return Err(validation(format!("temperature {tau} must be positive")));
    }
    let zn = normalize_rows(z)?;
    // Cosines are at most 1, so shifting by 1/τ keeps every exponent ≤ 0.
    let logits = ((zn.matmul(&zn.t()?)? / tau)? - 1.0 / tau)?;
    let den_mask = labels.denominator_mask();
    let empty: Vec<f64> = den_mask
        .chunks(n)
        .map(|r| if r.iter().any(|v| *v > 0.0) { 0.0 } else { 1.0 })
        .collect();
    let den_mask = mask_tensor(den_mask, n, z)?;
    let empty = Tensor::from_vec(empty, (n, 1), z.device())?.to_dtype(z.dtype())?;
    let denom = (logits.exp()? * den_mask)?.sum_keepdim(1)?;
    // Rows without candidates get a unit denominator; they hold no positives.
    let log_denom = (denom + empty)?.log()?;
    Ok(log_denom.broadcast_sub(&logits)?)
}

/// Contrastive loss averaged over the ordered POS pairs.
pub fn fine_ntxent_loss(z: &Tensor, labels: &PairLabelMatrix, tau: f64) -> Result<Tensor> {
    let n = labels.size();
    let positives = labels.count(PairLabel::Pos);
    if positives == 0 {
        return Err(validation("pair matrix has no positive pairs"));
    }
    let ell = pair_losses(z, labels, tau)?;
    let pos = mask_tensor(labels.positive_mask(), n, z)?;
    Ok(((ell * pos)?.sum_all()? / positives as f64)?)
}

/// Mean softmax cross-entropy of `logits (N, K)` against shift indices.
pub fn shift_cls_loss(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} logit rows", targets.len())));
    }
    if let Some(t) = targets.iter().find(|t| **t >= k) {
        return Err(validation(format!("shift target {t} outside 0..{k}")));
    }
    let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx: Vec<u32> = targets.iter().map(|t| *t as u32).collect();
    let idx = Tensor::from_vec(idx, (n, 1), logits.device())?;
    Ok((log_p.gather(&idx, 1)?.sum_all()? / -(n as f64))?)
}

pub struct DiaLoss {
    pub total: Tensor,
    pub con: Tensor,
    pub cls: Tensor,
}

/// `L_con + γ·L_cls`; with `γ = 0` the total is the contrastive tensor itself.
pub fn dia_loss(
    z: &Tensor,
    logits: &Tensor,
    targets: &[usize],
    labels: &PairLabelMatrix,
    config: &ContrastiveConfig,
) -> Result<DiaLoss> {
    config.validate()?;
    let con = fine_ntxent_loss(z, labels, config.tau)?;
    let cls = shift_cls_loss(logits, targets)?;
    let total = if config.gamma_cls == 0.0 {
        con.clone()
    } else {
        (&con + (&cls * config.gamma_cls)?)?
    };
    Ok(DiaLoss { total, con, cls })
}
