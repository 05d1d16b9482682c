//! Feature banks, the two score components, balancing terms, the
//! shift-ensembled score and AUROC.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::Encoder;
use crate::error::{validation, Error, Result};
use crate::image::Image;
use crate::transforms::ShiftSet;

/// Images per encoder call while scoring.
pub const SCORE_CHUNK: usize = 64;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Data(format!("embedding with norm {n} cannot be compared")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `max_m cos(bank_m, query) · ‖query‖`.
pub fn score_con(query: &[f64], bank: &[Vec<f64>]) -> Result<f64> {
    if bank.is_empty() {
        return Err(Error::Data("feature bank is empty".into()));
    }
    let q = unit(query)?;
    let mut best = f64::NEG_INFINITY;
    for row in bank {
        let r = unit(row)?;
        best = best.max(r.iter().zip(&q).map(|(a, b)| a * b).sum());
    }
    Ok(best * norm(query))
}

/// The `k`-th shift logit.
pub fn score_cls(logits: &[f64], k: usize) -> Result<f64> {
    logits
        .get(k)
        .copied()
        .ok_or_else(|| validation(format!("shift index {k} outside 0..{}", logits.len())))
}

/// Per-shift training embeddings and the training-set score components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    /// `banks[k][m]` is the projection of `S_k(x_m)`.
    pub banks: Vec<Vec<Vec<f64>>>,
    /// `train_con[k][m]`: s_con of training image `m` under shift `k`.
    pub train_con: Vec<Vec<f64>>,
    pub train_cls: Vec<Vec<f64>>,
}

impl FeatureBank {
    pub fn shifts(&self) -> usize {
        self.banks.len()
    }

    pub fn size(&self) -> usize {
        self.banks.first().map_or(0, Vec::len)
    }

    /// Σ_m s_con and Σ_m s_cls per shift.
    pub fn norm_stats(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.train_con.iter().map(|v| v.iter().sum()).collect(),
            self.train_cls.iter().map(|v| v.iter().sum()).collect(),
        )
    }
}

/// Projections and logits of every shifted view, `[k][image]`.
fn shifted_embeddings(
    model: &Encoder,
    images: &[Image],
    shifts: &ShiftSet,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
    let mut zs = Vec::with_capacity(shifts.len());
    let mut logits = Vec::with_capacity(shifts.len());
    for k in 0..shifts.len() {
        let views = images
            .iter()
            .map(|x| shifts.apply(k, x))
            .collect::<Result<Vec<_>>>()?;
        let (z, l) = model.embed(&views, SCORE_CHUNK)?;
        zs.push(z);
        logits.push(l);
    }
    Ok((zs, logits))
}

pub fn build_feature_bank(model: &Encoder, train: &[Image], shifts: &ShiftSet) -> Result<FeatureBank> {
    if train.is_empty() {
        return Err(Error::Data("feature bank needs training images".into()));
    }
    if model.config().shift_classes != shifts.len() {
        return Err(validation(format!(
            "encoder has {} shift classes, shift set has {}",
            model.config().shift_classes,
            shifts.len()
        )));
    }
    let (banks, logits) = shifted_embeddings(model, train, shifts)?;
    let mut train_con = Vec::with_capacity(shifts.len());
    let mut train_cls = Vec::with_capacity(shifts.len());
    for k in 0..shifts.len() {
        train_con.push(
            banks[k]
                .iter()
                .map(|z| score_con(z, &banks[k]))
                .collect::<Result<Vec<_>>>()?,
        );
        train_cls.push(
            logits[k]
                .iter()
                .map(|l| score_cls(l, k))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(FeatureBank {
        banks,
        train_con,
        train_cls,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancingTerms {
    pub lambda_con: Vec<f64>,
    pub lambda_cls: Vec<f64>,
}

/// `λ = M / Σ_m s` for each shift and component.
pub fn balancing_terms(bank: &FeatureBank) -> Result<BalancingTerms> {
    let m = bank.size() as f64;
    let (con, cls) = bank.norm_stats();
    let lambda = |sums: Vec<f64>, what: &str| -> Result<Vec<f64>> {
        sums.into_iter()
            .enumerate()
            .map(|(k, s)| {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::Data(format!(
                        "training {what} scores under shift {k} sum to {s}; cannot balance"
                    )));
                }
                Ok(m / s)
            })
            .collect()
    };
    Ok(BalancingTerms {
        lambda_con: lambda(con, "contrastive")?,
        lambda_cls: lambda(cls, "classifier")?,
    })
}

/// Score of one image with its per-shift components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    /// Unscaled `(s_con, s_cls)` per shift.
    pub components: Vec<(f64, f64)>,
    /// `Σ_k λ_con·s_con + λ_cls·s_cls`; larger for data resembling the training set.
    pub normality: f64,
    /// `−normality`; larger is more anomalous.
    pub anomaly: f64,
}

impl ImageScore {
    fn from_components(components: Vec<(f64, f64)>, lambdas: &BalancingTerms) -> Self {
        let normality = components
            .iter()
            .enumerate()
            .map(|(k, (c, s))| lambdas.lambda_con[k] * c + lambdas.lambda_cls[k] * s)
            .sum();
        Self {
            components,
            normality,
            anomaly: -normality,
        }
    }
}

/// Scores every image on deterministic shifted views.
pub fn score_images(
    model: &Encoder,
    images: &[Image],
    bank: &FeatureBank,
    lambdas: &BalancingTerms,
    shifts: &ShiftSet,
) -> Result<Vec<ImageScore>> {
    if bank.shifts() != shifts.len() || lambdas.lambda_con.len() != shifts.len() {
        return Err(validation("bank, balancing terms and shift set disagree on K"));
    }
    let (zs, logits) = shifted_embeddings(model, images, shifts)?;
    (0..images.len())
        .map(|i| {
            let components = (0..shifts.len())
                .map(|k| Ok((score_con(&zs[k][i], &bank.banks[k])?, score_cls(&logits[k][i], k)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageScore::from_components(components, lambdas))
        })
        .collect()
}

pub fn anomaly_score(
    x: &Image,
    model: &Encoder,
    bank: &FeatureBank,
    lambdas: &BalancingTerms,
    shifts: &ShiftSet,
) -> Result<ImageScore> {
    Ok(score_images(model, std::slice::from_ref(x), bank, lambdas, shifts)?.remove(0))
}

/// Area under the ROC curve by the rank-sum statistic with midranks for ties.
/// Label 1 is the positive (anomalous) class.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Data(format!("score {s} is not comparable")));
    }
    let pos = labels.iter().filter(|l| **l == 1).count();
    let neg = labels.iter().filter(|l| **l == 0).count();
    if pos + neg != labels.len() {
        return Err(validation("labels must be 0 or 1"));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Data("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&o| labels[o] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: usize,
    pub label: Option<u8>,
    pub score: ImageScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub auroc: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    pub summary: ScoreSummary,
}

impl ScoreReport {
    /// AUROC is computed when labels are given and both classes are present.
    pub fn new(
        scores: Vec<ImageScore>,
        labels: Option<&[u8]>,
        seed: u64,
        config_hash: &str,
    ) -> Result<Self> {
        if let Some(l) = labels {
            if l.len() != scores.len() {
                return Err(Error::Shape(format!("{} labels for {} scores", l.len(), scores.len())));
            }
        }
        let auroc = match labels {
            Some(l) if l.contains(&0) && l.contains(&1) => {
                let s: Vec<f64> = scores.iter().map(|s| s.anomaly).collect();
                Some(auroc(&s, l)?)
            }
            _ => None,
        };
        let images = scores.len();
        let rows = scores
            .into_iter()
            .enumerate()
            .map(|(i, score)| ScoreRow {
                image_id: i,
                label: labels.map(|l| l[i]),
                score,
            })
            .collect();
        Ok(Self {
            rows,
            summary: ScoreSummary {
                auroc,
                seed,
                config_hash: config_hash.to_string(),
                images,
            },
        })
    }

    /// One row per image: id, label, `con_k`/`cls_k` per shift, normality, anomaly.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let k = self.rows.first().map_or(0, |r| r.score.components.len());
        let mut header = vec!["image_id".to_string(), "label".to_string()];
        for i in 0..k {
            header.push(format!("con_{i}"));
            header.push(format!("cls_{i}"));
        }
        header.extend(["normality".to_string(), "anomaly_score".to_string()]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.image_id.to_string(),
                r.label.map_or(String::new(), |l| l.to_string()),
            ];
            for (c, s) in &r.score.components {
                rec.push(c.to_string());
                rec.push(s.to_string());
            }
            rec.push(r.score.normality.to_string());
            rec.push(r.score.anomaly.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.summary)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cosine() {
        let bank = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((score_con(&[0.6, 0.8], &bank).unwrap() - 0.8).abs() < 1e-12);
        assert!((score_con(&[3.0, 0.0], &bank).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(score_con(&[0.0, 2.0], &[vec![1.0, 0.0]]).unwrap(), 0.0);
        assert!(score_con(&[1.0, 0.0], &[]).is_err());
    }

    #[test]
    fn cls_component() {
        assert_eq!(score_cls(&[2.0, -1.0, 0.5, 0.0], 0).unwrap(), 2.0);
        assert!(score_cls(&[2.0], 1).is_err());
    }

    #[test]
    fn balancing_hand_case() {
        let bank = FeatureBank {
            banks: vec![vec![vec![1.0], vec![1.0]]],
            train_con: vec![vec![1.0, 3.0]],
            train_cls: vec![vec![2.0, 2.0]],
        };
        let l = balancing_terms(&bank).unwrap();
        assert_eq!(l.lambda_con, vec![0.5]);
        assert_eq!(l.lambda_cls, vec![0.5]);
        let zero = FeatureBank {
            train_cls: vec![vec![1.0, -1.0]],
            ..bank
        };
        assert!(balancing_terms(&zero).is_err());
    }

    #[test]
    fn auroc_fixtures() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auroc(&[0.1, 0.2], &[0, 2]).is_err());
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let lambdas = BalancingTerms {
            lambda_con: vec![1.0],
            lambda_cls: vec![0.5],
        };
        let scores = vec![
            ImageScore::from_components(vec![(1.0, 2.0)], &lambdas),
            ImageScore::from_components(vec![(0.5, 1.0)], &lambdas),
        ];
        assert_eq!(scores[0].normality, 2.0);
        let r = ScoreReport::new(scores, Some(&[0, 1]), 3, "abc").unwrap();
        assert_eq!(r.summary.auroc, Some(1.0));
        r.write_csv(&dir.path().join("s.csv")).unwrap();
        r.write_summary(&dir.path().join("s.json")).unwrap();
        let text = fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert!(text.starts_with("image_id,label,con_0,cls_0,normality,anomaly_score\n0,0,1,2,2,-2\n"));
    }
}
