use std::collections::HashMap;

use candle_core::{DType, Device};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, OptimizerKind, Selection};
use crate::contrastive::{
    dia_loss, Encoder, EncoderCheckpoint, EncoderConfig, EncoderMeta, PairLabelMatrix,
};
use crate::datasets::ImageDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{cosine_annealing, Lars, LarsConfig, MomentumSgd, TrainOptimizer};
use crate::transforms::{Dissolver, ShiftSet, ViewComposer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub con: f64,
    pub cls: f64,
    pub lr: f64,
}

pub fn encoder_config(cfg: &ExperimentConfig, in_channels: usize) -> EncoderConfig {
    EncoderConfig {
        width: cfg.backbone.width,
        blocks: cfg.backbone.blocks.clone(),
        stem_stride: cfg.backbone.stem_stride,
        in_channels,
        projection_dim: cfg.contrastive.projection_dim,
        shift_classes: cfg.transforms.k,
    }
}

/// Trains the encoder and heads on composed views with the combined objective.
///
/// Each epoch draws `samples_per_epoch` images without replacement and
/// splits them into batches; the learning rate follows a cosine schedule over
/// all optimizer steps. `dissolver` is required when the dissolved branch is on.
pub fn train_dia_with(
    train: &ImageDataset,
    cfg: &ExperimentConfig,
    dissolver: Option<&mut dyn Dissolver>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(EncoderCheckpoint, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let d = &cfg.dia;
    let include = d.include_dissolved;
    let mut dissolver = match (include, dissolver) {
        (true, None) => return Err(Error::Config("the dissolved branch needs a dissolver".into())),
        (_, dis) => dis,
    };
    let (c, _, _) = train.image_shape().expect("non-empty");
    let shifts = ShiftSet::new(cfg.transforms.shift, cfg.transforms.k)?;
    let composer = ViewComposer {
        shifts: shifts.clone(),
        nonshift: cfg.transforms.nonshift.clone(),
        dissolve: cfg.transforms.dissolve.clone(),
        include_dissolved: include,
    };
    let enc_cfg = encoder_config(cfg, c);
    let encoder = Encoder::new(&enc_cfg, cfg.seed, DType::F32)?;
    let vars = encoder.params().trainable_vars();
    let mut opt = match d.optimizer {
        OptimizerKind::Lars => TrainOptimizer::Lars(Lars::new(
            vars,
            LarsConfig {
                lr: d.lr,
                momentum: d.momentum,
                weight_decay: d.weight_decay,
                trust_coefficient: d.trust_coefficient,
                ..LarsConfig::default()
            },
        )),
        OptimizerKind::Sgd => {
            TrainOptimizer::Sgd(MomentumSgd::new(vars, d.lr, d.momentum, d.weight_decay))
        }
    };

    let per_epoch = d.samples_per_epoch.min(train.len());
    let batches_per_epoch = per_epoch.div_ceil(d.batch_size);
    let total_steps = d.epochs * batches_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6469_615f);
    let mut matrices: HashMap<usize, PairLabelMatrix> = HashMap::new();
    let mut history = Vec::with_capacity(d.epochs);
    let mut best: Option<(f64, usize, HashMap<String, candle_core::Tensor>)> = None;
    let mut step = 0;

    for epoch in 0..d.epochs {
        let mut draw = index::sample(&mut rng, train.len(), per_epoch).into_vec();
        draw.sort_unstable();
        // Order within the epoch is shuffled by a second draw.
        let order = index::sample(&mut rng, per_epoch, per_epoch).into_vec();
        let picked: Vec<usize> = order.iter().map(|&i| draw[i]).collect();
        let (mut sum, mut sum_con, mut sum_cls, mut lr) = (0.0, 0.0, 0.0, d.lr);
        for chunk in picked.chunks(d.batch_size) {
            lr = cosine_annealing(d.lr, d.min_lr, step, total_steps);
            opt.set_learning_rate(lr);
            let images: Vec<Image> = chunk.iter().map(|&i| train.images()[i].clone()).collect();
            let views = composer.compose(
                &images,
                dissolver.as_mut().map(|x| &mut **x as &mut dyn Dissolver),
                &mut rng,
            )?;
            let b = images.len();
            let labels = match matrices.get(&b) {
                Some(m) => m,
                None => {
                    let m = PairLabelMatrix::new(
                        b,
                        shifts.len(),
                        cfg.contrastive.matrix_design,
                        include,
                    )?;
                    matrices.entry(b).or_insert(m)
                }
            };
            let x = views.to_batch()?.to_tensor(&Device::Cpu)?;
            let out = encoder.forward_t(&x, true)?;
            let loss = dia_loss(&out.z, &out.logits, &views.shift_index, labels, &cfg.contrastive)?;
            let value = loss.total.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::Data(format!("training loss diverged at epoch {epoch}")));
            }
            opt.step(&loss.total.backward()?)?;
            sum += value * b as f64;
            sum_con += loss.con.to_scalar::<f32>()? as f64 * b as f64;
            sum_cls += loss.cls.to_scalar::<f32>()? as f64 * b as f64;
            step += 1;
        }
        let n = per_epoch as f64;
        let rec = EpochRecord {
            epoch,
            loss: sum / n,
            con: sum_con / n,
            cls: sum_cls / n,
            lr,
        };
        on_epoch(&rec);
        let improved = match (&best, d.selection) {
            (_, Selection::Last) => true,
            (None, _) => true,
            (Some((l, _, _)), Selection::TrainLoss) => rec.loss < *l,
        };
        if improved {
            best = Some((rec.loss, epoch, encoder.params().snapshot("")?));
        }
        history.push(rec);
    }

    let (loss, epoch, weights) = best.expect("at least one epoch");
    encoder.params().restore(&weights, "")?;
    let meta = EncoderMeta {
        epoch,
        train_loss: loss,
        seed: cfg.seed,
        dataset_fingerprint: train.fingerprint().to_string(),
        shift_kind: Some(cfg.transforms.shift),
        dissolved_branch: include,
    };
    Ok((EncoderCheckpoint { encoder, meta }, history))
}
