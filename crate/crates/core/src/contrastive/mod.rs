//! Pair-label matrices, the fine-grained contrastive and shift-classification
//! losses, and the encoder they train.

mod encoder;
mod loss;
mod pairs;

pub use encoder::{
    encode, Encoder, EncoderCheckpoint, EncoderConfig, EncoderMeta, EncoderOutput,
    ENCODER_FORMAT_VERSION,
};
pub use loss::{
    dia_loss, fine_ntxent_loss, normalize_rows, pair_losses, shift_cls_loss, ContrastiveConfig,
    DiaLoss,
};
pub use pairs::{build_pair_labels, MatrixDesign, PairLabel, PairLabelMatrix};
