//! Small neural-network toolkit on top of candle: seeded parameters, an
//! im2col convolution with a GEMM backward pass, normalization layers,
//! weight EMA and the optimizers used by the two training loops.

mod conv;
mod ema;
mod layers;
mod norm;
mod optim;
mod params;

pub use conv::Conv2d;
pub use ema::Ema;
pub use layers::{group_norm, linear, BatchNorm2d, GroupNorm};
pub use norm::{normalize, Grouping, Moments};
pub use optim::{cosine_annealing, Lars, LarsConfig, MomentumSgd, TrainOptimizer};
pub use params::{Init, ParamStore};
