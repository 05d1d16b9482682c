//! Experiment configuration, orchestration and run-directory persistence.

mod config;
mod dia;
mod pipeline;

pub use config::{
    parse_sweep, parse_value, BackboneConfig, DatasetConfig, DatasetKind, DiaTrainConfig,
    ExperimentConfig, OptimizerKind, Selection, TransformsConfig,
};
pub use dia::{encoder_config, train_dia_with, EpochRecord};
pub use pipeline::{
    check_denoiser, diffusion_training_set, dissolve_grid, dissolve_grid_command, eval,
    evaluate_model, grid_search, heuristic_dissolver, prepare_data, save_png, train_diffusion,
    train_dia, train_dia_model, GridRow, PreparedData, RunLayout, RunManifest, DEFAULT_GRID_STEPS,
    GRID_PADDING, RUN_FORMAT_VERSION,
};
