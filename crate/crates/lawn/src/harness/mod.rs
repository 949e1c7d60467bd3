//! Experiment orchestration: config parsing, the training loop, plateau
//! switching, metrics emission, checkpoints, and grid search.

pub mod checkpoint;
pub mod config;
pub mod grid;
pub mod metrics;
pub mod plateau;
pub mod runner;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{
    AttenuationConfig, ClipSetting, DatasetConfig, DatasetKind, NetConfig, RunConfig, SwitchMode,
    SwitchOverride,
};
pub use grid::{grid_search, GridRunResult, GridSearchOutput, GridSpec};
pub use metrics::{format_metrics, write_metrics, MetricsRow, Phase};
pub use plateau::PlateauMonitor;
pub use runner::{accuracy, build_dataset, build_model, run_experiment, RunOutput, RunSummary};
