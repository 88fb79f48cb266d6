//! Training loop, experiment configuration, ablation grid, gradient-check
//! suite, plots and the command-line interface.

pub mod ablate;
pub mod cli;
pub mod config;
pub mod gradcheck;
pub mod plot;
pub mod rotation;
pub mod train;

pub use ablate::{ablate, AblationTable, Variant, VARIANTS};
pub use config::{GenDataConfig, RotationProposals, TrainConfig};
pub use train::{train, train_step, train_with_data, StepDraws, StepOutcome, TrainData, TrainSummary};
