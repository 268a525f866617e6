//! Experiment harness: run configuration, the training loop and the
//! subcommands of the `asppnet` tool.

pub mod commands;
pub mod config;
pub mod train;

pub use commands::{cmd_compare, cmd_eval, cmd_gradcheck, cmd_predict, cmd_slices, cmd_synth, cmd_train, CompareReport, PredictOptions};
pub use config::{Precision, Preset, RunConfig};
pub use train::{load_datasets, run_training, train_step, Datasets, RunReport};
