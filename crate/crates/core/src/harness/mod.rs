//! Training, evaluation and inspection commands built on the core library.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod optim;
pub mod selftest;
pub mod train;

pub use checkpoint::{Checkpoint, TrainState};
pub use config::{BackbonePreset, RunConfig};
pub use eval::{cmd_analyze_prior, cmd_eval, cmd_predict, DumpOptions, LoadedModel, PredictReport};
pub use optim::{AdamW, AdamWConfig};
pub use train::{cmd_train, read_log, StepRecord, TrainSummary, Trainer};
