//! Proxy-based contrastive replay for online continual learning, end to end
//! at desk scale: synthetic disjoint-task streams, a reservoir replay buffer
//! that stores logits and embeddings alongside samples, a cosine-proxy
//! classifier with hand-derived gradients, the PCR/HPCR loss family with
//! gated anchor-to-sample pairs, a decoupled temperature schedule and two
//! distillation terms, plus the training loop, evaluation metrics, and an
//! experiment runner.
//!
//! Every analytic gradient is audited against a central finite-difference
//! oracle; see `gradients::run_gradcheck` and the `acceptance` test suite.
//!
//! The `examples/` directory holds one runnable example per capability; the
//! `hpcr` binary exposes the same machinery as `run`, `gradcheck`,
//! `tau-sweep`, and `export-data` verbs.

// Index loops keep the gradient kernels aligned with their formulas.
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod gradients;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
mod seedmix;
pub mod stream;
pub mod trainer;

pub use config::{ExperimentConfig, HyperParams, ModelConfig, StreamConfig};
pub use error::{Error, Result};
pub use losses::TemperatureSchedule;
pub use memory::{BufferEntry, MemoryBuffer};
pub use model::{ForwardRecord, ModelParams};
pub use stream::{make_task_stream, LabeledSample, TaskStream};
pub use trainer::{Classifier, Method, MethodSpec, RunOptions, RunResult};
