//! Task-free continual learning for streaming sensor classification.
//!
//! The crate is `no_std` (it needs `alloc`). It provides a small
//! reverse-mode autodiff engine, an embedding encoder, a class prototype
//! memory with online averaging, a class-balanced replay buffer, the
//! cross-entropy and margin contrastive objectives, the continual training
//! loop with its ablation switches, the streaming protocol, and the
//! evaluation measures. File formats, configuration and the command line
//! live in the `lapnet-runner` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod encoder;
mod error;
pub mod ingest;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod protomem;
pub mod replay;
pub mod stream;
pub mod tensor;
pub mod trainer;

pub use crate::autodiff::{forward_backward, Graph, Var};
pub use crate::data::{ClassId, InputSpec, LabeledBatch, Sample, SampleId, Window};
pub use crate::encoder::{Activation, Architecture, Encoder, EncoderConfig};
pub use crate::error::{Error, Result};
pub use crate::losses::LossReport;
pub use crate::metrics::{EvalRecord, MetricsLedger};
pub use crate::optim::{OptimizerState, UpdateRule};
pub use crate::protomem::{ClassDistribution, PrototypeMemory};
pub use crate::replay::ReplayBuffer;
pub use crate::stream::{Dataset, ProtocolSplit, StreamBatch, StreamConfig, StreamGenerator};
pub use crate::tensor::Tensor;
pub use crate::trainer::{AblationFlags, ContinualConfig, Learner, PretrainConfig};
