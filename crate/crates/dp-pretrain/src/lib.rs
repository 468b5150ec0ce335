//! Differentially private masked-language-model pretraining at desk scale:
//! per-example gradient clipping, noised Adam with decoupled weight decay,
//! Renyi-DP accounting over batch-size schedules, and the instrumentation
//! needed to see what the noise does to training.

// `!(x > 0.0)` deliberately treats NaN as a violation; pinned constants keep
// every digit of their reference values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod accountant;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod instrument;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
