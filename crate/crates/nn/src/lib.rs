//! Dense, LSTM and multi-head attention layers with hand-written backward passes,
//! the Adam optimizer, and a finite-difference gradient checker.
//!
//! Everything is `f64` and single-threaded so that a seeded training run is
//! bit-reproducible.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod lstm;
pub mod params;
pub mod tensor;

pub use attention::MultiHeadAttention;
pub use checkpoint::Checkpoint;
pub use config::{LossKind, TrainConfig};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::Dense;
pub use lstm::{Lstm, LstmLayer};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor2;
