//! A two-facet transformer for multi-task binary classification.
//!
//! Facet 1 attends over each example's features with the task identity
//! carried on every token; facet 2 attends causally over blocks of examples.
//! Both representations are fused into one score per example.

pub mod baseline;
pub mod block;
pub mod calibration;
pub mod checkpoint;
pub mod data;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use encoding::{FeatureBatch, NormStats, Variant};
pub use error::{ConfigError, Error, Result, TensorError};
pub use model::{AutoTaskModel, ModelConfig, Prediction};
pub use tensor::{Scalar, Tensor};
