//! Capsule network for grid classification: Conv1, PrimaryCaps, dynamic
//! routing to one digit capsule per grid cell, and a length readout.

mod config;
mod infer;
mod loss;
mod model;
mod params;
pub mod routing;
mod train;

use thiserror::Error;

use crate::fingerprint::FingerprintError;
use crate::tensor::TensorError;

pub use config::{CapsNetConfig, Conv1Config, MarginLossConfig, PrimaryCapsConfig};
pub use infer::InferenceModel;
pub use loss::{margin_loss, predict_grid};
pub use model::{forward, forward_values, loss_and_gradients, record_forward, ForwardVars, SampleGradient};
pub use params::{CapsNetParams, CONV1_BIAS, CONV1_FILTERS, PARAM_NAMES, PRIMARY_BIAS, PRIMARY_FILTERS, ROUTING_WEIGHTS};
pub use routing::{dynamic_routing, squash, RoutingOutcome, RoutingState};
pub use train::{evaluate_examples, prepare_examples, train, train_from, Adam, AdamConfig, EpochLog, Example, TrainError, TrainOptions, TrainOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CapsNetError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid label: {0}")]
    Label(String),
    #[error("capsule length {0} outside [0, 1]")]
    LengthOutOfRange(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
}

pub type Result<T> = std::result::Result<T, CapsNetError>;
