//! Federated gaze-estimation simulator: a small CNN gaze regressor, client
//! SGD with Nesterov momentum, FedAvg and server-side Adam aggregation,
//! synthetic skewed federations, and person-specific / person-independent
//! evaluation.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
