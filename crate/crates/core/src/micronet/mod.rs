//! A small dense network engine: matrices, linear/ReLU/dropout layers with
//! analytic backpropagation, losses, AdamW and finite-difference checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
mod matrix;
pub mod optim;
mod rng;

use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{backward, forward, infer, Gradients, Layer, LinearGrad, LinearLayer, Trace};
pub use loss::{focal_loss, smooth_l1, LossGrad};
pub use matrix::Matrix;
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MicronetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, MicronetError>;
