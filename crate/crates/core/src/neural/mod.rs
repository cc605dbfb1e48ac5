//! Multilayer perceptrons on a reverse-mode tape, a tanh-squashed Gaussian
//! policy head, AdamW with global-norm clipping, a cosine learning-rate
//! schedule, finite-difference gradient checks and the `ckpt_v1` format.

mod ckpt;
pub mod gradcheck;
mod mlp;
mod optim;
mod policy;
mod tape;

pub use ckpt::{
    decode_checkpoint, decode_f64s, encode_checkpoint, encode_f64s, load_checkpoint,
    save_checkpoint, CheckpointHeader, TensorInfo, CKPT_FORMAT,
};
pub use mlp::{orthogonal, Head, MlpSpec, NetworkParams, ParamVars, DEFAULT_HIDDEN};
pub use optim::{cosine_lr, AdamConfig, OptimizerState, StepInfo};
pub use policy::{
    gaussian_entropy, gaussian_log_prob, log_one_minus_tanh_sq, policy_forward,
    policy_forward_batch, squashed_log_prob, ActMode, PolicySample,
};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("unsupported primitive in backward pass: {0}")]
    UnsupportedPrimitive(&'static str),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}
