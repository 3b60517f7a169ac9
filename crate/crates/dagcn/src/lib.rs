//! Graph classification with dual attention: attention-weighted multi-hop
//! graph convolution, self-attention matrix pooling, and a supervised
//! cross-validation training harness, built on a small verified
//! reverse-mode differentiation engine.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod kfold;
pub mod model;
pub mod reference;
pub mod train;
pub mod scalar;
pub mod tape;
pub mod tu;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default 64-bit tensor; all model and training code runs in f64.
pub type Tensor = tensor::Tensor<f64>;
/// Default 64-bit tape.
pub type Tape = tape::Tape<f64>;
pub use tape::Var;
