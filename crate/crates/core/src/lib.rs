//! Memory attention networks for skeleton-based action recognition.
//!
//! The pipeline recalibrates each coordinate plane of a skeleton sequence
//! with a temporal-attention residual module (TARM), stacks the three
//! recalibrated planes as an image, and classifies them with a stack of
//! BN-ReLU-Conv blocks (STCM). Everything runs on a small reverse-mode
//! tape so gradients come for free and can be audited against finite
//! differences.

pub mod config;
pub mod data;
pub mod gru;
pub mod model;
pub mod stcm;
pub mod tarm;
pub mod tensor;

pub use tensor::{Scalar, Tensor, TensorError};

#[cfg(test)]
pub(crate) mod testutil;
