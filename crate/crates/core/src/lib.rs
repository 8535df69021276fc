//! A self-contained encoder-decoder semantic-segmentation engine.
//!
//! The encoder stacks conv -> batch norm -> ReLU -> 2x2 max-pool stages and
//! stores the 2-bit per-window argmax records; eight decoder designs restore
//! input resolution from those records, from learned deconvolution, or from
//! fixed bilinear interpolation. Training, evaluation metrics (global and
//! class accuracy, mIoU, boundary F1), synthetic data generation and a CLI
//! sit on top of a small reverse-mode autodiff tape that runs in f32 for
//! training and f64 for gradient verification.

pub mod arch;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub mod cli;

pub use error::{Error, Result};
pub use scalar::{Dtype, Float};
pub use tape::{backward, Gradients, Tape};
pub use tensor::{Shape, Tensor};
