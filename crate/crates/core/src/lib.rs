//! Joint driving-intention classification and trajectory regression with a
//! temporal multi-gate mixture-of-experts model.
//!
//! The crate provides, from the ground up: a dense f64 tensor with tape-based
//! reverse-mode autodiff, a dilated-causal-convolution shared layer, LSTM
//! experts and gates mixed per task, per-task tower heads, an
//! uncertainty-weighted joint loss, an Adam training loop, the trajectory
//! feature pipeline (lane reconstruction, smoothing, interaction measures,
//! lane-change labeling, windowing), and evaluation metrics.

pub mod check;
pub mod loss;
pub mod mmoe;
pub mod model;
pub mod towers;
pub mod error;
pub mod lstm;
pub mod tape;
pub mod tcn;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tcn::Mode;
pub use tensor::Tensor;
