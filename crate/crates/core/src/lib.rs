//! Cross-modal CTC distillation toolkit.
//!
//! A student sequence model is trained from a teacher's frame-level
//! posteriors and transcriptions with a weighted sum of the CTC loss and a
//! frame-wise cross-entropy. Around that objective sit a synthetic teacher,
//! a Jasper-style 1D convolutional student with manual backpropagation,
//! greedy and prefix-beam decoding with an n-gram word LM, WER metrics and a
//! two-stage corpus filter.
//!
//! Numerical code is generic over [`Scalar`] (`f32` / `f64`); the aliases
//! below name the concrete instantiations used by the training pipeline.

// `!(x > 0.0)` style guards are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alphabet;
mod binio;
pub mod check;
pub mod ctc;
pub mod decode;
pub mod distill;
pub mod error;
pub mod eval;
pub mod grid;
pub mod matrix;
pub mod model;
pub mod numeric;
pub mod scalar;
pub mod teacher;
pub mod train;

pub use alphabet::Alphabet;
pub use error::{Error, Result};
pub use grid::PosteriorGrid;
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Grid32 = PosteriorGrid<f32>;
pub type Grid64 = PosteriorGrid<f64>;
pub type Model32 = model::ModelParams<f32>;
pub type Model64 = model::ModelParams<f64>;
