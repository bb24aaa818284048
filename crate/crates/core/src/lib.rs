//! Future-frame video anomaly detection.
//!
//! The crate trains a convolutional-transformer generator to predict the next
//! frame of a video clip (image + optical-flow channels), sharpens it with two
//! adversarial critics (single-frame and clip-conditioned), and flags frames
//! whose prediction error stands out via a min-max regularity score.
//!
//! Everything runs on a small reverse-mode autodiff core ([`tensor`]) that
//! computes in `f64` and is bitwise deterministic for a fixed seed, including
//! under internal parallelism.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod score;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
