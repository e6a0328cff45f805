//! Encoder-free unified multimodal transformer trained with next-token
//! cross-entropy on text and pixel-space rectified flow on images.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod imageio;
pub mod masking;
pub mod model;
pub mod patch;
pub mod plot;
pub mod registry;
pub mod rng;
pub mod sample;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Stream;
pub use tensor::{DType, Real, Tensor};
