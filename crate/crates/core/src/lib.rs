//! Scale-disentangled spatiotemporal forecasting.
//!
//! A window of node readings is split by a gated Daubechies-4 wavelet filter
//! into a time-stable and a time-dynamic stream. Each stream passes through a
//! graph convolution over the road network and an all-pair attention module,
//! the two spatial views are fused, and the result is lifted into a Koopman
//! embedding space. The stable stream is advanced by a learned operator, the
//! dynamic stream by an operator fitted per window with extended DMD. Blocks
//! are chained on the dynamic reconstruction residual and their predictions
//! are summed.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`autodiff`])
//! over dense `f64` matrices.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod koopman;
pub mod layers;
pub mod model;
pub mod spatial;
pub mod synth;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
