//! Eye contact correction by flow-field warping.
//!
//! A small encoder-decoder maps a 64x32 eye patch and a target gaze to a
//! per-pixel sampling flow plus a brightness map. The crate contains the
//! autodiff engine it is trained with, a procedural eye renderer that supplies
//! perfectly labeled gaze pairs, the bi-directional training loop, temporal
//! control for video and the misalignment-tolerant evaluation metric.

pub mod control;
pub mod eccnet;
mod error;
pub mod metrics;
pub mod par;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{EccError, Result};
