//! Uncertainty-aware building segmentation on a small reverse-mode autodiff
//! engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`graph`], [`ops`]: dense tensors, the tape and differentiable ops.
//! - [`gradcheck`]: central finite-difference oracle.
//! - [`model`]: encoder + FPN baseline, prior-guided attention, rank-weighted fusion cascade.
//! - [`train`], [`metrics`], [`synth`], [`io`]: training loop, evaluation, synthetic scenes and file formats.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod params;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use parallel::Exec;
pub use tensor::{DType, Element, Tensor};
