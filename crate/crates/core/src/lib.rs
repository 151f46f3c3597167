//! Multi-branch vertical attention for paragraph recognition, with exact
//! branch fusion for inference.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod real;
pub mod rng;
pub mod rvafm;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{CheckpointError, Error, Result};
pub use real::{DType, Real};
pub use tensor::Tensor;
