//! Differentiable self-supervised depth and pose estimation on CPU.

pub mod autodiff;
pub mod checkpoint;
pub mod disparity;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod imageio;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pose;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
