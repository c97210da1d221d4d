pub mod autograd;
pub mod error;
mod gemm;
pub mod nn;
pub mod params;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamSet, Parameter};
pub use tensor::Tensor;
pub mod backbone;
pub mod boxes;
pub mod config;
pub mod detect;
pub mod gradflow;
pub mod gradsuite;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod pyramid;
pub mod report;
pub mod scene;
pub mod train;
