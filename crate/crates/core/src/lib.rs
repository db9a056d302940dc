pub mod attention;
pub mod bench;
pub mod blend;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod param;
pub mod roi;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{DiffOp, Scalar, Tensor};
