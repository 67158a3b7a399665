//! Variational autoencoders whose image likelihood is a Gaussian with a
//! sparse, neighbourhood-structured Cholesky factor of the precision matrix.

pub mod autograd;
pub mod cli;
pub mod color;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod structured;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
