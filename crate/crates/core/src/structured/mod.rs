//! Gaussian image likelihoods with precision `LL^T` for a sparse,
//! neighbourhood-structured lower-triangular `L`.
//!
//! * [`SparsityPattern`] fixes which entries of `L` may be non-zero.
//! * [`PackedCholesky`] stores those entries and evaluates log-densities,
//!   quadratic forms and samples without forming `LL^T`.
//! * [`BasisMatrix`] / [`WeightField`] compress the per-pixel columns of `L`
//!   through a shared basis.
//! * [`dense`] holds the small dense reference implementation.
//! * [`ops`] provides the differentiable versions used during training.

mod basis;
pub mod dense;
pub mod ops;
mod packed;
mod pattern;

pub use basis::{basis_product, expand_basis, quad_form_basis, BasisMatrix, WeightField};
pub use dense::{DenseGaussian, DenseMatrix};
pub use packed::{DenseFactor, PackedCholesky};
pub use pattern::SparsityPattern;
