//! Genomic prediction with a Gaussian random field whose covariance sums a
//! marker kernel, a subpopulation kernel and a lattice-spatial kernel.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod grf;
pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod simulation;
pub mod synthetic;

pub use error::{GrfError, Result};
