//! Numerical toolkit for random conductance homogenization on periodic lattices.

pub mod elliptic;
pub mod environment;
pub mod homogenize;
pub mod kernels;
pub mod error;
pub mod experiments;
pub mod fit;
pub mod lattice;
pub mod quadrature;
pub mod resolvent;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod twoscale;

pub use error::{Error, Result};
