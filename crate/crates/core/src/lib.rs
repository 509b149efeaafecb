//! Distributed minimum-variance state estimation.
//!
//! Monitors that each observe a block of a linear measurement model
//! `z = H x + v` cooperate to compute the weighted-least-squares estimate
//! without centralizing their data. The noise covariance `Σ = B Bᵀ` is folded
//! into an underdetermined but consistent system `z = [H  εB] (x, v̄)`, whose
//! minimum-norm solution approaches the WLS estimate as `ε → 0`. That
//! minimum-norm solution is then built by exchanging running estimates and
//! kernel bases, either along a chain of monitors ([`incremental`]) or by
//! repeated neighbor fusion on a graph ([`diffusive`]).
//!
//! The same machinery drives residual-based false-data detection
//! ([`detection`]) and the truncated, finite-memory variant of the diffusive
//! algorithm ([`finite_memory`]).

// Links the system OpenBLAS that backs the LAPACK decompositions.
extern crate openblas_src;

pub mod detection;
pub mod diffusive;
pub mod error;
pub mod finite_memory;
pub mod incremental;
pub mod linalg;
pub mod network;
pub mod subspace;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, SubspaceBasis, SvdResult};
pub use subspace::Subspace;
