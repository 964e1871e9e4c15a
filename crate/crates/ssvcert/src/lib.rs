//! Certified upper bounds on η-sparse singular values and operator-norm
//! resilience of data matrices, together with the downstream machinery they
//! power: robust covariance / mean estimation, subspace-distortion and
//! 2→p-norm certification, sparse-PCA certification, and a low-degree
//! advantage calculator for planted hidden-direction instances.
//!
//! The crate is organized around a pipeline:
//!
//! * [`kernel`] — exact Gaussian analysis primitives (normalized Hermite
//!   polynomials, Wick moments with exact norm-weight constants, truncated
//!   moment feasibility).
//! * [`graphpoly`] — merged-cycle multigraphs, their graph polynomials, and
//!   the Efron–Stein pieces and vertex-contraction recursion on them.
//! * [`graphmatrix`] — matrix representations of graph polynomials, graph
//!   matrices in the Hermite basis, admissible circle/diamond merges, and
//!   flow-based norm predictions.
//! * [`certify`] — the certificates themselves, from the trivial spectral
//!   baseline to the Schatten-p graph-decomposition certificate, plus an
//!   exhaustive oracle.
//! * [`sos`] — a toy moment-matrix pseudo-expectation solver and SoS-proof
//!   checker for small polynomial systems.
//! * [`robust`] — strong-contamination generators and the robust covariance /
//!   covariance-aware mean pipelines.
//! * [`lowdeg`] — hidden-direction instances and the degree-D advantage
//!   calculator.
//! * [`apps`] — downstream certifiers (distortion, 2→p, sparse PCA).

pub mod apps;
pub mod certify;
pub mod dataset;
mod error;
pub mod graphmatrix;
pub mod graphpoly;
pub mod kernel;
pub mod linalg;
pub mod lowdeg;
pub mod robust;
pub mod sos;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
