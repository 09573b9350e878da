//! Geometric integration toolkit for rough Hamiltonian systems.
//!
//! The library builds and solves truncated modified equations for one-step
//! discretizations of systems
//!
//! ```text
//!     dY_t = sum_l V_l(Y_t) dX^l_t,      X^0_t = t,
//! ```
//!
//! driven by fractional Brownian paths with Hurst index H in (1/4, 1/2].
//! A one-step method expands as
//!
//! ```text
//!     Y_{n+1} = Y_n + sum_{|a| >= 1} d_a(Y_n) h^{a_0} (dX^1)^{a_1} ... (dX^d)^{a_d}
//! ```
//!
//! over multi-indices a in N^{d+1}, and the associated N-truncated modified
//! equation carries coefficient functions f_a obtained from the d_a by a
//! triangular recursion. Modules:
//!
//! * [`core`]: multi-indices, uniform grids, trajectories.
//! * [`noise`]: exact fractional Brownian sampling, coarsening, truncated
//!   increments, a rho-variation diagnostic.
//! * [`systems`]: the catalogue systems (a trigonometric two-noise system,
//!   a Taylor-Green flow with additive noise, the Kubo oscillator) plus a
//!   builder for user-supplied fields.
//! * [`integrators`]: midpoint, explicit RK2, a symplectic partitioned RK
//!   scheme for the Kubo oscillator, and general stochastic RK tableaux.
//! * [`modified`]: closed-form coefficient tables, numerical coefficient
//!   extraction, the d-to-f recursion, and the truncated modified flow.
//! * [`geometry`]: symplecticity and energy diagnostics, domain transport.
//! * [`harness`]: Monte-Carlo convergence, energy, and domain studies.

pub mod core;
pub mod geometry;
pub mod harness;
pub mod integrators;
pub mod modified;
pub mod noise;
pub mod systems;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Fixed-point sweep exceeded the iteration budget.
    #[error("fixed-point iteration did not converge after {iterations} sweeps (last update {last_update:.3e}); step size too large for the contraction")]
    FixedPointStalled { iterations: usize, last_update: f64 },
    /// Fixed-point sweep diverged (update norm doubled).
    #[error("fixed-point iteration diverged after {iterations} sweeps (update grew to {last_update:.3e})")]
    FixedPointDiverged { iterations: usize, last_update: f64 },
    /// Covariance factorization failed even with jitter.
    #[error("cholesky factorization failed: {0}")]
    Cholesky(String),
    /// Least-squares coefficient extraction rejected its fit.
    #[error("coefficient extraction failed: {0}")]
    Extraction(String),
    /// Malformed external input (CSV paths, tableau files).
    #[error("parse error: {0}")]
    Parse(String),
    /// Regression over too few points or degenerate data.
    #[error("order estimate failed: {0}")]
    OrderEstimate(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
