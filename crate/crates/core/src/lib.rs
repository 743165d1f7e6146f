//! Variational data assimilation for 1-D periodic linear advection, with a
//! Fourier-neural-operator surrogate of the inverse Hessian used to
//! initialize conjugate gradients (FNO-CG).
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`grid`]: Lax–Wendroff forward model, its adjoint, and trajectories.
//! - [`covariance`]: SOAR background covariance `B`, its square root and
//!   inverse, and the observation-error precision.
//! - [`observation`]: the sampling operator `H`, its adjoint, and synthetic
//!   observation extraction.
//! - [`assimilation`]: cost, adjoint gradient, Hessian–vector products, the
//!   CG solver, and dense oracles / condition numbers.
//! - [`fno`]: the 1-D Fourier neural operator mapping the right-hand side
//!   `f` to an initial state, with training (Adam) and serialization.
//! - [`datagen`]: the scenario grid, noise model, and dataset files.
//! - [`harness`]: the CG / FNO / FNO-CG comparison, CSV outputs and plots.
//! - [`config`]: the TOML experiment configuration shared by the CLI.

pub mod assimilation;
pub mod config;
pub mod covariance;
pub mod datagen;
pub mod fno;
pub mod grid;
pub mod harness;
pub mod observation;

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "covariance is not positive definite (min eigenvalue {lambda_min:.3e}); \
         the correlation length is too large for this grid/distance metric"
    )]
    NotPositiveDefinite { lambda_min: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("dense operation refused: n_x = {n_x} exceeds the dense-work guard ({guard})")]
    DenseGuard { n_x: usize, guard: usize },

    #[error("file format error: {0}")]
    Format(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
