//! Real-space Kohn-Sham solver for electrons coupled to quantized cavity
//! photon modes.
//!
//! The crate implements ground states of the length-gauge electron-photon
//! Hamiltonian in the exchange-only approximation: the photon exchange
//! potential is obtained from an optimized effective potential (OEP) scheme
//! whose orbital shifts are computed with occupied-orbitals-only Sternheimer
//! solves, together with the closed-form KLI approximation. An exact
//! diagonalization oracle over the grid ⊗ Fock product basis provides
//! reference energies, densities and photon observables for single-electron
//! systems.
//!
//! Module map:
//! - [`realspace`]: grids, scalar fields, finite-difference Laplacians,
//!   soft-Coulomb kernels, field dump I/O.
//! - [`hamiltonian`]: external potentials, photon modes, units, matrix-free
//!   Kohn-Sham Hamiltonian application.
//! - [`eigensolver`]: LOBPCG lowest-states solver and a dense oracle.
//! - [`sternheimer`]: MINRES shifted solves with occupied-space projection.
//! - [`photon_xc`]: photon-exchange functional, OEP residual, KLI.
//! - [`scf_driver`]: the outer self-consistent field loop and checkpoints.
//! - [`oracle`]: exact diagonalization, potential inversion, sum-over-states
//!   reference implementations.
//! - [`observables`]: photon number, correlation fields, gaps, records.

pub mod eigensolver;
pub mod hamiltonian;
pub mod linop;
pub mod observables;
pub mod oracle;
pub mod photon_xc;
pub mod realspace;
pub mod scf_driver;
pub mod sternheimer;

use thiserror::Error;

/// Errors shared across the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("eigensolver did not converge: {context} (worst residual {residual:.3e})")]
    EigenNonConvergence { context: String, residual: f64 },
    #[error("linear solve did not converge: {context} (residual {residual:.3e} after {iterations} iterations)")]
    SolveNonConvergence {
        context: String,
        residual: f64,
        iterations: usize,
    },
    #[error("ill-conditioned shifted solve: {0}")]
    IllConditioned(String),
    #[error("dense limit exceeded: problem dimension {dim} > limit {limit}")]
    DenseLimit { dim: usize, limit: usize },
    #[error("SCF did not converge: {0}")]
    ScfNonConvergence(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
