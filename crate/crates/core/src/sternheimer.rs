//! Shifted linear solves (ĥ_s − μ)x = b with orthogonality projections: the
//! engine behind the photon orbital shift Φ¹ and the OEP shift ψ.
//!
//! The shifted operator is generically indefinite (μ can sit inside the
//! spectrum), so the solver is a MINRES-type Krylov recurrence for symmetric
//! indefinite systems. The projector is applied to the right-hand side and to
//! every new Krylov direction to suppress drift out of the search subspace.

use crate::hamiltonian::{dipole_field, KsHamiltonian, PhotonMode};
use crate::linop::{minres_raw, LinearOperator, Shifted};
use crate::realspace::ScalarField;
use crate::scf_driver::KsState;
use crate::{Error, Result};

/// One shifted solve request.
pub struct ShiftedSolve<'a> {
    /// Shift μ: the system solved is (ĥ_s − μ) x = b.
    pub mu: f64,
    pub rhs: &'a ScalarField,
    /// Orthonormal fields projected out of the rhs, the Krylov space and the
    /// solution.
    pub projector: &'a [ScalarField],
    /// Relative residual target: ‖(ĥ−μ)x − b‖ ≤ tol·‖b‖.
    pub tol: f64,
    pub max_iter: usize,
    /// Optional warm start.
    pub x0: Option<&'a ScalarField>,
}

/// Recomputed-from-scratch convergence data of a solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveReport {
    pub residual: f64,
    pub rhs_norm: f64,
    pub iterations: usize,
}

/// Default Sternheimer iteration cap: 10·sqrt(grid points), floored for
/// small grids.
pub fn default_max_iter(n: usize) -> usize {
    (10.0 * (n as f64).sqrt()) as usize + 200
}

/// Solves (apply_h − μ)x = P b with x ⊥ projector set.
pub fn solve_shifted(
    apply_h: &dyn LinearOperator,
    req: &ShiftedSolve,
) -> Result<(ScalarField, SolveReport)> {
    let grid = req.rhs.grid().clone();
    if apply_h.dim() != grid.len() {
        return Err(Error::GridMismatch("solve_shifted: operator vs rhs".into()));
    }
    if !req.rhs.values().iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("solve_shifted: rhs not finite".into()));
    }
    // projector fields carry the grid measure; rescale to unit 2-norm vectors
    let sqrt_dv = grid.cell_volume().sqrt();
    let proj_raw: Vec<Vec<f64>> = req
        .projector
        .iter()
        .map(|f| f.values().iter().map(|v| v * sqrt_dv).collect())
        .collect();
    let proj: Vec<&[f64]> = proj_raw.iter().map(|v| v.as_slice()).collect();
    let op = Shifted {
        base: apply_h,
        sigma: -req.mu,
    };
    let out = minres_raw(
        &op,
        req.rhs.values(),
        &proj,
        req.tol,
        req.max_iter,
        req.x0.map(|f| f.values()),
    );
    let report = SolveReport {
        residual: out.residual,
        rhs_norm: out.rhs_norm,
        iterations: out.iterations,
    };
    if !out.residual.is_finite() || out.residual > req.tol * out.rhs_norm * 10.0 {
        return Err(Error::SolveNonConvergence {
            context: format!("shifted solve at mu={:.6e}", req.mu),
            residual: out.residual / out.rhs_norm,
            iterations: out.iterations,
        });
    }
    Ok((ScalarField::from_values(&grid, out.x)?, report))
}

/// Knobs shared by the per-orbital Sternheimer solves.
#[derive(Debug, Clone)]
pub struct SternheimerOptions {
    pub tol: f64,
    pub max_iter: Option<usize>,
    /// Resonance guard: μ within this distance of an occupied eigenvalue is
    /// reported as ill-conditioned instead of silently regularized.
    pub resonance_window: f64,
}

impl Default for SternheimerOptions {
    fn default() -> Self {
        SternheimerOptions {
            tol: 1e-9,
            max_iter: None,
            resonance_window: 1e-8,
        }
    }
}

/// First orbital shift Φ¹ for occupied orbital `i` and one photon mode:
/// solves [ĥ_s − (ε_i − ω)] Φ¹ = −√(ω/2)(d̂φ_i − Σ_k d_ki φ_k).
///
/// The rhs spans unoccupied space only, so the solution is automatically
/// orthogonal to every occupied orbital; the projection enforces this
/// numerically as well.
pub fn phi1_solve(
    ks: &KsState,
    mode: &PhotonMode,
    i: usize,
    opts: &SternheimerOptions,
    warm: Option<&ScalarField>,
) -> Result<(ScalarField, SolveReport)> {
    let mu = ks.energies[i] - mode.omega;
    for (k, &ek) in ks.energies.iter().enumerate() {
        if (ek - mu).abs() < opts.resonance_window {
            return Err(Error::IllConditioned(format!(
                "cavity resonance: eps_{i} - omega within {:.1e} of occupied eps_{k}",
                opts.resonance_window
            )));
        }
    }
    let d = dipole_field(mode, &ks.grid)?;
    let mut rhs = d.mul_field(&ks.orbitals[i]);
    for k in 0..ks.orbitals.len() {
        let dki = ks.orbitals[k].inner(&rhs)?;
        rhs.axpy(-dki, &ks.orbitals[k]);
    }
    rhs.scale(-(mode.omega / 2.0).sqrt());
    let vs = ks.vs();
    let h = KsHamiltonian::new(&vs, &ks.units, ks.stencil_order);
    solve_shifted(
        &h,
        &ShiftedSolve {
            mu,
            rhs: &rhs,
            projector: &ks.orbitals,
            tol: opts.tol,
            max_iter: opts.max_iter.unwrap_or_else(|| default_max_iter(ks.grid.len())),
            x0: warm,
        },
    )
}

/// OEP orbital shift ψ_i: solves (ĥ_s − ε_i)ψ = M_i − ⟨M_i|φ_i⟩φ_i with
/// ψ ⊥ φ_i (plus the rest of a degenerate subspace when present).
pub fn psi_solve(
    ks: &KsState,
    m_i: &ScalarField,
    i: usize,
    opts: &SternheimerOptions,
    warm: Option<&ScalarField>,
) -> Result<(ScalarField, SolveReport)> {
    let mu = ks.energies[i];
    // project out the full degenerate occupied subspace around eps_i
    let mut projector: Vec<ScalarField> = Vec::new();
    for (k, &ek) in ks.energies.iter().enumerate() {
        if k == i || (ek - mu).abs() < 1e-8 {
            projector.push(ks.orbitals[k].clone());
        }
    }
    let mut rhs = m_i.clone();
    let overlap = m_i.inner(&ks.orbitals[i])?;
    rhs.axpy(-overlap, &ks.orbitals[i]);
    let vs = ks.vs();
    let h = KsHamiltonian::new(&vs, &ks.units, ks.stencil_order);
    solve_shifted(
        &h,
        &ShiftedSolve {
            mu,
            rhs: &rhs,
            projector: &projector,
            tol: opts.tol,
            max_iter: opts.max_iter.unwrap_or_else(|| default_max_iter(ks.grid.len())),
            x0: warm,
        },
    )
}
