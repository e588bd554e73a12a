//! Photon-exchange functional machinery.
//!
//! The exchange energy is an orbital functional of the occupied orbitals and
//! two photon orbital shifts per mode: Φ¹ (solved by a Sternheimer equation,
//! spans unoccupied space) and Φ² (occupied-only closed form). Its optimized
//! effective potential is found by stepping v_x along the pointwise residual
//! S(r) = Σ_i ψ*_iφ_i − Λ_i + c.c., where ψ_i solves the second Sternheimer
//! equation with inhomogeneity M_i, and Λ_i is the extra term produced by the
//! frequency dependence of the functional. The KLI closed form drops the
//! (ĥ−ε)ψ term and solves a small linear system instead.
//!
//! All fields here are real; complex conjugation in the defining expressions
//! reduces to factors of two, which are applied where each formula is
//! assembled.

use crate::eigensolver::lowest_states;
use crate::hamiltonian::{dipole_field, KsHamiltonian, PhotonMode};
use crate::realspace::{ScalarField, SoftCoulomb};
use crate::scf_driver::{
    density_residual, total_energy, KsProblem, KsState, ScfLogRecord, ScfOptions, ScfOutcome,
};
use crate::sternheimer::{phi1_solve, psi_solve};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::time::Instant;

/// Exchange treatment of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XcMethod {
    Oep,
    Kli,
}

/// Orbital shifts and derived fields for the current KS state.
///
/// Indexing: `phi1[i][alpha]` for occupied orbital `i` and photon mode
/// `alpha`. `dipole_mat[alpha]` holds d_ij over occupied pairs. The revision
/// stamp ties the set to the [`KsState`] that produced it.
#[derive(Debug, Clone)]
pub struct ShiftSet {
    pub phi1: Vec<Vec<ScalarField>>,
    pub phi2: Vec<Vec<ScalarField>>,
    pub dipole_mat: Vec<DMatrix<f64>>,
    pub m_shift: Vec<ScalarField>,
    pub lambda_inh: Vec<ScalarField>,
    pub psi: Vec<ScalarField>,
    pub ks_revision: u64,
}

impl ShiftSet {
    pub fn empty(ks_revision: u64) -> ShiftSet {
        ShiftSet {
            phi1: Vec::new(),
            phi2: Vec::new(),
            dipole_mat: Vec::new(),
            m_shift: Vec::new(),
            lambda_inh: Vec::new(),
            psi: Vec::new(),
            ks_revision,
        }
    }

    /// ⟨Φ¹_{iα}|Φ¹_{iα}⟩ summed over occupied orbitals for one mode.
    pub fn phi1_norm2_sum(&self, alpha: usize) -> f64 {
        self.phi1
            .iter()
            .map(|row| {
                let f = &row[alpha];
                f.inner(f).unwrap_or(0.0)
            })
            .sum()
    }
}

/// Energy/potential split of the exchange treatment.
#[derive(Debug, Clone)]
pub struct XcBreakdown {
    pub e_x_electron: f64,
    pub e_x_photon: Vec<f64>,
    pub v_x: ScalarField,
    pub constant_offset: f64,
}

/// Second orbital shift from occupied orbitals only:
/// Φ²_i = d̂φ_i − Σ_k d_ki φ_k.
pub fn phi2_build(ks: &KsState, mode: &PhotonMode, i: usize) -> Result<ScalarField> {
    let d = dipole_field(mode, &ks.grid)?;
    let dphi = d.mul_field(&ks.orbitals[i]);
    let mut out = dphi.clone();
    for k in 0..ks.orbitals.len() {
        let dki = ks.orbitals[k].inner(&dphi)?;
        out.axpy(-dki, &ks.orbitals[k]);
    }
    Ok(out)
}

/// Occupied-block dipole matrix d_ij = ⟨φ_i|d̂|φ_j⟩ for one mode.
pub fn dipole_matrix(ks: &KsState, mode: &PhotonMode) -> Result<DMatrix<f64>> {
    let n = ks.orbitals.len();
    let d = dipole_field(mode, &ks.grid)?;
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let dphi = d.mul_field(&ks.orbitals[j]);
        for i in 0..n {
            m[(i, j)] = ks.orbitals[i].inner(&dphi)?;
        }
    }
    Ok(m)
}

/// Fock-exchange operator applied to occupied orbital `i`:
/// (u_xi φ_i)(r) = −Σ_j φ_j(r) ∫ w(r,r') φ_j(r')φ_i(r') dr'.
///
/// Returned as the product field, so orbital nodes need no special casing.
pub fn fock_apply(kernel: &SoftCoulomb, orbitals: &[ScalarField], i: usize) -> Result<ScalarField> {
    let grid = orbitals[i].grid().clone();
    let mut out = ScalarField::zeros(&grid);
    for j in 0..orbitals.len() {
        let pair = orbitals[j].mul_field(&orbitals[i]);
        let conv = kernel.convolve(&pair)?;
        let term = orbitals[j].mul_field(&conv);
        out.axpy(-1.0, &term);
    }
    Ok(out)
}

/// Builds Φ¹, Φ² and the dipole matrices for every occupied orbital and mode,
/// warm-starting the Sternheimer solves from a previous shift set.
pub fn build_shifts(
    ks: &KsState,
    modes: &[PhotonMode],
    opts: &ScfOptions,
    warm: Option<&ShiftSet>,
) -> Result<ShiftSet> {
    let n_orb = ks.orbitals.len();
    let mut shifts = ShiftSet::empty(ks.revision);
    for mode in modes {
        shifts.dipole_mat.push(dipole_matrix(ks, mode)?);
    }
    for i in 0..n_orb {
        let mut p1_row = Vec::with_capacity(modes.len());
        let mut p2_row = Vec::with_capacity(modes.len());
        for (a, mode) in modes.iter().enumerate() {
            if mode.lambda_magnitude() == 0.0 {
                p1_row.push(ScalarField::zeros(&ks.grid));
                p2_row.push(ScalarField::zeros(&ks.grid));
                continue;
            }
            let prev = warm
                .and_then(|w| w.phi1.get(i))
                .and_then(|row| row.get(a));
            let (p1, _rep) = phi1_solve(ks, mode, i, &opts.sternheimer, prev)?;
            p1_row.push(p1);
            p2_row.push(phi2_build(ks, mode, i)?);
        }
        shifts.phi1.push(p1_row);
        shifts.phi2.push(p2_row);
    }
    Ok(shifts)
}

/// Photon exchange energy per mode (both spin channels) plus the electron
/// Fock exchange where enabled. Detects stale shifts via the revision stamp.
pub fn exchange_energy(
    ks: &KsState,
    modes: &[PhotonMode],
    shifts: &ShiftSet,
    kernel: Option<&SoftCoulomb>,
    fock: bool,
) -> Result<(f64, Vec<f64>)> {
    if shifts.ks_revision != ks.revision {
        return Err(Error::InvalidInput(format!(
            "stale shifts: revision {} vs state {}",
            shifts.ks_revision, ks.revision
        )));
    }
    let channels = ks.spin.spin_channels();
    let mut e_photon = Vec::with_capacity(modes.len());
    for (a, mode) in modes.iter().enumerate() {
        let d = dipole_field(mode, &ks.grid)?;
        let mut e = 0.0;
        for i in 0..ks.orbitals.len() {
            let dphi = d.mul_field(&ks.orbitals[i]);
            // c.c. doubles both terms: 2*sqrt(w/8) = sqrt(w/2), 2*(1/4) = 1/2
            e += (mode.omega / 2.0).sqrt() * shifts.phi1[i][a].inner(&dphi)?;
            e += 0.5 * shifts.phi2[i][a].inner(&dphi)?;
        }
        e_photon.push(channels * e);
    }
    let mut e_ee = 0.0;
    if fock {
        let kernel = kernel.ok_or_else(|| {
            Error::InvalidInput("Fock exchange requested without an interaction kernel".into())
        })?;
        for i in 0..ks.orbitals.len() {
            let uxphi = fock_apply(kernel, &ks.orbitals, i)?;
            e_ee += 0.5 * channels * uxphi.inner(&ks.orbitals[i])?;
        }
    }
    Ok((e_ee, e_photon))
}

/// w_i = u_xi φ_i + P_i: the exchange inhomogeneity without its −v_x φ_i
/// part. P_i collects the photon terms
/// Σ_α [d̂(√(ω/2)Φ¹_i + ½d̂φ_i) − Σ_k d_ik(√(ω/2)Φ¹_k + d̂φ_k)].
pub fn m_without_vx(
    ks: &KsState,
    modes: &[PhotonMode],
    shifts: &ShiftSet,
    uxphi: Option<&[ScalarField]>,
    i: usize,
) -> Result<ScalarField> {
    let mut m = match uxphi {
        Some(u) => u[i].clone(),
        None => ScalarField::zeros(&ks.grid),
    };
    for (a, mode) in modes.iter().enumerate() {
        if mode.lambda_magnitude() == 0.0 {
            continue;
        }
        let d = dipole_field(mode, &ks.grid)?;
        let sw = (mode.omega / 2.0).sqrt();
        // d( sw*Phi1_i + 1/2 d phi_i )
        let mut inner = shifts.phi1[i][a].clone();
        inner.scale(sw);
        inner.axpy(0.5, &d.mul_field(&ks.orbitals[i]));
        m.axpy(1.0, &d.mul_field(&inner));
        for k in 0..ks.orbitals.len() {
            let dik = shifts.dipole_mat[a][(i, k)];
            if dik == 0.0 {
                continue;
            }
            let mut term = shifts.phi1[k][a].clone();
            term.scale(sw);
            term.axpy(1.0, &d.mul_field(&ks.orbitals[k]));
            m.axpy(-dik, &term);
        }
    }
    Ok(m)
}

/// M_i per the compact OEP equation: −(v_x − u_xi)φ_i plus photon terms.
pub fn build_m(
    ks: &KsState,
    modes: &[PhotonMode],
    shifts: &ShiftSet,
    vx: &ScalarField,
    uxphi: Option<&[ScalarField]>,
    i: usize,
) -> Result<ScalarField> {
    let mut m = m_without_vx(ks, modes, shifts, uxphi, i)?;
    m.axpy(-1.0, &vx.mul_field(&ks.orbitals[i]));
    Ok(m)
}

/// Inhomogeneity Λ_i = ½ Σ_α [|Φ¹|² − ⟨Φ¹|Φ¹⟩ |φ_i|²]; integrates to zero by
/// construction.
pub fn build_lambda(shifts: &ShiftSet, ks: &KsState, i: usize) -> Result<ScalarField> {
    let mut lam = ScalarField::zeros(&ks.grid);
    let phi_sq = ks.orbitals[i].mul_field(&ks.orbitals[i]);
    for a in 0..shifts.phi1[i].len() {
        let p1 = &shifts.phi1[i][a];
        let norm2 = p1.inner(p1)?;
        lam.axpy(0.5, &p1.mul_field(p1));
        lam.axpy(-0.5 * norm2, &phi_sq);
    }
    Ok(lam)
}

/// Pointwise OEP residual S(r) = Σ_i 2(ψ_iφ_i − Λ_i) for one spin channel.
pub fn residual_s(ks: &KsState, shifts: &ShiftSet) -> Result<ScalarField> {
    let mut s = ScalarField::zeros(&ks.grid);
    for i in 0..ks.orbitals.len() {
        s.axpy(2.0, &shifts.psi[i].mul_field(&ks.orbitals[i]));
        s.axpy(-2.0, &shifts.lambda_inh[i]);
    }
    Ok(s)
}

/// v_x ← v_x + c·S.
pub fn update_vx(vx_old: &ScalarField, s: &ScalarField, c: f64) -> ScalarField {
    let mut v = vx_old.clone();
    v.axpy(c, s);
    v
}

/// Per-orbital exchange-energy contribution of orbital `i` (c.c. included),
/// the constant-fixing target for the highest occupied orbital.
fn orbital_exchange_expectation(
    ks: &KsState,
    modes: &[PhotonMode],
    shifts: &ShiftSet,
    uxphi: Option<&[ScalarField]>,
    i: usize,
) -> Result<f64> {
    let mut target = match uxphi {
        Some(u) => u[i].inner(&ks.orbitals[i])?,
        None => 0.0,
    };
    for (a, mode) in modes.iter().enumerate() {
        if mode.lambda_magnitude() == 0.0 {
            continue;
        }
        let d = dipole_field(mode, &ks.grid)?;
        let dphi = d.mul_field(&ks.orbitals[i]);
        target += (mode.omega / 2.0).sqrt() * shifts.phi1[i][a].inner(&dphi)?;
        target += 0.5 * shifts.phi2[i][a].inner(&dphi)?;
    }
    Ok(target)
}

/// Shifts v_x by a constant so the highest occupied orbital's expectation
/// equals its own exchange contribution; returns the applied offset. Gauge
/// fixing only: applying it twice is a no-op.
pub fn fix_constant(
    ks: &KsState,
    modes: &[PhotonMode],
    shifts: &ShiftSet,
    uxphi: Option<&[ScalarField]>,
    vx: &ScalarField,
) -> Result<(ScalarField, f64)> {
    let homo = ks.orbitals.len() - 1;
    let target = orbital_exchange_expectation(ks, modes, shifts, uxphi, homo)?;
    let current = ks.orbitals[homo].inner(&vx.mul_field(&ks.orbitals[homo]))?;
    let offset = target - current;
    let mut out = vx.clone();
    for v in out.values_mut() {
        *v += offset;
    }
    Ok((out, offset))
}

/// KLI closed form: solves the linear self-consistency for v_x given the
/// current shifts (no ψ solves). The unknown expectations ⟨φ_i|v_x|φ_i⟩ obey
/// a small linear system; the highest occupied one is pinned by the
/// constant-fixing rule, which also removes the gauge singularity of the
/// system. Densities are floored at 1e-12 of their maximum, and the
/// resulting potential is clamped outside the trusted-density region
/// (n ≥ 1e-10 of peak) where the division is meaningless.
pub fn kli_solve(
    ks: &KsState,
    modes: &[PhotonMode],
    shifts: &ShiftSet,
    kernel: Option<&SoftCoulomb>,
    fock: bool,
) -> Result<ScalarField> {
    let n_orb = ks.orbitals.len();
    let uxphi: Option<Vec<ScalarField>> = if fock {
        let kernel = kernel.ok_or_else(|| {
            Error::InvalidInput("KLI with Fock exchange needs the interaction kernel".into())
        })?;
        Some(
            (0..n_orb)
                .map(|i| fock_apply(kernel, &ks.orbitals, i))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    // per-spin density with floor
    let mut n_spin = ScalarField::zeros(&ks.grid);
    for orb in &ks.orbitals {
        n_spin.axpy(1.0, &orb.mul_field(orb));
    }
    let floor = 1e-12 * n_spin.max_abs();
    let n_reg = n_spin.map(|v| v.max(floor));

    // base(r) = sum_i [w_i - <w_i|phi_i> phi_i] phi_i / n_spin
    let mut base = ScalarField::zeros(&ks.grid);
    let mut w_fields = Vec::with_capacity(n_orb);
    for i in 0..n_orb {
        let w = m_without_vx(ks, modes, shifts, uxphi.as_deref(), i)?;
        let ovl = w.inner(&ks.orbitals[i])?;
        let mut t = w.mul_field(&ks.orbitals[i]);
        t.axpy(-ovl, &ks.orbitals[i].mul_field(&ks.orbitals[i]));
        base.axpy(1.0, &t);
        w_fields.push(w);
    }
    let base = ScalarField::from_values(
        &ks.grid,
        base.values()
            .iter()
            .zip(n_reg.values())
            .map(|(b, n)| b / n)
            .collect(),
    )?;

    let homo = n_orb - 1;
    let target_homo = orbital_exchange_expectation(ks, modes, shifts, uxphi.as_deref(), homo)?;

    let mut v = DVector::zeros(n_orb);
    v[homo] = target_homo;
    if n_orb > 1 {
        // A_mi = Int phi_m^2 phi_i^2 / n_spin, b_m = Int phi_m^2 base
        let mut a = DMatrix::zeros(n_orb, n_orb);
        let mut b = DVector::zeros(n_orb);
        for m in 0..n_orb {
            let pm2 = ks.orbitals[m].mul_field(&ks.orbitals[m]);
            let pm2_over_n = ScalarField::from_values(
                &ks.grid,
                pm2.values()
                    .iter()
                    .zip(n_reg.values())
                    .map(|(p, n)| p / n)
                    .collect(),
            )?;
            for i in 0..n_orb {
                a[(m, i)] = pm2_over_n.inner(&ks.orbitals[i].mul_field(&ks.orbitals[i]))?;
            }
            b[m] = pm2.inner(&base)?;
        }
        // reduced system over i < homo with V_homo moved to the rhs
        let k = n_orb - 1;
        let mut ared = DMatrix::zeros(k, k);
        let mut bred = DVector::zeros(k);
        for m in 0..k {
            for i in 0..k {
                ared[(m, i)] = (if m == i { 1.0 } else { 0.0 }) - a[(m, i)];
            }
            bred[m] = b[m] + a[(m, homo)] * target_homo;
        }
        let lu = ared.lu();
        let sol = lu
            .solve(&bred)
            .ok_or_else(|| Error::InvalidInput("singular KLI linear system".into()))?;
        for i in 0..k {
            v[i] = sol[i];
        }
    }

    let mut vx = base;
    for i in 0..n_orb {
        let p2 = ks.orbitals[i].mul_field(&ks.orbitals[i]);
        let p2_over_n = ScalarField::from_values(
            &ks.grid,
            p2.values()
                .iter()
                .zip(n_reg.values())
                .map(|(p, n)| p / n)
                .collect(),
        )?;
        vx.axpy(v[i], &p2_over_n);
    }
    // clamp the untrusted low-density region to the range attained where the
    // density is meaningful
    let trust = 1e-10 * n_spin.max_abs();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (vx_i, n_i) in vx.values().iter().zip(n_spin.values()) {
        if *n_i >= trust {
            lo = lo.min(*vx_i);
            hi = hi.max(*vx_i);
        }
    }
    if lo.is_finite() && hi.is_finite() {
        for (vx_i, n_i) in vx.values_mut().iter_mut().zip(n_spin.values()) {
            if *n_i < trust {
                *vx_i = vx_i.clamp(lo, hi);
            }
        }
    }
    Ok(vx)
}

/// The self-consistent OEP (or KLI) cycle: eigensolve, Φ¹ solves, M and Λ,
/// ψ solves, S residual, potential step, constant fix — until both max|S|
/// (or the KLI potential change) and the density change are below tolerance.
pub fn oep_scf(problem: &KsProblem, mut ks: KsState, opts: &ScfOptions) -> Result<ScfOutcome> {
    let t0 = Instant::now();
    let kernel = problem.kernel()?;
    let fock = problem.fock_enabled();
    let hartree = problem.hartree_enabled();
    let modes = &problem.modes;
    let has_photon = modes.iter().any(|m| m.lambda_magnitude() != 0.0);
    let has_x = has_photon || fock;
    let n_orb = problem.spin.n_orbitals()?;
    let n_e = problem.spin.n_electrons() as f64;

    let mut eig = opts.eig.clone();
    eig.seed = opts.seed;
    let mut log: Vec<ScfLogRecord> = Vec::new();
    let mut shifts = ShiftSet::empty(ks.revision);
    let mut prev_density = ks.density.clone();
    let mut c = opts.c_step;
    let mut best_smax = f64::INFINITY;
    let mut vx_backup: Option<(ScalarField, ScalarField)> = None;
    let mut converged = false;
    let mut last_offset = 0.0;
    let mut iterations = 0;

    for outer in 0..opts.max_outer {
        iterations = outer + 1;
        // (1) orbitals consistent with the CURRENT potentials
        if outer % opts.eig_every.max(1) == 0 || ks.orbitals.len() != n_orb {
            let vs = ks.vs();
            let h = KsHamiltonian::new(&vs, &ks.units, ks.stencil_order);
            let res = lowest_states(
                &h,
                &ks.grid,
                n_orb,
                &eig,
                if ks.orbitals.is_empty() {
                    None
                } else {
                    Some(&ks.orbitals)
                },
            )?;
            ks.orbitals = res.orbitals;
            ks.energies = res.energies;
            ks.bump_revision();
        }
        let n_new = ks.density_from_orbitals();
        let charge = n_new.integral();
        if (charge - n_e).abs() > 1e-8 * n_e {
            return Err(Error::ScfNonConvergence(format!(
                "charge leaked at iteration {outer}: {charge} vs {n_e}"
            )));
        }

        // (2) orbital shifts at the current state
        let warm = if shifts.phi1.len() == n_orb {
            Some(&shifts)
        } else {
            None
        };
        let mut new_shifts = build_shifts(&ks, modes, opts, warm)?;

        let uxphi: Option<Vec<ScalarField>> = if fock {
            let kr = kernel.as_ref().expect("fock implies kernel");
            Some(
                (0..n_orb)
                    .map(|i| fock_apply(kr, &ks.orbitals, i))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let e_x = exchange_energy(&ks, modes, &new_shifts, kernel.as_ref(), fock)?;

        // (3) exchange-potential step
        let vx_total = ks.v_x_total();
        let mut s_max = 0.0;
        let method_now = if opts.method == XcMethod::Oep && outer < opts.kli_init_iters {
            XcMethod::Kli
        } else {
            opts.method
        };
        if has_x {
            match method_now {
                XcMethod::Kli => {
                    let vx_new = kli_solve(&ks, modes, &new_shifts, kernel.as_ref(), fock)?;
                    let mut delta = vx_new.clone();
                    delta.axpy(-1.0, &vx_total);
                    s_max = delta.max_abs();
                    let mixed = {
                        let mut v = vx_total.clone();
                        v.axpy(opts.kli_mixing, &delta);
                        v
                    };
                    let (fixed, off) =
                        fix_constant(&ks, modes, &new_shifts, uxphi.as_deref(), &mixed)?;
                    last_offset = off;
                    store_vx(&mut ks, fixed, has_photon, fock);
                }
                XcMethod::Oep => {
                    for i in 0..n_orb {
                        new_shifts.m_shift.push(build_m(
                            &ks,
                            modes,
                            &new_shifts,
                            &vx_total,
                            uxphi.as_deref(),
                            i,
                        )?);
                        new_shifts
                            .lambda_inh
                            .push(build_lambda(&new_shifts, &ks, i)?);
                    }
                    for i in 0..n_orb {
                        let prev = shifts.psi.get(i);
                        let (psi, _rep) =
                            psi_solve(&ks, &new_shifts.m_shift[i], i, &opts.sternheimer, prev)?;
                        new_shifts.psi.push(psi);
                    }
                    let s = residual_s(&ks, &new_shifts)?;
                    s_max = s.max_abs();
                    // divergence guard: reject a step that blew up 10x past
                    // the best residual seen, halve c, retry from backup
                    if s_max > 10.0 * best_smax {
                        if let Some((ve, vp)) = vx_backup.take() {
                            ks.v_x_electron = ve;
                            ks.v_x_photon = vp;
                            ks.bump_revision();
                        }
                        c *= 0.5;
                        shifts = ShiftSet::empty(ks.revision);
                        continue;
                    }
                    best_smax = best_smax.min(s_max);
                    vx_backup = Some((ks.v_x_electron.clone(), ks.v_x_photon.clone()));
                    let stepped = update_vx(&vx_total, &s, c);
                    let (fixed, off) =
                        fix_constant(&ks, modes, &new_shifts, uxphi.as_deref(), &stepped)?;
                    last_offset = off;
                    store_vx(&mut ks, fixed, has_photon, fock);
                }
            }
        }
        shifts = new_shifts;

        // (4) density mixing for the next Hartree build
        let dn = density_residual(&n_new, &prev_density)?;
        let mut mixed = prev_density.clone();
        mixed.scale(1.0 - opts.mixing);
        mixed.axpy(opts.mixing, &n_new);
        ks.density = if outer == 0 { n_new.clone() } else { mixed };
        prev_density = ks.density.clone();
        if hartree {
            let kr = kernel.as_ref().expect("hartree implies kernel");
            ks.v_hartree = kr.convolve(&ks.density)?;
        }

        let xc_now = XcBreakdown {
            e_x_electron: e_x.0,
            e_x_photon: e_x.1.clone(),
            v_x: ks.v_x_total(),
            constant_offset: last_offset,
        };
        let e_tot = total_energy(&ks, &xc_now);
        log.push(ScfLogRecord {
            iter: outer,
            e_tot,
            e_x_photon: e_x.1.iter().sum(),
            s_max,
            density_change: dn,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });

        if std::env::var("CAVKS_SCF_DEBUG").is_ok() {
            eprintln!(
                "dbg it={outer} e0={:.8} vxmax={:.4e} off={:.4e} p1n={:.4e} dn={:.3e} smax={:.3e}",
                ks.energies[0],
                ks.v_x_total().max_abs(),
                last_offset,
                shifts.phi1[0][0].norm(),
                dn,
                s_max
            );
        }
        let s_ok = !has_x || (s_max < opts.tol_s && method_now == opts.method);
        if s_ok && dn < opts.tol_density && outer > 0 {
            converged = true;
            break;
        }
        if !has_x && outer == 0 && dn < opts.tol_density {
            // bare/electrostatic problem starting from its own solution
            converged = true;
            break;
        }
    }

    // final consistent state: re-diagonalize once with the final potential
    let vs = ks.vs();
    let h = KsHamiltonian::new(&vs, &ks.units, ks.stencil_order);
    let res = lowest_states(&h, &ks.grid, n_orb, &eig, Some(&ks.orbitals))?;
    ks.orbitals = res.orbitals;
    ks.energies = res.energies;
    ks.density = ks.density_from_orbitals();
    ks.bump_revision();
    if hartree {
        let kr = kernel.as_ref().expect("hartree implies kernel");
        ks.v_hartree = kr.convolve(&ks.density)?;
    }
    let final_shifts = build_shifts(&ks, modes, opts, Some(&shifts))?;
    let uxphi: Option<Vec<ScalarField>> = if fock {
        let kr = kernel.as_ref().expect("fock implies kernel");
        Some(
            (0..n_orb)
                .map(|i| fock_apply(kr, &ks.orbitals, i))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let mut final_shifts = final_shifts;
    let vx_total = ks.v_x_total();
    for i in 0..n_orb {
        final_shifts.m_shift.push(build_m(
            &ks,
            modes,
            &final_shifts,
            &vx_total,
            uxphi.as_deref(),
            i,
        )?);
        final_shifts
            .lambda_inh
            .push(build_lambda(&final_shifts, &ks, i)?);
    }
    let e_x = exchange_energy(&ks, modes, &final_shifts, kernel.as_ref(), fock)?;
    let xc = XcBreakdown {
        e_x_electron: e_x.0,
        e_x_photon: e_x.1.clone(),
        v_x: ks.v_x_total(),
        constant_offset: last_offset,
    };
    Ok(ScfOutcome {
        ks,
        xc,
        shifts: final_shifts,
        log,
        converged,
        iterations,
    })
}

/// Uninspectable split of the exchange potential: photon-coupled runs carry
/// the working total in `v_x_photon`, photon-free Fock runs in
/// `v_x_electron`; only the sum is physical.
fn store_vx(ks: &mut KsState, vx_total: ScalarField, has_photon: bool, _fock: bool) {
    if has_photon {
        ks.v_x_photon = vx_total;
        ks.v_x_electron = ScalarField::zeros(&ks.grid);
    } else {
        ks.v_x_electron = vx_total;
        ks.v_x_photon = ScalarField::zeros(&ks.grid);
    }
    ks.bump_revision();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigensolver::{dense_spectrum, EigenOptions};
    use crate::hamiltonian::{ExternalPotential, SpinConfig};
    use crate::realspace::{Grid, UnitSystem};
    use crate::scf_driver::initial_state;
    use crate::sternheimer::SternheimerOptions;

    /// Small 1D single-electron state in a soft well, dense-solved.
    fn toy_state(n: usize, lam: f64, omega: f64) -> (KsState, PhotonMode) {
        let grid = Grid::new_1d(n, 0.35).unwrap();
        let units = UnitSystem::hartree();
        let vext = ScalarField::from_fn(&grid, |x, _| 0.13 * x * x + 0.05 * (1.3 * x).sin());
        let vs = vext.clone();
        let h = KsHamiltonian::new(&vs, &units, 4);
        let dense = dense_spectrum(&h, &grid, 4096).unwrap();
        let ks = KsState {
            grid: grid.clone(),
            units,
            spin: SpinConfig::single_electron(),
            stencil_order: 4,
            orbitals: vec![dense.orbitals[0].clone()],
            energies: vec![dense.energies[0]],
            density: dense.orbitals[0].mul_field(&dense.orbitals[0]),
            v_ext: vext,
            v_hartree: ScalarField::zeros(&grid),
            v_x_electron: ScalarField::zeros(&grid),
            v_x_photon: ScalarField::zeros(&grid),
            revision: 0,
        };
        let mode = PhotonMode::new(omega, vec![lam], 4).unwrap();
        (ks, mode)
    }

    fn shifts_for(ks: &KsState, mode: &PhotonMode) -> ShiftSet {
        let opts = ScfOptions::default();
        build_shifts(ks, std::slice::from_ref(mode), &opts, None).unwrap()
    }

    #[test]
    fn zero_coupling_zeroes_everything() {
        let (ks, mode) = toy_state(32, 0.0, 0.9);
        let shifts = shifts_for(&ks, &mode);
        assert_eq!(shifts.phi1[0][0].max_abs(), 0.0);
        let (e_ee, e_pt) = exchange_energy(&ks, &[mode], &shifts, None, false).unwrap();
        assert_eq!(e_ee, 0.0);
        assert_eq!(e_pt[0], 0.0);
        let lam = build_lambda(&shifts, &ks, 0).unwrap();
        assert_eq!(lam.max_abs(), 0.0);
        // single electron, u_x = v_x = 0: M vanishes identically
        let m = build_m(&ks, &[], &shifts, &ks.v_x_total(), None, 0).unwrap();
        assert_eq!(m.max_abs(), 0.0);
    }

    #[test]
    fn phi2_orthogonal_to_occupied_and_matches_dense() {
        let (ks, mode) = toy_state(40, 0.08, 0.9);
        let p2 = phi2_build(&ks, &mode, 0).unwrap();
        assert!(ks.orbitals[0].inner(&p2).unwrap().abs() < 1e-12);
        // dense completeness: Phi2 = sum_unocc d_j0 phi_j
        let vs = ks.vs();
        let h = KsHamiltonian::new(&vs, &ks.units, 4);
        let dense = dense_spectrum(&h, &ks.grid, 4096).unwrap();
        let d = dipole_field(&mode, &ks.grid).unwrap();
        let dphi = d.mul_field(&ks.orbitals[0]);
        let mut want = ScalarField::zeros(&ks.grid);
        for j in 1..ks.grid.len() {
            let c = dense.orbitals[j].inner(&dphi).unwrap();
            want.axpy(c, &dense.orbitals[j]);
        }
        // sign gauge of dense orbitals cancels in the projector sum
        want.axpy(-1.0, &p2);
        assert!(want.max_abs() < 1e-10, "{}", want.max_abs());
    }

    #[test]
    fn lambda_integrates_to_zero_and_scales_quadratically() {
        let (ks, mode) = toy_state(36, 0.05, 0.9);
        let shifts = shifts_for(&ks, &mode);
        let lam1 = build_lambda(&shifts, &ks, 0).unwrap();
        assert!(lam1.integral().abs() < 1e-12);

        let mode2 = PhotonMode::new(0.9, vec![0.10], 4).unwrap();
        let shifts2 = shifts_for(&ks, &mode2);
        let lam2 = build_lambda(&shifts2, &ks, 0).unwrap();
        let ratio = lam2.max_abs() / lam1.max_abs();
        assert!((ratio - 4.0).abs() < 1e-3 * 4.0, "ratio {ratio}");
    }

    #[test]
    fn exchange_energy_quadratic_in_lambda() {
        let (ks, mode) = toy_state(36, 0.02, 0.9);
        let shifts = shifts_for(&ks, &mode);
        let (_, e1) = exchange_energy(&ks, &[mode], &shifts, None, false).unwrap();
        let mode2 = PhotonMode::new(0.9, vec![0.04], 4).unwrap();
        let shifts2 = shifts_for(&ks, &mode2);
        let (_, e2) = exchange_energy(&ks, &[mode2], &shifts2, None, false).unwrap();
        let ratio = e2[0] / e1[0];
        assert!((ratio - 4.0).abs() < 1e-3 * 4.0, "ratio {ratio}");
    }

    #[test]
    fn stale_shifts_detected() {
        let (mut ks, mode) = toy_state(32, 0.05, 0.9);
        let shifts = shifts_for(&ks, &mode);
        ks.bump_revision();
        assert!(exchange_energy(&ks, &[mode], &shifts, None, false).is_err());
    }

    #[test]
    fn single_orbital_m_reduction() {
        // M = d(sw*Phi1 + 1/2 d phi) - d_11(sw*Phi1 + d phi) for one orbital
        // with v_x = u_x = 0, transcribed independently here
        let (ks, mode) = toy_state(36, 0.07, 0.8);
        let shifts = shifts_for(&ks, &mode);
        let m = build_m(&ks, &[mode.clone()], &shifts, &ks.v_x_total(), None, 0).unwrap();
        let d = dipole_field(&mode, &ks.grid).unwrap();
        let sw = (mode.omega / 2.0).sqrt();
        let phi = &ks.orbitals[0];
        let d11 = phi.inner(&d.mul_field(phi)).unwrap();
        let p1 = &shifts.phi1[0][0];
        let mut want = ScalarField::zeros(&ks.grid);
        // term by term
        for i in 0..ks.grid.len() {
            let dv = d.values()[i];
            want.values_mut()[i] = dv * (sw * p1.values()[i] + 0.5 * dv * phi.values()[i])
                - d11 * (sw * p1.values()[i] + dv * phi.values()[i]);
        }
        want.axpy(-1.0, &m);
        assert!(want.max_abs() < 1e-12, "{}", want.max_abs());
        // <M|phi> is real and finite by construction; check it matches the
        // constant-fix target arithmetic
        let t = orbital_exchange_expectation(&ks, &[mode], &shifts, None, 0).unwrap();
        assert!(t.is_finite());
    }

    #[test]
    fn s_residual_invariant_under_constant_shift() {
        let (mut ks, mode) = toy_state(32, 0.06, 0.8);
        let modes = vec![mode];
        let opts = ScfOptions::default();
        let shifts0 = build_shifts(&ks, &modes, &opts, None).unwrap();

        let compute_s = |ks: &KsState, shifts: &ShiftSet| -> ScalarField {
            let vx = ks.v_x_total();
            let mut sh = shifts.clone();
            sh.m_shift.clear();
            sh.lambda_inh.clear();
            sh.psi.clear();
            for i in 0..1 {
                sh.m_shift
                    .push(build_m(ks, &modes, &sh, &vx, None, i).unwrap());
                sh.lambda_inh.push(build_lambda(&sh, ks, i).unwrap());
            }
            for i in 0..1 {
                let (psi, _) =
                    psi_solve(ks, &sh.m_shift[i], i, &SternheimerOptions::default(), None).unwrap();
                sh.psi.push(psi);
            }
            residual_s(ks, &sh).unwrap()
        };
        let s0 = compute_s(&ks, &shifts0);
        // shift v_x by a constant: same orbitals, same S
        for v in ks.v_x_photon.values_mut() {
            *v += 5.0;
        }
        // note: orbitals were solved with the OLD vs; a constant shift moves
        // every eigenvalue equally, so shift energies to stay consistent
        for e in &mut ks.energies {
            *e += 5.0;
        }
        ks.bump_revision();
        let shifts1 = build_shifts(&ks, &modes, &opts, None).unwrap();
        let s1 = compute_s(&ks, &shifts1);
        let mut diff = s0.clone();
        diff.axpy(-1.0, &s1);
        assert!(diff.max_abs() < 1e-9 * s0.max_abs().max(1e-30), "{}", diff.max_abs());
    }

    #[test]
    fn update_and_fix_constant_behave() {
        let (ks, mode) = toy_state(32, 0.06, 0.8);
        let shifts = shifts_for(&ks, &mode);
        let s = ScalarField::zeros(&ks.grid);
        let vx0 = ks.v_x_total();
        let v1 = update_vx(&vx0, &s, 0.1);
        assert_eq!(v1.max_abs(), vx0.max_abs());

        // fix_constant is idempotent and absorbs any constant shift
        let modes = [mode];
        let some_vx = ScalarField::from_fn(&ks.grid, |x, _| 0.01 * x * x);
        let (fixed, _) = fix_constant(&ks, &modes, &shifts, None, &some_vx).unwrap();
        let mut shifted = some_vx.clone();
        for v in shifted.values_mut() {
            *v += 5.0;
        }
        let (fixed2, _) = fix_constant(&ks, &modes, &shifts, None, &shifted).unwrap();
        let mut diff = fixed.clone();
        diff.axpy(-1.0, &fixed2);
        assert!(diff.max_abs() < 1e-10);
        let (fixed3, off3) = fix_constant(&ks, &modes, &shifts, None, &fixed).unwrap();
        assert!(off3.abs() < 1e-12);
        let mut diff3 = fixed.clone();
        diff3.axpy(-1.0, &fixed3);
        assert!(diff3.max_abs() < 1e-12);
    }

    #[test]
    fn kli_single_orbital_electronic_equals_exact_oep() {
        // one doubly-occupied orbital with Fock exchange: KLI gives
        // v_x = u_x + const, the exact single-orbital OEP potential
        let grid = Grid::new_1d(61, 0.4).unwrap();
        let problem = KsProblem {
            grid: grid.clone(),
            units: UnitSystem::hartree(),
            stencil_order: 4,
            potential: ExternalPotential::SoftCoulombChain {
                centers: vec![(-1.0, -1.0), (1.0, -1.0)],
                softening: 1.0,
            },
            spin: SpinConfig::closed_shell(2).unwrap(),
            modes: vec![],
            interaction: crate::scf_driver::Interaction::SoftCoulomb1d {
                softening: 1.0,
                hartree: true,
                fock: true,
            },
        };
        let opts = ScfOptions {
            eig: EigenOptions {
                tol: 1e-11,
                ..EigenOptions::default()
            },
            ..ScfOptions::default()
        };
        let state = initial_state(&problem, &opts).unwrap();
        let kernel = problem.kernel().unwrap().unwrap();
        let shifts = build_shifts(&state, &[], &opts, None).unwrap();
        let vx = kli_solve(&state, &[], &shifts, Some(&kernel), true).unwrap();
        // u_x(r) = (u_x phi)(r)/phi(r); with one orbital u_x = -v_H(|phi|^2)
        let uxphi = fock_apply(&kernel, &state.orbitals, 0).unwrap();
        let phi = &state.orbitals[0];
        // compare in the high-density region only
        let peak = phi.max_abs();
        let mut worst = 0.0f64;
        let mut shift = None;
        for i in 0..grid.len() {
            if phi.values()[i].abs() > 0.05 * peak {
                let ux = uxphi.values()[i] / phi.values()[i];
                let d = vx.values()[i] - ux;
                match shift {
                    None => shift = Some(d),
                    Some(s) => worst = worst.max((d - s).abs()),
                }
            }
        }
        assert!(worst < 1e-9, "KLI vs u_x + const: {worst}");
    }
}
