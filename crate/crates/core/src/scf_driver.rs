//! The full Kohn-Sham problem: v_s assembly from external + Hartree +
//! exchange pieces, the outer self-consistent loop entry point, and restart
//! checkpoints.

use crate::eigensolver::{lowest_states, EigenOptions};
use crate::hamiltonian::{build_vext, ExternalPotential, KsHamiltonian, PhotonMode, SpinConfig};
use crate::photon_xc::{self, ShiftSet, XcBreakdown, XcMethod};
use crate::realspace::{
    dump_field, parse_field, soft_coulomb_kernel, Grid, ScalarField, SoftCoulomb, UnitSystem,
};
use crate::sternheimer::SternheimerOptions;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::sync::Arc;

/// Electron-electron treatment. Chains use the 1D soft-Coulomb kernel with a
/// Hartree term and (optionally) exact Fock exchange handled by the same OEP
/// machinery as the photon exchange.
#[derive(Debug, Clone, PartialEq)]
pub enum Interaction {
    /// No electron-electron interaction (single-electron models).
    None,
    SoftCoulomb1d {
        softening: f64,
        hartree: bool,
        fock: bool,
    },
}

/// Full problem statement for one ground-state run.
#[derive(Debug, Clone)]
pub struct KsProblem {
    pub grid: Arc<Grid>,
    pub units: UnitSystem,
    pub stencil_order: usize,
    pub potential: ExternalPotential,
    pub spin: SpinConfig,
    pub modes: Vec<PhotonMode>,
    pub interaction: Interaction,
}

impl KsProblem {
    pub fn kernel(&self) -> Result<Option<SoftCoulomb>> {
        match &self.interaction {
            Interaction::None => Ok(None),
            Interaction::SoftCoulomb1d { softening, .. } => {
                Ok(Some(soft_coulomb_kernel(&self.grid, *softening)?))
            }
        }
    }

    pub fn hartree_enabled(&self) -> bool {
        matches!(
            self.interaction,
            Interaction::SoftCoulomb1d { hartree: true, .. }
        )
    }

    pub fn fock_enabled(&self) -> bool {
        matches!(self.interaction, Interaction::SoftCoulomb1d { fock: true, .. })
    }
}

/// Converged (or best-effort) Kohn-Sham state.
///
/// `v_x_electron` and `v_x_photon` sum to the exchange potential entering
/// v_s; only the sum is physical. Runs without electron-electron exchange
/// keep everything in `v_x_photon` and vice versa; combined runs seed
/// `v_x_electron` once and carry OEP updates in `v_x_photon`.
#[derive(Debug, Clone)]
pub struct KsState {
    pub grid: Arc<Grid>,
    pub units: UnitSystem,
    pub spin: SpinConfig,
    pub stencil_order: usize,
    pub orbitals: Vec<ScalarField>,
    pub energies: Vec<f64>,
    pub density: ScalarField,
    pub v_ext: ScalarField,
    pub v_hartree: ScalarField,
    pub v_x_electron: ScalarField,
    pub v_x_photon: ScalarField,
    pub revision: u64,
}

impl KsState {
    /// v_s = v_ext + v_H + v_x (all exchange pieces).
    pub fn vs(&self) -> ScalarField {
        let mut v = self.v_ext.clone();
        v.axpy(1.0, &self.v_hartree);
        v.axpy(1.0, &self.v_x_electron);
        v.axpy(1.0, &self.v_x_photon);
        v
    }

    pub fn v_x_total(&self) -> ScalarField {
        let mut v = self.v_x_electron.clone();
        v.axpy(1.0, &self.v_x_photon);
        v
    }

    /// Occupation per spatial orbital (1 or 2).
    pub fn occupation(&self) -> f64 {
        self.spin.occupation()
    }

    /// Rebuilds n(r) = occ · Σ_i |φ_i|² from the stored orbitals.
    pub fn density_from_orbitals(&self) -> ScalarField {
        let mut n = ScalarField::zeros(&self.grid);
        for orb in &self.orbitals {
            let sq = orb.mul_field(orb);
            n.axpy(self.occupation(), &sq);
        }
        n
    }

    pub fn charge(&self) -> f64 {
        self.density.integral()
    }

    pub fn bump_revision(&mut self) {
        self.revision += 1;
    }
}

/// Outer-loop controls.
#[derive(Debug, Clone)]
pub struct ScfOptions {
    pub method: XcMethod,
    pub tol_density: f64,
    pub tol_s: f64,
    pub max_outer: usize,
    /// Linear density mixing fraction in (0, 1].
    pub mixing: f64,
    /// OEP potential step c in v_x ← v_x + c·S.
    pub c_step: f64,
    pub seed: u64,
    /// Antisymmetric seed added to the initial exchange potential so
    /// broken-symmetry branches are reachable deterministically.
    pub symmetry_break_amplitude: f64,
    pub eig: EigenOptions,
    pub sternheimer: SternheimerOptions,
    /// Re-diagonalize the orbitals every this many outer iterations.
    pub eig_every: usize,
    /// KLI potential mixing fraction.
    pub kli_mixing: f64,
    /// For OEP runs: number of initial iterations driven by the KLI closed
    /// form before switching to S-residual stepping (KLI is a robust
    /// starting point, and reaches broken-symmetry branches reliably).
    pub kli_init_iters: usize,
}

impl Default for ScfOptions {
    fn default() -> Self {
        ScfOptions {
            method: XcMethod::Oep,
            tol_density: 1e-9,
            tol_s: 1e-8,
            max_outer: 1000,
            mixing: 0.3,
            c_step: 0.1,
            seed: 1,
            symmetry_break_amplitude: 0.0,
            eig: EigenOptions::default(),
            sternheimer: SternheimerOptions::default(),
            eig_every: 1,
            kli_mixing: 0.5,
            kli_init_iters: 0,
        }
    }
}

/// One convergence-log record per outer iteration.
#[derive(Debug, Clone)]
pub struct ScfLogRecord {
    pub iter: usize,
    pub e_tot: f64,
    pub e_x_photon: f64,
    pub s_max: f64,
    pub density_change: f64,
    pub wall_seconds: f64,
}

pub fn format_log(records: &[ScfLogRecord]) -> String {
    let mut s = String::from("iter\te_tot\te_x_photon\tmax_s\tdensity_change\twall_s\n");
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{:.12e}\t{:.12e}\t{:.3e}\t{:.3e}\t{:.3}",
            r.iter, r.e_tot, r.e_x_photon, r.s_max, r.density_change, r.wall_seconds
        );
    }
    s
}

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct ScfOutcome {
    pub ks: KsState,
    pub xc: XcBreakdown,
    pub shifts: ShiftSet,
    pub log: Vec<ScfLogRecord>,
    pub converged: bool,
    pub iterations: usize,
}

/// ∫ |n_new − n_old| dr.
pub fn density_residual(n_new: &ScalarField, n_old: &ScalarField) -> Result<f64> {
    if n_new.grid().dims() != n_old.grid().dims() {
        return Err(Error::GridMismatch("density residual".into()));
    }
    let dv = n_new.grid().cell_volume();
    Ok(n_new
        .values()
        .iter()
        .zip(n_old.values())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        * dv)
}

/// Builds the initial state: bare-potential eigensolve, Hartree from the
/// resulting density, zero exchange potential (plus the symmetry-break seed).
pub fn initial_state(problem: &KsProblem, opts: &ScfOptions) -> Result<KsState> {
    let v_ext = build_vext(&problem.potential, &problem.grid, &problem.units)?;
    let n_orb = problem.spin.n_orbitals()?;
    let mut state = KsState {
        grid: problem.grid.clone(),
        units: problem.units.clone(),
        spin: problem.spin,
        stencil_order: problem.stencil_order,
        orbitals: Vec::new(),
        energies: Vec::new(),
        density: ScalarField::zeros(&problem.grid),
        v_ext: v_ext.clone(),
        v_hartree: ScalarField::zeros(&problem.grid),
        v_x_electron: ScalarField::zeros(&problem.grid),
        v_x_photon: ScalarField::zeros(&problem.grid),
        revision: 0,
    };
    if opts.symmetry_break_amplitude != 0.0 {
        // seed along the summed coordinates (odd under r -> -r)
        let amp = opts.symmetry_break_amplitude;
        let mut seed = ScalarField::coordinate(&problem.grid, 0);
        if problem.grid.ndim() == 2 {
            seed.axpy(1.0, &ScalarField::coordinate(&problem.grid, 1));
        }
        state.v_x_photon.axpy(amp, &seed);
    }
    let mut eig = opts.eig.clone();
    eig.seed = opts.seed;
    let vs = state.vs();
    let h = KsHamiltonian::new(&vs, &problem.units, problem.stencil_order);
    let res = lowest_states(&h, &problem.grid, n_orb, &eig, None)?;
    state.orbitals = res.orbitals;
    state.energies = res.energies;
    state.density = state.density_from_orbitals();
    if problem.hartree_enabled() {
        let kernel = problem.kernel()?.expect("hartree implies kernel");
        state.v_hartree = kernel.convolve(&state.density)?;
    }
    state.bump_revision();
    Ok(state)
}

/// Total energy: Σ occ·ε − E_H − ∫v_x n + E_x(ee) + Σ_α E_x(α).
///
/// The eigenvalue sum double-counts the Hartree term once (∫v_H·n = 2 E_H)
/// and counts ∫v_x·n instead of the orbital-functional exchange energies, so
/// both are corrected explicitly.
pub fn total_energy(ks: &KsState, xc: &XcBreakdown) -> f64 {
    let occ = ks.occupation();
    let band: f64 = ks.energies.iter().map(|e| occ * e).sum();
    let e_h = 0.5 * ks.v_hartree.inner(&ks.density).unwrap_or(0.0);
    let vx_n = ks.v_x_total().inner(&ks.density).unwrap_or(0.0);
    band - e_h - vx_n + xc.e_x_electron + xc.e_x_photon.iter().sum::<f64>()
}

/// Runs the ground-state SCF (OEP or KLI per `opts.method`).
pub fn run_ground_state(problem: &KsProblem, opts: &ScfOptions) -> Result<ScfOutcome> {
    let state = initial_state(problem, opts)?;
    photon_xc::oep_scf(problem, state, opts)
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned plain-text container of every KsState field plus the
// shift set. Layout: a `CAVKS-CHECKPOINT v1` line, `scalar`/`field` records,
// fields in the dump format of `realspace`.
// ---------------------------------------------------------------------------

pub fn write_checkpoint(ks: &KsState, shifts: &ShiftSet) -> String {
    let mut s = String::from("CAVKS-CHECKPOINT v1\n");
    let _ = writeln!(
        s,
        "units {:.17e} {} {}",
        ks.units.kinetic_coeff, ks.units.energy_unit, ks.units.length_unit
    );
    let _ = writeln!(s, "spin {} {}", ks.spin.n_up, ks.spin.n_down);
    let _ = writeln!(s, "stencil_order {}", ks.stencil_order);
    let _ = writeln!(s, "revision {}", ks.revision);
    let _ = write!(s, "energies {}", ks.energies.len());
    for e in &ks.energies {
        let _ = write!(s, " {e:.17e}");
    }
    s.push('\n');
    let mut put = |name: &str, f: &ScalarField| {
        let _ = writeln!(s, "field {name}");
        s.push_str(&dump_field(f, Some(&ks.units)));
    };
    put("v_ext", &ks.v_ext);
    put("v_hartree", &ks.v_hartree);
    put("v_x_electron", &ks.v_x_electron);
    put("v_x_photon", &ks.v_x_photon);
    put("density", &ks.density);
    for (i, orb) in ks.orbitals.iter().enumerate() {
        put(&format!("orbital_{i}"), orb);
    }
    for (i, row) in shifts.phi1.iter().enumerate() {
        for (a, f) in row.iter().enumerate() {
            put(&format!("phi1_{i}_{a}"), f);
        }
    }
    for (i, row) in shifts.phi2.iter().enumerate() {
        for (a, f) in row.iter().enumerate() {
            put(&format!("phi2_{i}_{a}"), f);
        }
    }
    for (i, f) in shifts.m_shift.iter().enumerate() {
        put(&format!("m_{i}"), f);
    }
    for (i, f) in shifts.lambda_inh.iter().enumerate() {
        put(&format!("lambda_{i}"), f);
    }
    for (i, f) in shifts.psi.iter().enumerate() {
        put(&format!("psi_{i}"), f);
    }
    s
}

/// Reads back a checkpoint written by [`write_checkpoint`]. Shift fields are
/// keyed by name; missing groups (e.g. ψ for KLI runs) are simply absent.
pub fn read_checkpoint(text: &str) -> Result<(KsState, ShiftSet)> {
    let mut lines = text.lines().peekable();
    let head = lines.next().ok_or_else(|| Error::Parse("empty checkpoint".into()))?;
    if head.trim() != "CAVKS-CHECKPOINT v1" {
        return Err(Error::Parse(format!("unknown checkpoint header {head:?}")));
    }
    let mut units: Option<UnitSystem> = None;
    let mut spin: Option<SpinConfig> = None;
    let mut order = 4usize;
    let mut revision = 0u64;
    let mut energies: Vec<f64> = Vec::new();
    let mut fields: Vec<(String, ScalarField)> = Vec::new();

    while let Some(line) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("units") => {
                let kin: f64 = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Parse("bad units line".into()))?;
                let eu = tok.next().unwrap_or("-").to_string();
                let lu = tok.next().unwrap_or("-").to_string();
                units = Some(UnitSystem {
                    kinetic_coeff: kin,
                    energy_unit: eu,
                    length_unit: lu,
                });
            }
            Some("spin") => {
                let up: usize = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Parse("bad spin".into()))?;
                let dn: usize = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Parse("bad spin".into()))?;
                spin = Some(SpinConfig { n_up: up, n_down: dn });
            }
            Some("stencil_order") => {
                order = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Parse("bad stencil_order".into()))?;
            }
            Some("revision") => {
                revision = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Parse("bad revision".into()))?;
            }
            Some("energies") => {
                let k: usize = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Parse("bad energies".into()))?;
                energies = tok
                    .take(k)
                    .map(|t| t.parse::<f64>().map_err(|_| Error::Parse("bad energy".into())))
                    .collect::<Result<_>>()?;
                if energies.len() != k {
                    return Err(Error::Parse("energy count mismatch".into()));
                }
            }
            Some("field") => {
                let name = tok
                    .next()
                    .ok_or_else(|| Error::Parse("unnamed field".into()))?
                    .to_string();
                // a field block is a header line plus grid.len() value lines
                let header = lines
                    .next()
                    .ok_or_else(|| Error::Parse("truncated field".into()))?;
                let npts: usize = {
                    let t: Vec<&str> = header.split_whitespace().collect();
                    let nd: usize = t
                        .first()
                        .and_then(|x| x.parse().ok())
                        .ok_or_else(|| Error::Parse("bad field header".into()))?;
                    t[1..1 + nd]
                        .iter()
                        .map(|x| x.parse::<usize>().unwrap_or(0))
                        .product()
                };
                let mut block = String::from(header);
                block.push('\n');
                for _ in 0..npts {
                    block.push_str(
                        lines
                            .next()
                            .ok_or_else(|| Error::Parse("truncated field values".into()))?,
                    );
                    block.push('\n');
                }
                fields.push((name, parse_field(&block)?));
            }
            Some(other) => {
                return Err(Error::Parse(format!("unknown checkpoint record {other:?}")));
            }
            None => {}
        }
    }

    let units = units.ok_or_else(|| Error::Parse("missing units".into()))?;
    let spin = spin.ok_or_else(|| Error::Parse("missing spin".into()))?;
    let take = |name: &str| -> Result<ScalarField> {
        fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| f.clone())
            .ok_or_else(|| Error::Parse(format!("missing field {name}")))
    };
    let v_ext = take("v_ext")?;
    let grid = v_ext.grid().clone();
    let mut orbitals = Vec::new();
    for i in 0.. {
        match fields.iter().find(|(n, _)| *n == format!("orbital_{i}")) {
            Some((_, f)) => orbitals.push(f.clone()),
            None => break,
        }
    }
    let ks = KsState {
        grid: grid.clone(),
        units,
        spin,
        stencil_order: order,
        orbitals,
        energies,
        density: take("density")?,
        v_ext,
        v_hartree: take("v_hartree")?,
        v_x_electron: take("v_x_electron")?,
        v_x_photon: take("v_x_photon")?,
        revision,
    };
    let mut shifts = ShiftSet::empty(ks.revision);
    for i in 0.. {
        let mut row = Vec::new();
        for a in 0.. {
            match fields.iter().find(|(n, _)| *n == format!("phi1_{i}_{a}")) {
                Some((_, f)) => row.push(f.clone()),
                None => break,
            }
        }
        if row.is_empty() {
            break;
        }
        shifts.phi1.push(row);
    }
    for i in 0.. {
        let mut row = Vec::new();
        for a in 0.. {
            match fields.iter().find(|(n, _)| *n == format!("phi2_{i}_{a}")) {
                Some((_, f)) => row.push(f.clone()),
                None => break,
            }
        }
        if row.is_empty() {
            break;
        }
        shifts.phi2.push(row);
    }
    for i in 0.. {
        match fields.iter().find(|(n, _)| *n == format!("m_{i}")) {
            Some((_, f)) => shifts.m_shift.push(f.clone()),
            None => break,
        }
    }
    for i in 0.. {
        match fields.iter().find(|(n, _)| *n == format!("lambda_{i}")) {
            Some((_, f)) => shifts.lambda_inh.push(f.clone()),
            None => break,
        }
    }
    for i in 0.. {
        match fields.iter().find(|(n, _)| *n == format!("psi_{i}")) {
            Some((_, f)) => shifts.psi.push(f.clone()),
            None => break,
        }
    }
    Ok((ks, shifts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_residual_basics() {
        let grid = Grid::new_1d(21, 0.5).unwrap();
        let a = ScalarField::from_fn(&grid, |x, _| (-(x * x)).exp());
        assert_eq!(density_residual(&a, &a).unwrap(), 0.0);
        // disjoint unit-charge densities integrate to 2
        let mut u = ScalarField::zeros(&grid);
        let mut v = ScalarField::zeros(&grid);
        u.values_mut()[3] = 2.0; // integral = 2*0.5 = 1
        v.values_mut()[17] = 2.0;
        assert!((density_residual(&u, &v).unwrap() - 2.0).abs() < 1e-14);
        let other = Grid::new_1d(22, 0.5).unwrap();
        let w = ScalarField::zeros(&other);
        assert!(density_residual(&u, &w).is_err());
    }
}
