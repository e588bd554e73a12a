//! Model library: external potentials, photon modes, the projected dipole
//! operator and matrix-free application of the Kohn-Sham Hamiltonian
//! ĥ = −(ħ²/2m*)∇² + v_s(r).

use crate::linop::LinearOperator;
use crate::realspace::{laplacian_apply_into, Grid, ScalarField, UnitSystem};
use crate::{Error, Result};
use std::sync::Arc;

/// A quantized cavity mode: frequency ω, coupling vector λ·e (one component
/// per grid dimension) and the Fock-space cutoff used by the exact oracle.
///
/// The external current j_ext is carried for completeness but pinned to zero;
/// a nonzero value can always be removed by a unitary displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonMode {
    pub omega: f64,
    pub lambda_vec: Vec<f64>,
    pub j_ext: f64,
    pub fock_cutoff: usize,
}

impl PhotonMode {
    pub fn new(omega: f64, lambda_vec: Vec<f64>, fock_cutoff: usize) -> Result<PhotonMode> {
        if !(omega > 0.0) {
            return Err(Error::InvalidInput("photon mode frequency must be positive".into()));
        }
        if fock_cutoff < 2 {
            return Err(Error::InvalidInput("Fock cutoff must be at least 2".into()));
        }
        Ok(PhotonMode {
            omega,
            lambda_vec,
            j_ext: 0.0,
            fock_cutoff,
        })
    }

    /// Overall coupling magnitude (largest |component|), used by sweeps.
    pub fn lambda_magnitude(&self) -> f64 {
        self.lambda_vec.iter().fold(0.0f64, |m, &c| m.max(c.abs()))
    }
}

/// Spin bookkeeping. Two supported fillings: a fully spin-polarized single
/// electron, and a restricted closed shell with doubly occupied orbitals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpinConfig {
    pub n_up: usize,
    pub n_down: usize,
}

impl SpinConfig {
    pub fn single_electron() -> SpinConfig {
        SpinConfig { n_up: 1, n_down: 0 }
    }

    pub fn closed_shell(n_electrons: usize) -> Result<SpinConfig> {
        if n_electrons == 0 || n_electrons % 2 != 0 {
            return Err(Error::InvalidInput(
                "closed shell requires a positive even electron count".into(),
            ));
        }
        Ok(SpinConfig {
            n_up: n_electrons / 2,
            n_down: n_electrons / 2,
        })
    }

    pub fn n_electrons(&self) -> usize {
        self.n_up + self.n_down
    }

    /// Number of distinct spatial orbitals.
    pub fn n_orbitals(&self) -> Result<usize> {
        if self.n_up == 1 && self.n_down == 0 {
            Ok(1)
        } else if self.n_up == self.n_down && self.n_up > 0 {
            Ok(self.n_up)
        } else {
            Err(Error::InvalidInput(format!(
                "unsupported spin filling ({}, {}): use a single electron or a closed shell",
                self.n_up, self.n_down
            )))
        }
    }

    /// Occupation per spatial orbital (1 or 2).
    pub fn occupation(&self) -> f64 {
        if self.n_up == 1 && self.n_down == 0 {
            1.0
        } else {
            2.0
        }
    }

    /// Number of equally filled spin channels entering σ-sums.
    pub fn spin_channels(&self) -> f64 {
        self.occupation()
    }
}

/// External potential menu.
#[derive(Debug, Clone, PartialEq)]
pub enum ExternalPotential {
    /// ½ m₀ω₀² r² + V₀ exp(−r²/d²). Parameters in the Hamiltonian's units
    /// (ħω₀ as an energy).
    QuantumRing { homega0: f64, v0: f64, d: f64 },
    /// Quantum ring plus a linear bias V̄₀ (e·r) along `bias_dir`.
    QuantumRingBiased {
        homega0: f64,
        v0: f64,
        d: f64,
        bias: f64,
        bias_dir: Vec<f64>,
    },
    /// Chain of soft-Coulomb wells: Σ_n charge_n / √((x−x_n)² + a²)
    /// (attractive for negative charge values).
    SoftCoulombChain {
        centers: Vec<(f64, f64)>,
        softening: f64,
    },
    /// Potential read from a field dump.
    Tabulated(ScalarField),
}

/// Tabulates the external potential on `grid`.
pub fn build_vext(
    pot: &ExternalPotential,
    grid: &Arc<Grid>,
    units: &UnitSystem,
) -> Result<ScalarField> {
    let field = match pot {
        ExternalPotential::QuantumRing { homega0, v0, d } => {
            // ½ m₀ω₀² r² = (ħω₀)² r² / (4 · ħ²/2m₀)
            let harm = homega0 * homega0 / (4.0 * units.kinetic_coeff);
            let d2 = d * d;
            ScalarField::from_fn(grid, |x, y| {
                let r2 = x * x + y * y;
                harm * r2 + v0 * (-r2 / d2).exp()
            })
        }
        ExternalPotential::QuantumRingBiased {
            homega0,
            v0,
            d,
            bias,
            bias_dir,
        } => {
            if bias_dir.len() != grid.ndim() {
                return Err(Error::InvalidInput(
                    "bias direction dimension does not match the grid".into(),
                ));
            }
            let harm = homega0 * homega0 / (4.0 * units.kinetic_coeff);
            let d2 = d * d;
            let (ex, ey) = (bias_dir[0], *bias_dir.get(1).unwrap_or(&0.0));
            let b = *bias;
            ScalarField::from_fn(grid, |x, y| {
                let r2 = x * x + y * y;
                harm * r2 + v0 * (-r2 / d2).exp() + b * (ex * x + ey * y)
            })
        }
        ExternalPotential::SoftCoulombChain { centers, softening } => {
            if grid.ndim() != 1 {
                return Err(Error::InvalidInput("soft-Coulomb chains are 1D models".into()));
            }
            let a2 = softening * softening;
            let centers = centers.clone();
            ScalarField::from_fn(grid, |x, _| {
                centers
                    .iter()
                    .map(|&(pos, q)| q / ((x - pos).powi(2) + a2).sqrt())
                    .sum()
            })
        }
        ExternalPotential::Tabulated(f) => {
            if f.grid().dims() != grid.dims() {
                return Err(Error::GridMismatch("tabulated potential shape mismatch".into()));
            }
            f.clone()
        }
    };
    if field.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("external potential is not finite everywhere".into()));
    }
    Ok(field)
}

/// Matrix-free Kohn-Sham Hamiltonian ĥ = −kinetic_coeff·∇² + v_s.
pub struct KsHamiltonian<'a> {
    pub vs: &'a ScalarField,
    pub units: &'a UnitSystem,
    pub order: usize,
}

impl<'a> KsHamiltonian<'a> {
    pub fn new(vs: &'a ScalarField, units: &'a UnitSystem, order: usize) -> KsHamiltonian<'a> {
        KsHamiltonian { vs, units, order }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.vs.grid()
    }

    /// ĥ f as a field (checks grids).
    pub fn apply_field(&self, f: &ScalarField) -> Result<ScalarField> {
        if f.grid().dims() != self.vs.grid().dims() {
            return Err(Error::GridMismatch("apply_hs: field vs potential".into()));
        }
        let mut out = ScalarField::zeros(f.grid());
        laplacian_apply_into(f, self.order, out.values_mut())?;
        let kin = self.units.kinetic_coeff;
        let vsv = self.vs.values();
        let fv = f.values();
        for (i, o) in out.values_mut().iter_mut().enumerate() {
            *o = -kin * *o + vsv[i] * fv[i];
        }
        Ok(out)
    }
}

impl LinearOperator for KsHamiltonian<'_> {
    fn dim(&self) -> usize {
        self.vs.grid().len()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        crate::realspace::laplacian_apply_slices(x, self.vs.grid(), self.order, y)
            .expect("grid validated at construction");
        let kin = self.units.kinetic_coeff;
        let vsv = self.vs.values();
        for i in 0..x.len() {
            y[i] = -kin * y[i] + vsv[i] * x[i];
        }
    }

    fn diagonal(&self) -> Option<Vec<f64>> {
        let c = crate::realspace::stencil_coeffs(self.order).ok()?;
        let w = c.len() / 2;
        let center: f64 = self
            .vs
            .grid()
            .spacing()
            .iter()
            .map(|h| c[w] / (h * h))
            .sum();
        let kin = self.units.kinetic_coeff;
        Some(self.vs.values().iter().map(|v| v - kin * center).collect())
    }
}

/// Projected dipole field d(r) = λ·(r − R₀) with R₀ at the grid origin.
pub fn dipole_field(mode: &PhotonMode, grid: &Arc<Grid>) -> Result<ScalarField> {
    if mode.lambda_vec.len() != grid.ndim() {
        return Err(Error::InvalidInput(format!(
            "coupling vector has {} components but the grid is {}D",
            mode.lambda_vec.len(),
            grid.ndim()
        )));
    }
    let lam = mode.lambda_vec.clone();
    Ok(ScalarField::from_fn(grid, |x, y| {
        lam[0] * x + lam.get(1).copied().unwrap_or(0.0) * y
    }))
}

/// d̂ f: pointwise multiplication by the projected dipole.
pub fn dipole_apply(mode: &PhotonMode, f: &ScalarField) -> Result<ScalarField> {
    Ok(dipole_field(mode, f.grid())?.mul_field(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::realspace::Grid;

    fn ring_units() -> UnitSystem {
        UnitSystem::mev_nm(0.067).unwrap()
    }

    #[test]
    fn quantum_ring_center_value() {
        let grid = Grid::new_2d(31, 31, 1.0, 1.0).unwrap();
        let units = ring_units();
        let pot = ExternalPotential::QuantumRing {
            homega0: 10.0,
            v0: 200.0,
            d: 10.0,
        };
        let v = build_vext(&pot, &grid, &units).unwrap();
        let center = grid.index2(15, 15);
        assert!((v.values()[center] - 200.0).abs() < 1e-12);
    }

    #[test]
    fn quantum_ring_is_rotationally_symmetric() {
        let grid = Grid::new_2d(41, 41, 0.9, 0.9).unwrap();
        let v = build_vext(
            &ExternalPotential::QuantumRing {
                homega0: 10.0,
                v0: 200.0,
                d: 10.0,
            },
            &grid,
            &ring_units(),
        )
        .unwrap();
        // v(x, y) == v(y, x) on axis-swapped points
        for ix in 0..41 {
            for iy in 0..41 {
                let a = v.values()[grid.index2(ix, iy)];
                let b = v.values()[grid.index2(iy, ix)];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn biased_ring_adds_linear_term() {
        let grid = Grid::new_2d(21, 21, 1.0, 1.0).unwrap();
        let units = ring_units();
        let base = build_vext(
            &ExternalPotential::QuantumRing {
                homega0: 10.0,
                v0: 200.0,
                d: 10.0,
            },
            &grid,
            &units,
        )
        .unwrap();
        let biased = build_vext(
            &ExternalPotential::QuantumRingBiased {
                homega0: 10.0,
                v0: 200.0,
                d: 10.0,
                bias: 0.1123,
                bias_dir: vec![1.0, 1.0],
            },
            &grid,
            &units,
        )
        .unwrap();
        for ix in 0..21 {
            for iy in 0..21 {
                let (x, y) = (grid.coord(0, ix), grid.coord(1, iy));
                let idx = grid.index2(ix, iy);
                let expect = base.values()[idx] + 0.1123 * (x + y);
                assert!((biased.values()[idx] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_coulomb_dimer_is_even() {
        let grid = Grid::new_1d(81, 0.5).unwrap();
        let v = build_vext(
            &ExternalPotential::SoftCoulombChain {
                centers: vec![(-2.89, -1.0), (2.89, -1.0)],
                softening: 1.0,
            },
            &grid,
            &UnitSystem::hartree(),
        )
        .unwrap();
        let n = grid.len();
        for i in 0..n {
            assert!((v.values()[i] - v.values()[n - 1 - i]).abs() < 1e-13);
        }
        assert!(v.values().iter().all(|&x| x < 0.0));
    }

    #[test]
    fn apply_hs_is_hermitian() {
        let grid = Grid::new_2d(19, 17, 0.4, 0.5).unwrap();
        let units = UnitSystem::hartree();
        let vs = ScalarField::from_fn(&grid, |x, y| 0.3 * x * x + 0.1 * y * y);
        let h = KsHamiltonian::new(&vs, &units, 4);
        let f = ScalarField::from_fn(&grid, |x, y| (-(x * x + y * y)).exp());
        let g = ScalarField::from_fn(&grid, |x, y| x * (-(x * x + 0.5 * y * y)).exp());
        let a = f.inner(&h.apply_field(&g).unwrap()).unwrap();
        let b = h.apply_field(&f).unwrap().inner(&g).unwrap();
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn free_constant_maps_to_zero_interior() {
        let grid = Grid::new_1d(41, 0.2).unwrap();
        let units = UnitSystem::hartree();
        let vs = ScalarField::zeros(&grid);
        let h = KsHamiltonian::new(&vs, &units, 2);
        let f = ScalarField::from_fn(&grid, |_, _| 1.0);
        let out = h.apply_field(&f).unwrap();
        for i in 2..39 {
            assert!(out.values()[i].abs() < 1e-13);
        }
    }

    #[test]
    fn dipole_scaling_and_symmetry() {
        let grid = Grid::new_2d(25, 25, 0.5, 0.5).unwrap();
        let mode = PhotonMode::new(1.41, vec![0.0034, 0.0034], 4).unwrap();
        let d = dipole_field(&mode, &grid).unwrap();
        // at r = (1, 1) nm the projected dipole is 0.0034*(1+1) = 0.0068
        let ix = (0..25).find(|&i| (grid.coord(0, i) - 1.0).abs() < 1e-9).unwrap();
        assert!((d.values()[grid.index2(ix, ix)] - 0.0068).abs() < 1e-15);

        // zero coupling gives the zero field
        let zero = PhotonMode::new(1.0, vec![0.0, 0.0], 4).unwrap();
        let f = ScalarField::from_fn(&grid, |x, y| x + y + 1.0);
        assert_eq!(dipole_apply(&zero, &f).unwrap().max_abs(), 0.0);

        // <f|d|f> = 0 for |f|^2 even on a symmetric grid
        let even = ScalarField::from_fn(&grid, |x, y| (-(x * x + y * y)).exp());
        let expect = even.inner(&dipole_apply(&mode, &even).unwrap()).unwrap();
        assert!(expect.abs() < 1e-14);

        // brute-force sum agreement
        let f2 = ScalarField::from_fn(&grid, |x, y| x - 0.3 * y);
        let lhs = f2.inner(&dipole_apply(&mode, &f2).unwrap()).unwrap();
        let mut brute = 0.0;
        for ix in 0..25 {
            for iy in 0..25 {
                let (x, y) = (grid.coord(0, ix), grid.coord(1, iy));
                let v = f2.values()[grid.index2(ix, iy)];
                brute += v * v * 0.0034 * (x + y);
            }
        }
        brute *= grid.cell_volume();
        assert!((lhs - brute).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn dipole_dimension_mismatch_rejected() {
        let grid = Grid::new_1d(11, 0.3).unwrap();
        let mode = PhotonMode::new(1.0, vec![0.1, 0.2], 4).unwrap();
        assert!(dipole_field(&mode, &grid).is_err());
    }
}
