//! Uniform real-space grids, scalar fields, finite-difference operators and
//! the 1D soft-Coulomb interaction kernel.
//!
//! Fields are flat `f64` arrays in row-major order over a [`Grid`] (1D or 2D);
//! ground states of the real symmetric Hamiltonians treated here can always be
//! chosen real, so no complex storage is carried. All derivative operators use
//! hard-wall (Dirichlet) boundaries: values outside the box are zero.

use crate::{Error, Result};
use std::fmt::Write as _;
use std::sync::Arc;

/// Central second-derivative stencil coefficients (unit spacing), by accuracy
/// order. Index runs over offsets `-w ..= w`.
const STENCIL_2: [f64; 3] = [1.0, -2.0, 1.0];
const STENCIL_4: [f64; 5] = [-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0];
const STENCIL_8: [f64; 9] = [
    -1.0 / 560.0,
    8.0 / 315.0,
    -1.0 / 5.0,
    8.0 / 5.0,
    -205.0 / 72.0,
    8.0 / 5.0,
    -1.0 / 5.0,
    8.0 / 315.0,
    -1.0 / 560.0,
];

pub fn stencil_coeffs(order: usize) -> Result<&'static [f64]> {
    match order {
        2 => Ok(&STENCIL_2),
        4 => Ok(&STENCIL_4),
        8 => Ok(&STENCIL_8),
        _ => Err(Error::InvalidInput(format!(
            "unsupported stencil order {order} (expected 2, 4 or 8)"
        ))),
    }
}

/// A uniform real-space mesh in one or two dimensions, centered on `origin`.
///
/// The single index map shared by every module is row-major:
/// `idx = ix * dims[1] + iy` in 2D, `idx = ix` in 1D (see [`Grid::index2`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
}

impl Grid {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>, origin: Vec<f64>) -> Result<Arc<Grid>> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(Error::InvalidGrid(format!(
                "ndim must be 1 or 2, got {}",
                dims.len()
            )));
        }
        if dims.len() != spacing.len() || dims.len() != origin.len() {
            return Err(Error::InvalidGrid(
                "dims, spacing and origin must have equal length".into(),
            ));
        }
        if dims.iter().any(|&n| n < 3) {
            return Err(Error::InvalidGrid("need at least 3 points per axis".into()));
        }
        if spacing.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::InvalidGrid("spacing must be positive".into()));
        }
        Ok(Arc::new(Grid {
            dims,
            spacing,
            origin,
        }))
    }

    pub fn new_1d(n: usize, dx: f64) -> Result<Arc<Grid>> {
        Grid::new(vec![n], vec![dx], vec![0.0])
    }

    pub fn new_2d(nx: usize, ny: usize, dx: f64, dy: f64) -> Result<Arc<Grid>> {
        Grid::new(vec![nx, ny], vec![dx, dy], vec![0.0, 0.0])
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Volume (length in 1D, area in 2D) of one grid cell.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Coordinate of point `i` along `axis`; the mesh is symmetric about the
    /// origin.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + (i as f64 - (self.dims[axis] as f64 - 1.0) / 2.0) * self.spacing[axis]
    }

    /// Row-major flat index of the 2D point `(ix, iy)`.
    pub fn index2(&self, ix: usize, iy: usize) -> usize {
        debug_assert_eq!(self.ndim(), 2);
        ix * self.dims[1] + iy
    }
}

/// Checks two fields live on the same grid.
fn same_grid(a: &ScalarField, b: &ScalarField) -> Result<()> {
    if Arc::ptr_eq(&a.grid, &b.grid) || a.grid == b.grid {
        Ok(())
    } else {
        Err(Error::GridMismatch(format!(
            "{:?} vs {:?}",
            a.grid.dims, b.grid.dims
        )))
    }
}

/// A real scalar field tabulated over a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Arc<Grid>) -> ScalarField {
        ScalarField {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: &Arc<Grid>, values: Vec<f64>) -> Result<ScalarField> {
        if values.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "field length {} does not match grid ({} points)",
                values.len(),
                grid.len()
            )));
        }
        Ok(ScalarField {
            grid: grid.clone(),
            values,
        })
    }

    /// Tabulates `f(x)` in 1D or `f(x, y)` in 2D (second argument 0 in 1D).
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        let mut values = Vec::with_capacity(grid.len());
        match grid.ndim() {
            1 => {
                for i in 0..grid.dims()[0] {
                    values.push(f(grid.coord(0, i), 0.0));
                }
            }
            _ => {
                for ix in 0..grid.dims()[0] {
                    let x = grid.coord(0, ix);
                    for iy in 0..grid.dims()[1] {
                        values.push(f(x, grid.coord(1, iy)));
                    }
                }
            }
        }
        ScalarField {
            grid: grid.clone(),
            values,
        }
    }

    /// The coordinate along `axis` as a field (used by dipole operators).
    pub fn coordinate(grid: &Arc<Grid>, axis: usize) -> ScalarField {
        ScalarField::from_fn(grid, |x, y| if axis == 0 { x } else { y })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Sum of conj(self)·other times the cell volume. Fields are real, so the
    /// result is real and symmetric in its arguments.
    pub fn inner(&self, other: &ScalarField) -> Result<f64> {
        same_grid(self, other)?;
        Ok(crate::linop::dot(&self.values, &other.values) * self.grid.cell_volume())
    }

    /// ∫ f dV.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// ∫ |f| dV.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn norm(&self) -> f64 {
        (crate::linop::dot(&self.values, &self.values) * self.grid.cell_volume()).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Scales the field so that ∫ |f|² dV = 1.
    pub fn normalize(&mut self) {
        let n = self.norm();
        if n > 0.0 {
            self.scale(1.0 / n);
        }
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    /// self += a · other.
    pub fn axpy(&mut self, a: f64, other: &ScalarField) {
        debug_assert_eq!(self.values.len(), other.values.len());
        crate::linop::axpy(a, &other.values, &mut self.values);
    }

    /// Pointwise product with another field.
    pub fn mul_field(&self, other: &ScalarField) -> ScalarField {
        debug_assert_eq!(self.values.len(), other.values.len());
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .collect();
        ScalarField {
            grid: self.grid.clone(),
            values,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Unit system carried by a Hamiltonian: the kinetic prefactor ħ²/2m* in
/// energy·length² plus unit labels for reports.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSystem {
    pub kinetic_coeff: f64,
    pub energy_unit: String,
    pub length_unit: String,
}

/// ħ²/mₑ in meV·nm² (CODATA).
pub const HBAR2_OVER_ME_MEV_NM2: f64 = 76.19964;

impl UnitSystem {
    /// Hartree atomic units (kinetic prefactor 1/2).
    pub fn hartree() -> UnitSystem {
        UnitSystem {
            kinetic_coeff: 0.5,
            energy_unit: "Ha".into(),
            length_unit: "bohr".into(),
        }
    }

    /// meV/nm units with an effective mass m* = `mass` · mₑ, as used for
    /// semiconductor quantum-ring models.
    pub fn mev_nm(mass: f64) -> Result<UnitSystem> {
        if !(mass > 0.0) {
            return Err(Error::InvalidInput("effective mass must be positive".into()));
        }
        Ok(UnitSystem {
            kinetic_coeff: HBAR2_OVER_ME_MEV_NM2 / (2.0 * mass),
            energy_unit: "meV".into(),
            length_unit: "nm".into(),
        })
    }
}

/// Applies the finite-difference Laplacian of the given stencil order with
/// Dirichlet (zero) boundaries, writing into `out`.
pub fn laplacian_apply_into(f: &ScalarField, order: usize, out: &mut [f64]) -> Result<()> {
    laplacian_apply_slices(f.values(), f.grid(), order, out)
}

/// Raw-slice Laplacian used by the matrix-free hot paths (no field wrapper,
/// no allocation).
pub fn laplacian_apply_slices(v: &[f64], grid: &Grid, order: usize, out: &mut [f64]) -> Result<()> {
    let c = stencil_coeffs(order)?;
    let w = c.len() / 2;
    if grid.dims().iter().any(|&n| n < c.len()) {
        return Err(Error::InvalidGrid(format!(
            "grid too small for stencil order {order}: need at least {} points per axis",
            c.len()
        )));
    }
    out.fill(0.0);
    match grid.ndim() {
        1 => {
            let h2 = grid.spacing()[0] * grid.spacing()[0];
            let n = grid.dims()[0];
            for (k, &ck) in c.iter().enumerate() {
                let off = k as isize - w as isize;
                let ck = ck / h2;
                let (i0, i1) = if off < 0 {
                    ((-off) as usize, n)
                } else {
                    (0, n - off as usize)
                };
                for i in i0..i1 {
                    out[i] += ck * v[(i as isize + off) as usize];
                }
            }
        }
        _ => {
            let (nx, ny) = (grid.dims()[0], grid.dims()[1]);
            let hx2 = grid.spacing()[0] * grid.spacing()[0];
            let hy2 = grid.spacing()[1] * grid.spacing()[1];
            // x-direction: whole rows shift by off*ny
            for (k, &ck) in c.iter().enumerate() {
                let off = k as isize - w as isize;
                let ck = ck / hx2;
                let (x0, x1) = if off < 0 {
                    ((-off) as usize, nx)
                } else {
                    (0, nx - off as usize)
                };
                for ix in x0..x1 {
                    let src = ((ix as isize + off) as usize) * ny;
                    let dst = ix * ny;
                    for iy in 0..ny {
                        out[dst + iy] += ck * v[src + iy];
                    }
                }
            }
            // y-direction: shifts within each row
            for (k, &ck) in c.iter().enumerate() {
                let off = k as isize - w as isize;
                let ck = ck / hy2;
                let (y0, y1) = if off < 0 {
                    ((-off) as usize, ny)
                } else {
                    (0, ny - off as usize)
                };
                for ix in 0..nx {
                    let row = ix * ny;
                    for iy in y0..y1 {
                        out[row + iy] += ck * v[row + (iy as isize + off) as usize];
                    }
                }
            }
        }
    }
    Ok(())
}

/// Allocation wrapper around [`laplacian_apply_into`].
pub fn laplacian_apply(f: &ScalarField, order: usize) -> Result<ScalarField> {
    let mut out = ScalarField::zeros(f.grid());
    laplacian_apply_into(f, order, out.values_mut())?;
    Ok(out)
}

/// Tabulated 1D soft-Coulomb pair interaction w(x,x') = 1/√((x−x')² + a²).
///
/// Stored by separation only (the kernel is translation invariant on a
/// uniform mesh), so applying it to a density is an O(n²) banded product.
#[derive(Debug, Clone)]
pub struct SoftCoulomb {
    grid: Arc<Grid>,
    by_sep: Vec<f64>,
    pub softening: f64,
}

pub fn soft_coulomb_kernel(grid: &Arc<Grid>, softening: f64) -> Result<SoftCoulomb> {
    if grid.ndim() != 1 {
        return Err(Error::InvalidInput(
            "soft-Coulomb kernel is tabulated for 1D grids only".into(),
        ));
    }
    if !(softening > 0.0) {
        return Err(Error::InvalidInput("softening must be positive".into()));
    }
    let n = grid.len();
    let dx = grid.spacing()[0];
    let by_sep = (0..n)
        .map(|s| 1.0 / ((s as f64 * dx).powi(2) + softening * softening).sqrt())
        .collect();
    Ok(SoftCoulomb {
        grid: grid.clone(),
        by_sep,
        softening,
    })
}

impl SoftCoulomb {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// w(x_i, x_j).
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.by_sep[i.abs_diff(j)]
    }

    /// (w ⊛ f)(x) = ∫ w(x,x') f(x') dx'.
    pub fn convolve(&self, f: &ScalarField) -> Result<ScalarField> {
        if !Arc::ptr_eq(&self.grid, f.grid()) && **f.grid() != *self.grid {
            return Err(Error::GridMismatch("soft-Coulomb kernel vs field".into()));
        }
        let n = self.grid.len();
        let dx = self.grid.cell_volume();
        let fv = f.values();
        let mut out = ScalarField::zeros(&self.grid);
        let ov = out.values_mut();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.by_sep[i.abs_diff(j)] * fv[j];
            }
            ov[i] = acc * dx;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Field dump format: one header line + one value per line in index order.
// Header: `ndim n0 [n1] h0 [h1] o0 [o1] <energy_unit> <length_unit>`.
// Values are printed with 17 significant digits, which round-trips f64
// bit-exactly.
// ---------------------------------------------------------------------------

/// Serializes a field to the plain-text dump format.
pub fn dump_field(f: &ScalarField, units: Option<&UnitSystem>) -> String {
    let g = f.grid();
    let mut s = String::new();
    s.push_str(&format!("{}", g.ndim()));
    for d in g.dims() {
        let _ = write!(s, " {d}");
    }
    for h in g.spacing() {
        let _ = write!(s, " {h:.17e}");
    }
    for o in g.origin() {
        let _ = write!(s, " {o:.17e}");
    }
    match units {
        Some(u) => {
            let _ = write!(s, " {} {}", u.energy_unit, u.length_unit);
        }
        None => s.push_str(" - -"),
    }
    s.push('\n');
    for v in f.values() {
        let _ = writeln!(s, "{v:.17e}");
    }
    s
}

/// Parses the dump format back into a field (inverse of [`dump_field`]).
pub fn parse_field(text: &str) -> Result<ScalarField> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty field dump".into()))?;
    let tok: Vec<&str> = header.split_whitespace().collect();
    let ndim: usize = tok
        .first()
        .ok_or_else(|| Error::Parse("missing ndim".into()))?
        .parse()
        .map_err(|_| Error::Parse("bad ndim".into()))?;
    if ndim == 0 || ndim > 2 || tok.len() != 1 + 3 * ndim + 2 {
        return Err(Error::Parse(format!("malformed field header: {header:?}")));
    }
    let nums: Vec<f64> = tok[1..1 + 3 * ndim]
        .iter()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("bad header number {t:?}"))))
        .collect::<Result<_>>()?;
    let dims: Vec<usize> = nums[..ndim].iter().map(|&x| x as usize).collect();
    let spacing = nums[ndim..2 * ndim].to_vec();
    let origin = nums[2 * ndim..3 * ndim].to_vec();
    let grid = Grid::new(dims, spacing, origin)?;
    let mut values = Vec::with_capacity(grid.len());
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        values.push(
            line.parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad value line {line:?}")))?,
        );
    }
    ScalarField::from_values(&grid, values)
}
