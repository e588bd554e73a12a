//! Matrix-free computation of the lowest eigenpairs of a real symmetric
//! operator: a locally optimal block preconditioned (LOBPCG-style) solver for
//! production grids plus a dense diagonalization oracle for small problems.

use crate::linop::{axpy, dot, LinearOperator};
use crate::realspace::{Grid, ScalarField};
use crate::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Result of an eigensolve: energies ascending, orbitals mutually orthonormal
/// (field normalization ∫|φ|² dV = 1), residuals recomputed from scratch.
#[derive(Debug, Clone)]
pub struct EigenResult {
    pub energies: Vec<f64>,
    pub orbitals: Vec<ScalarField>,
    pub residual_norms: Vec<f64>,
    pub iterations: usize,
}

/// Knobs for [`lowest_states`].
#[derive(Debug, Clone)]
pub struct EigenOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Guard vectors carried beyond the requested k (absorb near-degeneracies).
    pub block_extra: usize,
    /// Use the operator diagonal as a preconditioner when available.
    pub precondition: bool,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            tol: 1e-10,
            max_iter: 3000,
            seed: 1,
            block_extra: 2,
            precondition: true,
        }
    }
}

/// Lowest `k` eigenpairs of `op` on `grid`, deterministic for a given seed.
///
/// `warm_start`: previous orbitals (any count) used to seed the block.
pub fn lowest_states(
    op: &dyn LinearOperator,
    grid: &Arc<Grid>,
    k: usize,
    opts: &EigenOptions,
    warm_start: Option<&[ScalarField]>,
) -> Result<EigenResult> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let n = op.dim();
    if n != grid.len() {
        return Err(Error::GridMismatch("operator dimension vs grid".into()));
    }
    if n <= DENSE_FALLBACK_DIM {
        // small problems go straight to the dense oracle path: exact,
        // deterministic and immune to pathological potentials
        let dense = dense_spectrum(op, grid, DENSE_FALLBACK_DIM)?;
        let mut res = EigenResult {
            energies: dense.energies[..k].to_vec(),
            orbitals: dense.orbitals[..k].to_vec(),
            residual_norms: vec![0.0; k],
            iterations: 1,
        };
        // report true residuals of the dense pairs against the operator
        let scale = 1.0 / grid.cell_volume().sqrt();
        for i in 0..k {
            let v: Vec<f64> = res.orbitals[i].values().iter().map(|x| x / scale).collect();
            let mut av = op.apply(&v);
            crate::linop::axpy(-res.energies[i], &v, &mut av);
            res.residual_norms[i] = crate::linop::dot(&av, &av).sqrt();
        }
        return Ok(res);
    }
    let raw = solve_polished(op, k, opts, warm_start.map(|ws| ws_to_raw(ws)))?;
    Ok(raw_to_result(raw, grid))
}

/// Problems at or below this dimension bypass the iterative solver.
pub const DENSE_FALLBACK_DIM: usize = 700;

/// LOBPCG for the bulk of the convergence, then a Jacobi-Davidson-style
/// polish: each Ritz pair is corrected by a shifted MINRES solve projected
/// onto the complement of the current block, which restores residuals past
/// the subspace-iteration stagnation floor.
fn solve_polished(
    op: &dyn LinearOperator,
    k: usize,
    opts: &EigenOptions,
    warm: Option<Vec<Vec<f64>>>,
) -> Result<RawEigen> {
    let mut raw = lobpcg_raw(op, k, opts, warm)?;
    let n = op.dim();
    let scale = raw
        .energies
        .iter()
        .take(k)
        .fold(1.0f64, |a, e| a.max(e.abs()));
    let target = opts.tol * scale;
    let worst = |r: &RawEigen| r.residuals.iter().take(k).cloned().fold(0.0f64, f64::max);
    if worst(&raw) <= target {
        return Ok(raw);
    }
    for _sweep in 0..12 {
        for i in 0..k.min(raw.vectors.len()) {
            if raw.residuals[i] <= target {
                continue;
            }
            let x = &raw.vectors[i];
            let theta = raw.energies[i];
            let mut r = op.apply(x);
            axpy(-theta, x, &mut r);
            let proj: Vec<&[f64]> = raw.vectors.iter().map(|v| v.as_slice()).collect();
            let shifted = crate::linop::Shifted {
                base: op,
                sigma: -theta,
            };
            let rnorm = dot(&r, &r).sqrt();
            if !rnorm.is_finite() || rnorm > 0.05 * scale.max(1.0) {
                continue; // not in the correction basin; more subspace
                          // iterations are the only safe move
            }
            let out = crate::linop::minres_raw(&shifted, &r, &proj, 0.05, 400, None);
            let dnorm = dot(&out.x, &out.x).sqrt();
            if !dnorm.is_finite() || dnorm > 10.0 {
                continue;
            }
            let mut xi = raw.vectors[i].clone();
            axpy(-1.0, &out.x, &mut xi);
            // re-orthonormalize against the rest of the block
            for (j, v) in raw.vectors.iter().enumerate() {
                if j != i {
                    let c = dot(v, &xi);
                    axpy(-c, v, &mut xi);
                }
            }
            let nn = dot(&xi, &xi).sqrt();
            if nn < 1e-12 {
                continue;
            }
            for v in &mut xi {
                *v /= nn;
            }
            let ax = op.apply(&xi);
            let th = dot(&xi, &ax);
            let mut rr = ax;
            axpy(-th, &xi, &mut rr);
            raw.energies[i] = th;
            raw.residuals[i] = dot(&rr, &rr).sqrt();
            raw.vectors[i] = xi;
        }
        if worst(&raw) <= target {
            break;
        }
    }
    // final Rayleigh-Ritz over the polished block for clean ordering
    let vecs = std::mem::take(&mut raw.vectors);
    let mut cleaned = finalize(op, &vecs, k.min(vecs.len()), n);
    cleaned.iterations = raw.iterations;
    let w = worst(&cleaned);
    if !w.is_finite() || !cleaned.energies.iter().all(|e| e.is_finite()) {
        return Err(Error::EigenNonConvergence {
            context: format!("solver produced non-finite data (k={k})"),
            residual: f64::NAN,
        });
    }
    if w > target * 10.0 {
        return Err(Error::EigenNonConvergence {
            context: format!("polish stalled (k={k})"),
            residual: w,
        });
    }
    Ok(cleaned)
}

fn ws_to_raw(ws: &[ScalarField]) -> Vec<Vec<f64>> {
    ws.iter().map(|f| f.values().to_vec()).collect()
}

pub(crate) struct RawEigen {
    pub(crate) energies: Vec<f64>,
    pub(crate) vectors: Vec<Vec<f64>>, // unit 2-norm
    pub(crate) residuals: Vec<f64>,
    pub(crate) iterations: usize,
}

fn raw_to_result(raw: RawEigen, grid: &Arc<Grid>) -> EigenResult {
    let scale = 1.0 / grid.cell_volume().sqrt();
    let orbitals = raw
        .vectors
        .into_iter()
        .map(|mut v| {
            for x in &mut v {
                *x *= scale;
            }
            ScalarField::from_values(grid, v).expect("dimension checked")
        })
        .collect();
    EigenResult {
        energies: raw.energies,
        orbitals,
        residual_norms: raw.residuals,
        iterations: raw.iterations,
    }
}

/// Core LOBPCG iteration on raw unit-norm vectors.
pub(crate) fn lobpcg_raw(
    op: &dyn LinearOperator,
    k: usize,
    opts: &EigenOptions,
    warm: Option<Vec<Vec<f64>>>,
) -> Result<RawEigen> {
    let n = op.dim();
    let m = (k + opts.block_extra).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let diag = if opts.precondition { op.diagonal() } else { None };

    // initial block: warm-start columns then deterministic random fill
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(m);
    if let Some(ws) = warm {
        for col in ws.into_iter().take(m) {
            if col.len() == n {
                x.push(col);
            }
        }
    }
    while x.len() < m {
        x.push((0..n).map(|_| rng.gen::<f64>() - 0.5).collect());
    }
    orthonormalize(&mut x, 1e-10);
    while x.len() < m {
        // re-fill if warm-start columns were dependent
        x.push((0..n).map(|_| rng.gen::<f64>() - 0.5).collect());
        orthonormalize(&mut x, 1e-10);
    }

    let mut p: Vec<Vec<f64>> = Vec::new();
    let mut best_worst = f64::INFINITY;
    let mut iters_done = 0usize;
    let mut window_best = f64::INFINITY;
    let mut theta = vec![0.0; m];
    let mut res_norms = vec![f64::INFINITY; m];

    for iter in 0..opts.max_iter {
        iters_done = iter + 1;
        // subspace S = [X, W, P] with A applied to every kept column
        let mut s = x.clone();
        let ax: Vec<Vec<f64>> = x.iter().map(|c| op.apply(c)).collect();
        // Ritz values of current X for residuals/preconditioning
        for (i, c) in x.iter().enumerate() {
            theta[i] = dot(c, &ax[i]);
        }
        let mut w: Vec<Vec<f64>> = Vec::with_capacity(m);
        for i in 0..m {
            let mut r = ax[i].clone();
            axpy(-theta[i], &x[i], &mut r);
            res_norms[i] = dot(&r, &r).sqrt();
            if let Some(d) = &diag {
                let spread = d.iter().cloned().fold(f64::MIN, f64::max)
                    - d.iter().cloned().fold(f64::MAX, f64::min);
                let floor = (1e-3 * spread).max(1e-12);
                for (rj, dj) in r.iter_mut().zip(d) {
                    *rj /= (dj - theta[i]).max(floor);
                }
            }
            w.push(r);
        }
        let worst = res_norms[..k.min(m)]
            .iter()
            .cloned()
            .fold(0.0f64, f64::max);
        if std::env::var("CAVKS_EIG_DEBUG").is_ok() {
            eprintln!(
                "it={iter} worst={worst:.3e} theta={:?} finite_x0={}",
                &theta[..k.min(m)],
                x[0].iter().all(|v| v.is_finite())
            );
        }
        let scale = theta[..k.min(m)]
            .iter()
            .fold(1.0f64, |a, t| a.max(t.abs()));
        if worst <= opts.tol * scale {
            let mut raw = finalize(op, &x, k, n);
            raw.iterations = iter;
            return Ok(raw);
        }
        best_worst = best_worst.min(worst);
        if iter > 0 && iter % 100 == 0 {
            if best_worst > window_best / 1.25 && best_worst <= 0.04 * scale.max(1.0) {
                // stagnation floor of the subspace iteration, and already
                // inside the polish basin: hand over to the polish phase
                break;
            }
            window_best = best_worst;
        }

        s.extend(w);
        s.extend(p.iter().cloned());
        orthonormalize(&mut s, 1e-8);
        if s.len() < k {
            return Err(Error::EigenNonConvergence {
                context: format!("subspace collapsed to {} columns", s.len()),
                residual: worst,
            });
        }
        let as_: Vec<Vec<f64>> = s.iter().map(|c| op.apply(c)).collect();
        let dim_s = s.len();
        let mut t = DMatrix::<f64>::zeros(dim_s, dim_s);
        for i in 0..dim_s {
            for j in i..dim_s {
                let v = dot(&s[i], &as_[j]);
                t[(i, j)] = v;
                t[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..dim_s).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

        let m_new = m.min(dim_s);
        let mut x_new: Vec<Vec<f64>> = vec![vec![0.0; n]; m_new];
        let mut p_new: Vec<Vec<f64>> = vec![vec![0.0; n]; m_new];
        for (col, &oi) in order.iter().take(m_new).enumerate() {
            for (row, sc) in s.iter().enumerate() {
                let c = eig.eigenvectors[(row, oi)];
                if c != 0.0 {
                    axpy(c, sc, &mut x_new[col]);
                    if row >= m {
                        // W and P contributions form the next search direction
                        axpy(c, sc, &mut p_new[col]);
                    }
                }
            }
        }
        x = x_new;
        orthonormalize(&mut x, 1e-10);
        p = p_new;
        orthonormalize(&mut p, 1e-8);
        p.truncate(m);
    }

    // out of iterations or stagnated: return the best block as-is
    let mut raw = finalize(op, &x, k, n);
    raw.iterations = iters_done;
    Ok(raw)
}

/// Rayleigh-Ritz on the final block, then recompute residuals from scratch.
fn finalize(op: &dyn LinearOperator, x: &[Vec<f64>], k: usize, n: usize) -> RawEigen {
    let m = x.len();
    let ax: Vec<Vec<f64>> = x.iter().map(|c| op.apply(c)).collect();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = dot(&x[i], &ax[j]);
            t[(i, j)] = v;
            t[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut energies = Vec::with_capacity(k);
    let mut vectors = Vec::with_capacity(k);
    let mut residuals = Vec::with_capacity(k);
    for &oi in order.iter().take(k) {
        let mut v = vec![0.0; n];
        for (row, xc) in x.iter().enumerate() {
            axpy(eig.eigenvectors[(row, oi)], xc, &mut v);
        }
        let nv = dot(&v, &v).sqrt();
        for vi in &mut v {
            *vi /= nv;
        }
        let av = op.apply(&v);
        let e = dot(&v, &av);
        let mut r = av;
        axpy(-e, &v, &mut r);
        energies.push(e);
        residuals.push(dot(&r, &r).sqrt());
        vectors.push(v);
    }
    RawEigen {
        energies,
        vectors,
        residuals,
        iterations: 0,
    }
}

/// Modified Gram-Schmidt (two passes) dropping near-dependent columns.
fn orthonormalize(cols: &mut Vec<Vec<f64>>, drop_tol: f64) {
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    for mut c in cols.drain(..) {
        let orig = dot(&c, &c).sqrt();
        if orig == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &kept {
                let o = dot(q, &c);
                axpy(-o, q, &mut c);
            }
        }
        let nn = dot(&c, &c).sqrt();
        if nn > drop_tol * orig.max(1.0) {
            for v in &mut c {
                *v /= nn;
            }
            kept.push(c);
        }
    }
    *cols = kept;
}

/// Full dense spectrum of `op` (test oracle; also supplies unoccupied states
/// for sum-over-states checks). Fails above `dense_limit`.
pub fn dense_spectrum(
    op: &dyn LinearOperator,
    grid: &Arc<Grid>,
    dense_limit: usize,
) -> Result<EigenResult> {
    let n = op.dim();
    if n > dense_limit {
        return Err(Error::DenseLimit {
            dim: n,
            limit: dense_limit,
        });
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        op.apply_into(&e, &mut col);
        for i in 0..n {
            a[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    // symmetrize roundoff
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let scale = 1.0 / grid.cell_volume().sqrt();
    let mut energies = Vec::with_capacity(n);
    let mut orbitals = Vec::with_capacity(n);
    for &oi in &order {
        energies.push(eig.eigenvalues[oi]);
        let v: Vec<f64> = (0..n).map(|i| eig.eigenvectors[(i, oi)] * scale).collect();
        orbitals.push(ScalarField::from_values(grid, v).expect("dim"));
    }
    Ok(EigenResult {
        energies,
        orbitals,
        residual_norms: vec![0.0; n],
        iterations: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::KsHamiltonian;
    use crate::realspace::{ScalarField, UnitSystem};

    fn harmonic_1d(n: usize, dx: f64) -> (Arc<Grid>, ScalarField, UnitSystem) {
        let grid = Grid::new_1d(n, dx).unwrap();
        let units = UnitSystem::hartree();
        let vs = ScalarField::from_fn(&grid, |x, _| 0.5 * x * x);
        (grid, vs, units)
    }

    #[test]
    fn harmonic_oscillator_spectrum() {
        let (grid, vs, units) = harmonic_1d(161, 0.1);
        let h = KsHamiltonian::new(&vs, &units, 8);
        let res = lowest_states(&h, &grid, 3, &EigenOptions::default(), None).unwrap();
        for (i, want) in [0.5, 1.5, 2.5].iter().enumerate() {
            assert!(
                (res.energies[i] - want).abs() < 1e-6,
                "level {i}: {} vs {want}",
                res.energies[i]
            );
        }
    }

    #[test]
    fn orthonormal_and_matches_dense() {
        let (grid, vs, units) = harmonic_1d(81, 0.18);
        let h = KsHamiltonian::new(&vs, &units, 4);
        let res = lowest_states(&h, &grid, 4, &EigenOptions::default(), None).unwrap();
        let dense = dense_spectrum(&h, &grid, 4096).unwrap();
        for i in 0..4 {
            assert!(
                (res.energies[i] - dense.energies[i]).abs() < 1e-10,
                "pair {i}: {} vs {}",
                res.energies[i],
                dense.energies[i]
            );
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = res.orbitals[i].inner(&res.orbitals[j]).unwrap();
                assert!((got - want).abs() < 1e-10, "<{i}|{j}> = {got}");
            }
        }
    }

    #[test]
    fn tiny_grid_matches_dense_exactly() {
        let grid = Grid::new_1d(3, 1.0).unwrap();
        let units = UnitSystem::hartree();
        let vs = ScalarField::from_fn(&grid, |x, _| 0.3 * x);
        let h = KsHamiltonian::new(&vs, &units, 2);
        let res = lowest_states(&h, &grid, 1, &EigenOptions::default(), None).unwrap();
        let dense = dense_spectrum(&h, &grid, 16).unwrap();
        assert!((res.energies[0] - dense.energies[0]).abs() < 1e-12);
    }

    #[test]
    fn dense_trace_identity_and_completeness() {
        let grid = Grid::new_1d(40, 0.25).unwrap();
        let units = UnitSystem::hartree();
        let vs = ScalarField::from_fn(&grid, |x, _| 0.1 * x * x + 0.2 * (x * 1.7).sin());
        let h = KsHamiltonian::new(&vs, &units, 4);
        let dense = dense_spectrum(&h, &grid, 4096).unwrap();
        // trace = sum of eigenvalues
        let mut tr = 0.0;
        let mut e = vec![0.0; 40];
        let mut col = vec![0.0; 40];
        for i in 0..40 {
            e[i] = 1.0;
            h.apply_into(&e, &mut col);
            tr += col[i];
            e[i] = 0.0;
        }
        let sum: f64 = dense.energies.iter().sum();
        assert!((tr - sum).abs() < 1e-10 * tr.abs().max(1.0));
        // completeness on a deterministic test vector
        let f = ScalarField::from_fn(&grid, |x, _| (x * 0.9).cos() + 0.3 * x);
        let mut rebuilt = ScalarField::zeros(&grid);
        for orb in &dense.orbitals {
            let c = orb.inner(&f).unwrap();
            rebuilt.axpy(c, orb);
        }
        rebuilt.axpy(-1.0, &f);
        assert!(rebuilt.max_abs() < 1e-10);
    }

    #[test]
    fn variational_bound_and_seed_determinism() {
        let (grid, vs, units) = harmonic_1d(61, 0.22);
        let h = KsHamiltonian::new(&vs, &units, 4);
        let res = lowest_states(&h, &grid, 1, &EigenOptions::default(), None).unwrap();
        // Rayleigh quotient of an arbitrary trial field is an upper bound
        let mut trial = ScalarField::from_fn(&grid, |x, _| (-(x * x) / 3.0).exp() * (1.0 + 0.2 * x));
        trial.normalize();
        let rq = trial.inner(&h.apply_field(&trial).unwrap()).unwrap();
        assert!(res.energies[0] <= rq + 1e-12);

        let again = lowest_states(&h, &grid, 1, &EigenOptions::default(), None).unwrap();
        assert_eq!(res.energies[0].to_bits(), again.energies[0].to_bits());
    }

    #[test]
    fn degenerate_pair_converges_as_subspace() {
        // 2D isotropic harmonic oscillator: first excited level is 2-fold
        let grid = Grid::new_2d(41, 41, 0.3, 0.3).unwrap();
        let units = UnitSystem::hartree();
        let vs = ScalarField::from_fn(&grid, |x, y| 0.5 * (x * x + y * y));
        let h = KsHamiltonian::new(&vs, &units, 8);
        let res = lowest_states(&h, &grid, 3, &EigenOptions::default(), None).unwrap();
        assert!((res.energies[0] - 1.0).abs() < 1e-5);
        assert!((res.energies[1] - 2.0).abs() < 1e-5);
        assert!((res.energies[2] - 2.0).abs() < 1e-5);
        assert!((res.energies[2] - res.energies[1]).abs() < 1e-8);
    }
}
