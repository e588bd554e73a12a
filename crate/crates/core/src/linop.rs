//! Matrix-free linear operator contract shared by the eigensolvers and the
//! Sternheimer solver.

/// A real symmetric operator applied without storing its matrix.
pub trait LinearOperator: Sync {
    /// Dimension of the (square) operator.
    fn dim(&self) -> usize;

    /// y = A x. `x` and `y` have length `dim()`.
    fn apply_into(&self, x: &[f64], y: &mut [f64]);

    /// Convenience allocation wrapper around [`apply_into`](Self::apply_into).
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.apply_into(x, &mut y);
        y
    }

    /// Diagonal of the operator, when cheaply available (used for
    /// preconditioning). Default: unknown.
    fn diagonal(&self) -> Option<Vec<f64>> {
        None
    }
}

/// A + sigma I, reusing the base operator.
pub struct Shifted<'a, A: LinearOperator + ?Sized> {
    pub base: &'a A,
    pub sigma: f64,
}

impl<A: LinearOperator + ?Sized> LinearOperator for Shifted<'_, A> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.base.apply_into(x, y);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += self.sigma * xi;
        }
    }

    fn diagonal(&self) -> Option<Vec<f64>> {
        self.base.diagonal().map(|mut d| {
            for di in &mut d {
                *di += self.sigma;
            }
            d
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn project_out_unit(projector: &[&[f64]], x: &mut [f64]) {
    for p in projector {
        let c = dot(p, x);
        axpy(-c, p, x);
    }
}

pub(crate) struct MinresOutcome {
    pub x: Vec<f64>,
    /// Recomputed-from-scratch residual ‖P A P x − P b‖.
    pub residual: f64,
    pub rhs_norm: f64,
    pub iterations: usize,
}

/// MINRES-type conjugate-residual recurrence for a symmetric (possibly
/// indefinite) operator, restricted to the orthogonal complement of
/// `projector` (unit 2-norm vectors). One matvec per iteration; the explicit
/// residual is tracked and finally recomputed from scratch.
pub(crate) fn minres_raw(
    op: &dyn LinearOperator,
    b: &[f64],
    projector: &[&[f64]],
    tol: f64,
    max_iter: usize,
    x0: Option<&[f64]>,
) -> MinresOutcome {
    let n = b.len();
    let mut b = b.to_vec();
    project_out_unit(projector, &mut b);
    let bnorm = dot(&b, &b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return MinresOutcome {
            x,
            residual: 0.0,
            rhs_norm: 0.0,
            iterations: 0,
        };
    }
    let apply_proj = |v: &[f64], out: &mut [f64]| {
        op.apply_into(v, out);
        project_out_unit(projector, out);
    };
    let mut r = b.clone();
    if let Some(x0) = x0 {
        x.copy_from_slice(x0);
        project_out_unit(projector, &mut x);
        let mut ax = vec![0.0; n];
        apply_proj(&x, &mut ax);
        for i in 0..n {
            r[i] -= ax[i];
        }
    }
    let mut p1 = r.clone();
    let mut s1 = vec![0.0; n];
    apply_proj(&p1, &mut s1);
    let mut p2: Vec<f64> = Vec::new();
    let mut s2: Vec<f64> = Vec::new();
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let s1s1 = dot(&s1, &s1);
        if s1s1 <= f64::MIN_POSITIVE {
            break;
        }
        let alpha = dot(&r, &s1) / s1s1;
        axpy(alpha, &p1, &mut x);
        axpy(-alpha, &s1, &mut r);
        if dot(&r, &r).sqrt() <= tol * bnorm {
            break;
        }
        let mut p0 = s1.clone();
        let mut s0 = vec![0.0; n];
        apply_proj(&s1, &mut s0);
        let beta1 = dot(&s0, &s1) / s1s1;
        axpy(-beta1, &p1, &mut p0);
        axpy(-beta1, &s1, &mut s0);
        if !p2.is_empty() {
            let s2s2 = dot(&s2, &s2);
            if s2s2 > f64::MIN_POSITIVE {
                let beta2 = dot(&s0, &s2) / s2s2;
                axpy(-beta2, &p2, &mut p0);
                axpy(-beta2, &s2, &mut s0);
            }
        }
        // rescale the direction pair: the recurrence is scale invariant but
        // unnormalized directions grow like powers of the spectral radius
        let ns = dot(&s0, &s0).sqrt();
        if ns <= f64::MIN_POSITIVE {
            break;
        }
        for (p, s) in p0.iter_mut().zip(&mut s0) {
            *p /= ns;
            *s /= ns;
        }
        p2 = std::mem::replace(&mut p1, p0);
        s2 = std::mem::replace(&mut s1, s0);
    }
    project_out_unit(projector, &mut x);
    let mut ax = vec![0.0; n];
    apply_proj(&x, &mut ax);
    let mut res = 0.0;
    for i in 0..n {
        let d = ax[i] - b[i];
        res += d * d;
    }
    MinresOutcome {
        x,
        residual: res.sqrt(),
        rhs_norm: bnorm,
        iterations,
    }
}
