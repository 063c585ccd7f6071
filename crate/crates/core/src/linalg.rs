//! Dense helpers shared by the solvers and the optimizer engine. Sharing them
//! is what lets paired algorithms agree bit for bit.

use nalgebra::{Cholesky, DMatrix, DVector};

pub(crate) fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// LU with partial pivoting. `None` when a pivot is exactly zero.
pub(crate) fn lu_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.lu().solve(b)
}

/// `gain <- (1 - beta) gain + beta target`, entry by entry.
pub(crate) fn gain_average(gain: &mut DMatrix<f64>, target: &DMatrix<f64>, beta: f64) {
    gain.zip_apply(target, |d, t| *d = (1.0 - beta) * *d + beta * t);
}

/// LU solve that retries with `gain + ridge I` when the factorization is
/// singular or produces non-finite values. The flag reports the retry.
pub(crate) fn solve_with_ridge(gain: &DMatrix<f64>, rhs: &DVector<f64>, ridge: f64) -> (DVector<f64>, bool) {
    let finite = |x: &DVector<f64>| x.iter().all(|v| v.is_finite());
    if let Some(x) = lu_solve(gain.clone(), rhs).filter(finite) {
        return (x, false);
    }
    let n = gain.nrows();
    let shifted = gain + DMatrix::identity(n, n) * ridge;
    (lu_solve(shifted, rhs).filter(finite).unwrap_or_else(|| rhs.clone()), true)
}

/// Condition number above which a Gram system gets a ridge.
const GRAM_COND_LIMIT: f64 = 1e12;
const GRAM_RIDGE: f64 = 1e-10;

/// Solution of an SPD system plus whether a ridge had to be added.
pub(crate) struct SpdSolve {
    pub x: DVector<f64>,
    pub regularized: bool,
}

fn cholesky_ok(a: &DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let ch = Cholesky::new(a.clone())?;
    let l = ch.l_dirty();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..a.nrows() {
        let d = l[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let cond = (hi / lo).powi(2);
    if cond.is_finite() && cond <= GRAM_COND_LIMIT {
        Some(ch)
    } else {
        None
    }
}

/// Cholesky solve of `a x = b`; on failure or a bad condition estimate adds
/// `1e-10 * trace(a) * I`, escalating tenfold until it factors.
/// `None` only when the trace is zero or not finite.
pub(crate) fn spd_solve_with_ridge(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<SpdSolve> {
    if let Some(ch) = cholesky_ok(a) {
        return Some(SpdSolve { x: ch.solve(b), regularized: false });
    }
    let trace = a.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return None;
    }
    let mut ridge = GRAM_RIDGE * trace;
    for _ in 0..12 {
        let shifted = a + DMatrix::identity(a.nrows(), a.ncols()) * ridge;
        if let Some(ch) = Cholesky::new(shifted) {
            return Some(SpdSolve { x: ch.solve(b), regularized: true });
        }
        ridge *= 10.0;
    }
    None
}

/// Result of one Anderson extrapolation.
pub(crate) struct AndersonMix {
    pub point: DVector<f64>,
    pub weights: DVector<f64>,
    pub regularized: bool,
}

/// Anderson mixing over a history ordered newest first.
///
/// Weights minimize `|G w|` subject to `sum w = 1`, giving
/// `w = (G'G)^-1 1 / (1'(G'G)^-1 1)`. The new point is `sum w_i (x_i - g_i)`.
/// A single column returns `x - g` directly.
pub(crate) fn anderson_mix(points: &[&DVector<f64>], residuals: &[&DVector<f64>]) -> AndersonMix {
    let cols = points.len();
    debug_assert!(cols >= 1 && cols == residuals.len());
    if cols == 1 {
        return AndersonMix {
            point: points[0] - residuals[0],
            weights: DVector::from_element(1, 1.0),
            regularized: false,
        };
    }
    let gram = DMatrix::from_fn(cols, cols, |i, j| residuals[i].dot(residuals[j]));
    let ones = DVector::from_element(cols, 1.0);
    let (weights, regularized) = match spd_solve_with_ridge(&gram, &ones) {
        Some(sol) => {
            let total = sol.x.sum();
            if total.is_finite() && total != 0.0 {
                (sol.x / total, sol.regularized)
            } else {
                (unit(cols, 0), true)
            }
        }
        // all residuals zero: keep the current iterate's fixed-point image
        None => (unit(cols, 0), true),
    };
    let mut point = DVector::zeros(points[0].len());
    for i in 0..cols {
        point += (points[i] - residuals[i]) * weights[i];
    }
    AndersonMix { point, weights, regularized }
}

fn unit(len: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(len);
    e[i] = 1.0;
    e
}

/// Applies `(I - gamma 1 w')^-1 = I + gamma/(1-gamma) 1 w'` to `g`, valid for
/// any `w` summing to one.
pub(crate) fn rank_one_inverse_apply(g: &DVector<f64>, w: &DVector<f64>, gamma: f64) -> DVector<f64> {
    let shift = gamma / (1.0 - gamma) * w.dot(g);
    g.map(|x| x + shift)
}

/// Power iteration for a stationary distribution. `step` maps `w` to `P' w`.
/// Stops after `iters` sweeps or once the 1-norm change drops below `tol`.
pub(crate) fn stationary_power(
    mut w: DVector<f64>,
    iters: usize,
    tol: f64,
    step: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> DVector<f64> {
    for _ in 0..iters {
        let mut next = step(&w);
        let mass = next.sum();
        if !(mass > 0.0) {
            break;
        }
        next /= mass;
        let change = (&next - &w).lp_norm(1);
        w = next;
        if change < tol {
            break;
        }
    }
    w
}
