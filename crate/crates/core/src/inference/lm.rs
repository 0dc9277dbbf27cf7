//! Box-constrained damped Gauss-Newton (Levenberg-Marquardt) least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A weighted residual vector and, on request, its Jacobian.
pub trait LeastSquares {
    fn n_params(&self) -> usize;
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Relative cost decrease below which an accepted step ends the run.
    pub cost_tolerance: f64,
    /// Relative step size below which the run ends.
    pub step_tolerance: f64,
    /// Infinity norm of the projected gradient below which the run ends.
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 200,
            cost_tolerance: 1e-12,
            step_tolerance: 1e-12,
            gradient_tolerance: 1e-10,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Gradient,
    Cost,
    Step,
    MaxIterations,
    Stalled,
}

impl StopReason {
    pub fn converged(self) -> bool {
        !matches!(self, StopReason::MaxIterations | StopReason::Stalled)
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: DVector<f64>,
    /// Sum of squared residuals.
    pub cost: f64,
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// Accepted steps.
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

fn project(x: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

/// Gradient components that point out of the box at an active bound are zeroed.
fn projected_gradient(g: &DVector<f64>, x: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    let mut pg = g.clone();
    for i in 0..x.len() {
        let at_lo = x[i] <= lower[i] && g[i] > 0.0;
        let at_hi = x[i] >= upper[i] && g[i] < 0.0;
        if at_lo || at_hi {
            pg[i] = 0.0;
        }
    }
    pg
}

/// Minimise `Σ r(x)²` over the box `[lower, upper]`. Only steps that lower
/// the cost are accepted.
pub fn minimize<P: LeastSquares + ?Sized>(
    problem: &P,
    x0: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    opts: &LmOptions,
) -> Result<LmOutcome> {
    let n = problem.n_params();
    if x0.len() != n || lower.len() != n || upper.len() != n {
        return Err(Error::validation("start and bounds must match the parameter count"));
    }
    if (0..n).any(|i| !(lower[i] <= upper[i])) {
        return Err(Error::validation("lower bound exceeds upper bound"));
    }
    let mut x = x0.clone();
    project(&mut x, lower, upper);
    let (mut r, mut j) = problem.residuals_and_jacobian(&x)?;
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return Err(Error::numerical("objective is not finite at the start point"));
    }
    let mut evaluations = 1;
    let mut lambda = opts.initial_damping;
    let mut iterations = 0;
    let mut history = vec![cost];
    let mut reason = StopReason::MaxIterations;

    while iterations < opts.max_iterations {
        let g = j.tr_mul(&r);
        let pg = projected_gradient(&g, &x, lower, upper);
        if pg.amax() <= opts.gradient_tolerance * (1.0 + cost) || cost == 0.0 {
            reason = StopReason::Gradient;
            break;
        }
        let jtj = j.tr_mul(&j);
        // Parameters pinned at a bound with the gradient pushing outward are
        // frozen for this step.
        let free: Vec<usize> = (0..n).filter(|&i| pg[i] != 0.0 || (x[i] > lower[i] && x[i] < upper[i])).collect();
        let mut accepted = false;
        for _ in 0..40 {
            let k = free.len();
            let mut a = DMatrix::zeros(k, k);
            let mut b = DVector::zeros(k);
            for (ai, &fi) in free.iter().enumerate() {
                b[ai] = -g[fi];
                for (aj, &fj) in free.iter().enumerate() {
                    a[(ai, aj)] = jtj[(fi, fj)];
                }
                a[(ai, ai)] += lambda * jtj[(fi, fi)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let d = chol.solve(&b);
            let mut trial = x.clone();
            for (ai, &fi) in free.iter().enumerate() {
                trial[fi] += d[ai];
            }
            project(&mut trial, lower, upper);
            let step = (&trial - &x).norm();
            if step <= opts.step_tolerance * (x.norm() + opts.step_tolerance) {
                reason = StopReason::Step;
                break;
            }
            evaluations += 1;
            let trial_cost = match problem.residuals(&trial) {
                Ok(rt) => rt.norm_squared(),
                Err(_) => f64::INFINITY,
            };
            if trial_cost.is_finite() && trial_cost < cost {
                let (rn, jn) = problem.residuals_and_jacobian(&trial)?;
                evaluations += 1;
                let rel = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
                x = trial;
                r = rn;
                j = jn;
                cost = trial_cost;
                history.push(cost);
                iterations += 1;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel <= opts.cost_tolerance {
                    reason = StopReason::Cost;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                break;
            }
        }
        if reason != StopReason::MaxIterations {
            break;
        }
        if !accepted {
            reason = StopReason::Stalled;
            break;
        }
    }
    Ok(LmOutcome {
        x,
        cost,
        residuals: r,
        jacobian: j,
        iterations,
        evaluations,
        reason,
        cost_history: history,
    })
}

/// `(JᵀJ)⁻¹`, or `None` when the normal matrix is singular.
pub fn normal_covariance(jacobian: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let jtj = jacobian.tr_mul(jacobian);
    let n = jtj.nrows();
    // Scale to unit diagonal so conditioning is judged independently of units.
    let d: Vec<f64> = (0..n).map(|i| jtj[(i, i)].sqrt()).collect();
    if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return None;
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| jtj[(i, j)] / (d[i] * d[j]));
    let eig = scaled.clone().symmetric_eigen();
    let (min, max) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    if !(min > max * 1e-14) {
        return None;
    }
    let inv = scaled.cholesky()?.inverse();
    let mut cov = DMatrix::from_fn(n, n, |i, j| inv[(i, j)] / (d[i] * d[j]));
    cov = (&cov + cov.transpose()) * 0.5;
    Some(cov)
}
