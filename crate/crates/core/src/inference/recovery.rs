use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lm::{minimize, normal_covariance, LeastSquares, LmOptions};
use crate::error::{Error, Result};
use crate::signal::RecoveryCurve;

/// Result of fitting `R(t) = R∞ − (R∞ − R₀)·exp(−t/τ)` to a recovery curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryFitResult {
    pub tau_s_ns: f64,
    pub tau_s_sigma_ns: f64,
    pub r_inf: f64,
    pub r_0: f64,
    /// `R∞ − R₀`.
    pub depth: f64,
    /// Norm of the weighted residual vector.
    pub residual_norm: f64,
    pub dof: usize,
    pub reduced_chi2: f64,
    pub iterations: usize,
}

struct ExpModel<'a> {
    t: &'a [f64],
    y: &'a [f64],
    w: Vec<f64>,
}

impl ExpModel<'_> {
    fn eval(&self, x: &DVector<f64>, jac: Option<&mut DMatrix<f64>>) -> DVector<f64> {
        let (rinf, r0, tau) = (x[0], x[1], x[2]);
        let mut r = DVector::zeros(self.t.len());
        let mut jm = jac;
        for (i, (&t, &y)) in self.t.iter().zip(self.y).enumerate() {
            let e = (-t / tau).exp();
            let m = rinf - (rinf - r0) * e;
            r[i] = self.w[i] * (m - y);
            if let Some(j) = jm.as_deref_mut() {
                j[(i, 0)] = self.w[i] * (1.0 - e);
                j[(i, 1)] = self.w[i] * e;
                j[(i, 2)] = -self.w[i] * (rinf - r0) * e * t / (tau * tau);
            }
        }
        r
    }
}

impl LeastSquares for ExpModel<'_> {
    fn n_params(&self) -> usize {
        3
    }
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.eval(x, None))
    }
    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut j = DMatrix::zeros(self.t.len(), 3);
        let r = self.eval(x, Some(&mut j));
        Ok((r, j))
    }
}

/// Best linear `(R∞, R₀)` for a fixed τ and its weighted cost.
fn linear_given_tau(m: &ExpModel, tau: f64) -> Option<(f64, f64, f64)> {
    let n = m.t.len();
    let a = DMatrix::from_fn(n, 2, |i, c| {
        let e = (-m.t[i] / tau).exp();
        m.w[i] * if c == 0 { 1.0 - e } else { e }
    });
    let b = DVector::from_fn(n, |i, _| m.w[i] * m.y[i]);
    let sol = a.clone().svd(true, true).solve(&b, 1e-14).ok()?;
    let cost = (&a * &sol - &b).norm_squared();
    Some((sol[0], sol[1], cost))
}

/// Exponential recovery fit with restarts over a log-spaced τ grid.
///
/// Uncertainties come from `(JᵀJ)⁻¹` scaled by the reduced chi-square. When
/// the curve carries no uncertainties every point gets unit weight.
pub fn fit_recovery(curve: &RecoveryCurve) -> Result<RecoveryFitResult> {
    curve.validate()?;
    let n = curve.len();
    if n < 4 {
        return Err(Error::DegenerateFit(format!("recovery fit needs at least 4 points, got {n}")));
    }
    let t = &curve.t_d_ns;
    let (tmin, tmax) = t.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = tmax - tmin;
    if !(span > 0.0) {
        return Err(Error::DegenerateFit("dark times have no spread".into()));
    }
    let (ymin, ymax) = curve
        .ratio
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if ymax - ymin <= 1e-12 * ymax.abs() {
        return Err(Error::DegenerateFit("recovery curve is flat".into()));
    }
    let weighted = curve.ratio_sigma.iter().all(|&s| s > 0.0);
    let w = if weighted {
        curve.ratio_sigma.iter().map(|s| 1.0 / s).collect()
    } else {
        vec![1.0; n]
    };
    let model = ExpModel { t, y: &curve.ratio, w };

    let mut min_dt = f64::INFINITY;
    let mut sorted = t.clone();
    sorted.sort_by(f64::total_cmp);
    for p in sorted.windows(2) {
        if p[1] > p[0] {
            min_dt = min_dt.min(p[1] - p[0]);
        }
    }
    let tau_lo = (min_dt * 1e-2).max(1e-6);
    let tau_hi = span * 1e3;
    let yscale = ymax.abs().max(1.0);
    let lower = DVector::from_vec(vec![-1e3 * yscale, -1e3 * yscale, tau_lo]);
    let upper = DVector::from_vec(vec![1e3 * yscale, 1e3 * yscale, tau_hi]);
    let opts = LmOptions {
        max_iterations: 500,
        ..LmOptions::default()
    };

    let guesses = 12;
    let mut best: Option<super::lm::LmOutcome> = None;
    let mut failures = Vec::new();
    for g in 0..guesses {
        let frac = g as f64 / (guesses - 1) as f64;
        let tau0 = (min_dt * 0.5).max(tau_lo * 10.0) * ((span * 10.0) / (min_dt * 0.5)).powf(frac);
        let Some((a, b, _)) = linear_given_tau(&model, tau0) else {
            continue;
        };
        let x0 = DVector::from_vec(vec![a, b, tau0]);
        match minimize(&model, &x0, &lower, &upper, &opts) {
            Ok(out) if out.reason.converged() => {
                if best.as_ref().is_none_or(|b| out.cost < b.cost) {
                    best = Some(out);
                }
            }
            Ok(out) => failures.push(format!("tau0 = {tau0:.3} ns: {:?} after {} steps", out.reason, out.iterations)),
            Err(e) => failures.push(format!("tau0 = {tau0:.3} ns: {e}")),
        }
    }
    let best = best.ok_or_else(|| {
        Error::NonConvergence(format!("no restart converged; {}", failures.join("; ")))
    })?;
    let tau = best.x[2];
    if tau >= tau_hi * (1.0 - 1e-9) || tau <= tau_lo * (1.0 + 1e-9) {
        return Err(Error::DegenerateFit(format!(
            "lifetime ran to its bound ({tau:.4e} ns); the curve shows no exponential recovery"
        )));
    }
    let dof = n - 3;
    let reduced_chi2 = best.cost / dof.max(1) as f64;
    let cov = normal_covariance(&best.jacobian)
        .ok_or_else(|| Error::DegenerateFit("singular normal matrix at the optimum".into()))?;
    // Exact fits have zero chi-square; the floor keeps the reported
    // uncertainty strictly positive.
    let sigma = (cov[(2, 2)] * reduced_chi2.max(1e-30)).sqrt();
    Ok(RecoveryFitResult {
        tau_s_ns: tau,
        tau_s_sigma_ns: sigma.max(f64::MIN_POSITIVE),
        r_inf: best.x[0],
        r_0: best.x[1],
        depth: best.x[0] - best.x[1],
        residual_norm: best.cost.sqrt(),
        dof,
        reduced_chi2,
        iterations: best.iterations,
    })
}
