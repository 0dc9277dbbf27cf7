use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Wald–Wolfowitz runs test on residual signs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunsTest {
    pub runs: usize,
    pub positive: usize,
    pub negative: usize,
    pub z: f64,
    /// Two-sided p-value under the normal approximation.
    pub p_value: f64,
}

/// Runs test on the signs of `residuals`; exact zeros are skipped.
///
/// A sequence of one sign only is a single run; its p-value is the chance
/// `2·2⁻ⁿ` that `n` fair signs all agree.
pub fn runs_test(residuals: &[f64]) -> Result<RunsTest> {
    let signs: Vec<bool> = residuals.iter().filter(|&&r| r != 0.0).map(|&r| r > 0.0).collect();
    let n1 = signs.iter().filter(|&&s| s).count();
    let n2 = signs.len() - n1;
    if signs.len() < 2 {
        return Err(Error::validation("runs test needs at least two nonzero residuals"));
    }
    if n1 == 0 || n2 == 0 {
        return Ok(RunsTest {
            runs: 1,
            positive: n1,
            negative: n2,
            z: f64::NEG_INFINITY,
            p_value: 0.5f64.powi(signs.len() as i32 - 1),
        });
    }
    let runs = 1 + signs.windows(2).filter(|w| w[0] != w[1]).count();
    let (a, b) = (n1 as f64, n2 as f64);
    let n = a + b;
    let mean = 2.0 * a * b / n + 1.0;
    let var = 2.0 * a * b * (2.0 * a * b - n) / (n * n * (n - 1.0));
    let z = if var > 0.0 { (runs as f64 - mean) / var.sqrt() } else { 0.0 };
    let normal = Normal::standard();
    let p_value = 2.0 * (1.0 - normal.cdf(z.abs()));
    Ok(RunsTest {
        runs,
        positive: n1,
        negative: n2,
        z,
        p_value,
    })
}

/// Mean and sample standard deviation of per-flake estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// e.g. `15(3)`.
    pub formatted: String,
}

pub fn summarize(values: &[f64]) -> Result<EnsembleSummary> {
    if values.is_empty() {
        return Err(Error::validation("empty ensemble"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(EnsembleSummary {
        values: values.to_vec(),
        mean,
        std,
        formatted: format_uncertainty(mean, std),
    })
}

/// Concise notation with a one-digit uncertainty: `2.98(4)`, `17.6(3)`,
/// `15(3)`, `780(40)`.
pub fn format_uncertainty(value: f64, sigma: f64) -> String {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return format!("{value}");
    }
    let mut exp = sigma.log10().floor() as i32;
    let mut digit = (sigma / 10f64.powi(exp)).round();
    if digit >= 10.0 {
        digit = 1.0;
        exp += 1;
    }
    if exp < 0 {
        let decimals = (-exp) as usize;
        format!("{value:.decimals$}({digit})")
    } else {
        let scale = 10f64.powi(exp);
        let v = (value / scale).round() * scale;
        format!("{v:.0}({:.0})", digit * scale)
    }
}

/// `τ = 1000/(κ₀ + 2κ₁)` ns with first-order propagation of the
/// `(κ₀, κ₁)` covariance block.
pub fn lifetime_with_uncertainty(kappa0: f64, kappa1: f64, cov: Option<[[f64; 2]; 2]>) -> Result<(f64, Option<f64>)> {
    let s = kappa0 + 2.0 * kappa1;
    if !(s > 0.0) {
        return Err(Error::validation("singlet return rates sum to zero"));
    }
    let tau = 1000.0 / s;
    let sigma = cov.and_then(|c| {
        let var = c[0][0] + 2.0 * (c[0][1] + c[1][0]) + 4.0 * c[1][1];
        (var >= 0.0 && var.is_finite()).then(|| 1000.0 / (s * s) * var.sqrt())
    });
    Ok((tau, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternating_and_blocked_signs() {
        let alt: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let t = runs_test(&alt).unwrap();
        assert_eq!(t.runs, 100);
        assert!(t.p_value < 1e-6 && t.z > 0.0);
        let blocks: Vec<f64> = (0..100).map(|i| if i < 50 { 1.0 } else { -1.0 }).collect();
        let t = runs_test(&blocks).unwrap();
        assert_eq!(t.runs, 2);
        assert!(t.p_value < 1e-6 && t.z < 0.0);
        let same = runs_test(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(same.runs, 1);
        assert_eq!(same.p_value, 0.25);
        assert!(runs_test(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn formats_concise_notation() {
        assert_eq!(format_uncertainty(2.98, 0.04), "2.98(4)");
        assert_eq!(format_uncertainty(17.62, 0.3), "17.6(3)");
        assert_eq!(format_uncertainty(15.2, 2.7), "15(3)");
        assert_eq!(format_uncertainty(781.0, 38.0), "780(40)");
        assert_eq!(format_uncertainty(1.0, 0.96), "1(1)");
    }

    #[test]
    fn lifetime_propagation() {
        let (tau, s) = lifetime_with_uncertainty(37.0, 3.4, Some([[4.0, 0.0], [0.0, 0.0]])).unwrap();
        assert!((tau - 22.831).abs() < 1e-3);
        assert!((s.unwrap() - 2000.0 / (43.8 * 43.8)).abs() < 1e-12);
        let (tau, s) = lifetime_with_uncertainty(56.0, 0.33, None).unwrap();
        assert!((tau - 17.649).abs() < 1e-3);
        assert!(s.is_none());
    }

    #[test]
    fn summary_of_constant_values() {
        let s = summarize(&[15.0, 15.0, 15.0]).unwrap();
        assert_eq!(s.mean, 15.0);
        assert_eq!(s.std, 0.0);
    }
}
