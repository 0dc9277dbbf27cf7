use serde::{Deserialize, Serialize};

use super::{PLTrace, TraceMode};
use crate::error::{Error, Result};

/// Default peak-search window length measured from pulse onset (ns).
pub const DEFAULT_PEAK_WINDOW_NS: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakEstimate {
    pub value: f64,
    /// 1σ; zero for rate-mode traces.
    pub uncertainty: f64,
    /// Centre of the bin where the maximum occurs.
    pub time_ns: f64,
    pub index: usize,
}

/// Maximum of the centred 3-bin moving average over bins whose centre lies in
/// `window`. The average is truncated at the window edges.
pub fn peak_height(trace: &PLTrace, window: (f64, f64)) -> Result<PeakEstimate> {
    let r = trace.bins_in(window.0, window.1);
    if r.is_empty() {
        return Err(Error::validation(format!(
            "peak window [{}, {}] ns contains no bins of the trace [{}, {}] ns",
            window.0,
            window.1,
            trace.start(),
            trace.end()
        )));
    }
    let mut best: Option<PeakEstimate> = None;
    for i in r.clone() {
        let lo = i.saturating_sub(1).max(r.start);
        let hi = (i + 1).min(r.end - 1);
        let k = (hi - lo + 1) as f64;
        let sum: f64 = trace.values[lo..=hi].iter().sum();
        let value = sum / k;
        let uncertainty = match trace.mode {
            TraceMode::Counts => sum.max(1.0).sqrt() / k,
            TraceMode::Rate => 0.0,
        };
        if best.is_none_or(|b| value >= b.value) {
            best = Some(PeakEstimate {
                value,
                uncertainty,
                time_ns: trace.bin_center(i),
                index: i,
            });
        }
    }
    Ok(best.expect("non-empty window"))
}

/// Traces of the first and second pulse of one pulse pair. Each trace starts
/// at its pulse onset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryPair {
    pub t_d_ns: f64,
    pub first: PLTrace,
    pub second: PLTrace,
}

impl RecoveryPair {
    /// Split a whole-sequence trace at the given pulse windows.
    pub fn from_sequence_trace(t_d_ns: f64, trace: &PLTrace, pulses: &[(f64, f64)]) -> Result<Self> {
        if pulses.len() < 2 {
            return Err(Error::validation("a recovery pair needs two pulses"));
        }
        Ok(RecoveryPair {
            t_d_ns,
            first: trace.window(pulses[0].0, pulses[0].1)?,
            second: trace.window(pulses[1].0, pulses[1].1)?,
        })
    }
}

/// Second-to-first peak ratio versus dark time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCurve {
    pub t_d_ns: Vec<f64>,
    pub ratio: Vec<f64>,
    pub ratio_sigma: Vec<f64>,
}

impl RecoveryCurve {
    pub fn new(t_d_ns: Vec<f64>, ratio: Vec<f64>, ratio_sigma: Vec<f64>) -> Result<Self> {
        let c = RecoveryCurve {
            t_d_ns,
            ratio,
            ratio_sigma,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio.len() != self.t_d_ns.len() || self.ratio_sigma.len() != self.t_d_ns.len() {
            return Err(Error::validation("recovery curve columns differ in length"));
        }
        if let Some(r) = self.ratio.iter().find(|&&r| !(r > 0.0 && r <= 1.5)) {
            return Err(Error::validation(format!("recovery ratio {r} outside (0, 1.5]")));
        }
        if self.ratio_sigma.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::validation("recovery ratio uncertainties must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t_d_ns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_d_ns.is_empty()
    }
}

/// Peak ratios with first-order error propagation. Peaks are searched over
/// `[onset, onset + window_ns]` of each pulse trace.
pub fn recovery_curve(pairs: &[RecoveryPair], window_ns: f64) -> Result<RecoveryCurve> {
    let mut t = Vec::with_capacity(pairs.len());
    let mut ratio = Vec::with_capacity(pairs.len());
    let mut sigma = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let p1 = peak_height(&pair.first, (pair.first.start(), pair.first.start() + window_ns))?;
        let p2 = peak_height(&pair.second, (pair.second.start(), pair.second.start() + window_ns))?;
        if p1.value <= 0.0 {
            return Err(Error::validation(format!("first peak is zero at t_D = {} ns", pair.t_d_ns)));
        }
        let r = p2.value / p1.value;
        let rel2 = (p1.uncertainty / p1.value).powi(2)
            + if p2.value > 0.0 {
                (p2.uncertainty / p2.value).powi(2)
            } else {
                0.0
            };
        t.push(pair.t_d_ns);
        ratio.push(r);
        sigma.push(r * rel2.sqrt());
    }
    RecoveryCurve::new(t, ratio, sigma)
}

/// `(peak − steady)/peak` for a single-pulse trace starting at pulse onset,
/// with the steady level averaged over the final 20% of the trace.
pub fn contrast_lower_bound(trace: &PLTrace) -> Result<f64> {
    let span = trace.end() - trace.start();
    let peak = peak_height(trace, (trace.start(), trace.start() + DEFAULT_PEAK_WINDOW_NS.min(span)))?;
    if peak.value <= 0.0 {
        return Err(Error::validation("contrast needs a nonzero peak"));
    }
    let tail = trace.bins_in(trace.end() - 0.2 * span, trace.end());
    if tail.is_empty() {
        return Err(Error::validation("trace too short for a steady-state estimate"));
    }
    let steady = trace.values[tail.clone()].iter().sum::<f64>() / tail.len() as f64;
    Ok((peak.value - steady) / peak.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{uniform_edges, TraceMetadata};

    fn trace(values: Vec<f64>, mode: TraceMode) -> PLTrace {
        let edges = uniform_edges(0.0, values.len() as f64, 1.0).unwrap();
        PLTrace::new(edges, values, mode, TraceMetadata::default()).unwrap()
    }

    #[test]
    fn monotone_trace_peaks_at_last_bin() {
        let t = trace((0..20).map(f64::from).collect(), TraceMode::Rate);
        let p = peak_height(&t, (0.0, 10.0)).unwrap();
        assert_eq!(p.index, 9);
        assert!((p.value - 8.5).abs() < 1e-12);
    }

    #[test]
    fn moving_average_suppresses_single_spike() {
        let mut v = vec![10.0; 20];
        v[5] = 40.0;
        v[12] = 25.0;
        v[13] = 25.0;
        v[14] = 25.0;
        let p = peak_height(&trace(v, TraceMode::Counts), (0.0, 20.0)).unwrap();
        assert_eq!(p.index, 13);
        assert!((p.uncertainty - 75f64.sqrt() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_window_is_error() {
        let t = trace(vec![1.0; 5], TraceMode::Rate);
        assert!(peak_height(&t, (10.0, 20.0)).is_err());
    }

    #[test]
    fn flat_pair_has_unit_ratio_and_scaling_invariance() {
        let a = trace(vec![3.0; 60], TraceMode::Rate);
        let pair = RecoveryPair {
            t_d_ns: 10.0,
            first: a.clone(),
            second: a.clone(),
        };
        let c = recovery_curve(std::slice::from_ref(&pair), 50.0).unwrap();
        assert!((c.ratio[0] - 1.0).abs() < 1e-15);
        let scaled = RecoveryPair {
            t_d_ns: 10.0,
            first: a.scaled(7.0),
            second: a.scaled(7.0),
        };
        let c2 = recovery_curve(&[scaled], 50.0).unwrap();
        assert_eq!(c.ratio, c2.ratio);
    }

    #[test]
    fn zero_first_peak_is_error() {
        let pair = RecoveryPair {
            t_d_ns: 0.0,
            first: trace(vec![0.0; 10], TraceMode::Rate),
            second: trace(vec![1.0; 10], TraceMode::Rate),
        };
        assert!(recovery_curve(&[pair], 50.0).is_err());
    }

    #[test]
    fn contrast_limits() {
        assert_eq!(contrast_lower_bound(&trace(vec![2.0; 100], TraceMode::Rate)).unwrap(), 0.0);
        let mut v = vec![0.0; 100];
        v[1] = 5.0;
        v[2] = 5.0;
        v[3] = 5.0;
        assert_eq!(contrast_lower_bound(&trace(v, TraceMode::Rate)).unwrap(), 1.0);
        assert!(contrast_lower_bound(&trace(vec![0.0; 100], TraceMode::Rate)).is_err());
    }

    #[test]
    fn curve_rejects_out_of_range_ratios() {
        assert!(RecoveryCurve::new(vec![0.0], vec![1.6], vec![0.0]).is_err());
        assert!(RecoveryCurve::new(vec![0.0], vec![0.0], vec![0.0]).is_err());
        assert!(RecoveryCurve::new(vec![0.0, 1.0], vec![0.5], vec![0.0]).is_err());
    }
}
