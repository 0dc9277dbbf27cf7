//! Photoluminescence observables: binned traces, shot noise, peak heights,
//! recovery curves and the polarization contrast bound.

mod io;
mod noise;
mod peaks;

pub use io::{read_trace, sidecar_path, write_trace, TraceFileMetadata};
pub use noise::{add_shot_noise, ShotNoise};
pub use peaks::{
    contrast_lower_bound, peak_height, recovery_curve, PeakEstimate, RecoveryCurve, RecoveryPair,
    DEFAULT_PEAK_WINDOW_NS,
};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::LevelGraph;
use crate::propagation::Trajectory;

/// Default trace bin width (ns).
pub const DEFAULT_BIN_WIDTH_NS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceMode {
    /// Photon rate in MHz.
    Rate,
    /// Integer photon counts per bin.
    Counts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_id: Option<String>,
    /// Signal-averaging duration in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub averaging_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pulse_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_condition: Option<String>,
}

/// Binned PL signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PLTrace {
    pub bin_edges: Vec<f64>,
    pub values: Vec<f64>,
    pub mode: TraceMode,
    #[serde(default)]
    pub metadata: TraceMetadata,
}

impl PLTrace {
    pub fn new(bin_edges: Vec<f64>, values: Vec<f64>, mode: TraceMode, metadata: TraceMetadata) -> Result<Self> {
        let t = PLTrace {
            bin_edges,
            values,
            mode,
            metadata,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_edges.len() != self.values.len() + 1 {
            return Err(Error::validation(format!(
                "trace has {} edges for {} bins",
                self.bin_edges.len(),
                self.values.len()
            )));
        }
        if self.bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::validation("trace bin edges must be strictly increasing"));
        }
        if self.values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::validation("trace values must be finite and >= 0"));
        }
        if self.mode == TraceMode::Counts && self.values.iter().any(|v| v.fract() != 0.0) {
            return Err(Error::validation("counts-mode trace has non-integer values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.bin_edges[0]
    }

    pub fn end(&self) -> f64 {
        *self.bin_edges.last().expect("validated trace has edges")
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        0.5 * (self.bin_edges[i] + self.bin_edges[i + 1])
    }

    pub fn bin_width(&self, i: usize) -> f64 {
        self.bin_edges[i + 1] - self.bin_edges[i]
    }

    /// Indices of bins whose centre lies in `[t0, t1]`.
    pub fn bins_in(&self, t0: f64, t1: f64) -> std::ops::Range<usize> {
        let first = (0..self.len()).find(|&i| self.bin_center(i) >= t0).unwrap_or(self.len());
        let last = (first..self.len())
            .take_while(|&i| self.bin_center(i) <= t1)
            .last()
            .map_or(first, |i| i + 1);
        first..last
    }

    /// Sub-trace of the bins whose centre lies in `[t0, t1]`.
    pub fn window(&self, t0: f64, t1: f64) -> Result<PLTrace> {
        let r = self.bins_in(t0, t1);
        if r.is_empty() {
            return Err(Error::validation(format!("window [{t0}, {t1}] ns contains no bins")));
        }
        Ok(PLTrace {
            bin_edges: self.bin_edges[r.start..=r.end].to_vec(),
            values: self.values[r].to_vec(),
            mode: self.mode,
            metadata: self.metadata.clone(),
        })
    }

    /// Copy with every value multiplied by `factor` (rate mode only keeps
    /// integrality trivially, so counts traces become rate traces).
    pub fn scaled(&self, factor: f64) -> PLTrace {
        PLTrace {
            bin_edges: self.bin_edges.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
            mode: if factor == 1.0 { self.mode } else { TraceMode::Rate },
            metadata: self.metadata.clone(),
        }
    }
}

/// Uniform bin edges covering `[start, end]` with whole bins only.
pub fn uniform_edges(start: f64, end: f64, bin_width: f64) -> Result<Vec<f64>> {
    if !(bin_width > 0.0) || !(end > start) {
        return Err(Error::validation("bin edges need bin_width > 0 and end > start"));
    }
    let n = ((end - start) / bin_width + 1e-9).floor() as usize;
    if n == 0 {
        return Err(Error::validation("span is shorter than one bin"));
    }
    Ok((0..=n).map(|i| start + i as f64 * bin_width).collect())
}

/// Bin-averages of the piecewise-linear interpolant through `(times, values)`.
///
/// This is linear in `values`; the fitter applies it to sensitivity series as
/// well as to rates.
pub fn bin_average(times: &[f64], values: &[f64], edges: &[f64]) -> Vec<f64> {
    debug_assert_eq!(times.len(), values.len());
    let n = times.len();
    let mut out = Vec::with_capacity(edges.len().saturating_sub(1));
    let mut k = 0usize;
    let interp = |k: usize, t: f64| -> f64 {
        if k + 1 >= n {
            return values[n - 1];
        }
        let (t0, t1) = (times[k], times[k + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        values[k] + w * (values[k + 1] - values[k])
    };
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        while k + 1 < n && times[k + 1] <= a {
            k += 1;
        }
        let mut integral = 0.0;
        let mut t = a;
        let mut j = k;
        while t < b {
            let seg_end = if j + 1 < n { times[j + 1].min(b) } else { b };
            if seg_end <= t {
                j += 1;
                continue;
            }
            integral += 0.5 * (interp(j, t) + interp(j, seg_end)) * (seg_end - t);
            t = seg_end;
            if j + 1 < n && times[j + 1] <= t {
                j += 1;
            }
        }
        out.push(integral / (b - a));
    }
    out
}

/// Rate-mode trace of `Σ weight(s)·p_s(t)` averaged over bins of `bin_width`.
pub fn synthesize_trace(trajectory: &Trajectory, graph: &LevelGraph, bin_width: f64) -> Result<PLTrace> {
    synthesize_window(trajectory, &graph.emission_vector(), None, bin_width, 0.0)
}

/// Rate-mode trace over `window` (defaults to the whole trajectory) with an
/// additive background rate (MHz).
pub fn synthesize_window(
    trajectory: &Trajectory,
    weights: &DVector<f64>,
    window: Option<(f64, f64)>,
    bin_width: f64,
    background: f64,
) -> Result<PLTrace> {
    if trajectory.len() < 2 {
        return Err(Error::validation("trajectory needs at least two samples"));
    }
    let dt = trajectory.sample_dt().unwrap_or(bin_width);
    if bin_width + 1e-12 < dt {
        return Err(Error::validation(format!(
            "bin width {bin_width} ns is finer than the sample spacing {dt} ns"
        )));
    }
    let (t0, t1) = window.unwrap_or((trajectory.times[0], *trajectory.times.last().unwrap()));
    let t1 = t1.min(*trajectory.times.last().unwrap());
    let edges = uniform_edges(t0, t1, bin_width)?;
    let rates = trajectory.emission_rates(weights);
    let values = bin_average(&trajectory.times, &rates, &edges)
        .into_iter()
        .map(|v| (v + background).max(0.0))
        .collect();
    PLTrace::new(edges, values, TraceMode::Rate, TraceMetadata::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{build_preset_7level, SevenLevelRates};
    use crate::sequences::{build_pump_probe, simulate_sequence, InitialCondition, SimulationSettings};

    #[test]
    fn bin_average_of_linear_function_is_exact() {
        let times: Vec<f64> = (0..=20).map(|i| i as f64 * 0.5).collect();
        let values: Vec<f64> = times.iter().map(|t| 2.0 * t + 1.0).collect();
        let edges = vec![0.0, 1.0, 2.5, 10.0];
        let avg = bin_average(&times, &values, &edges);
        assert!((avg[0] - 2.0).abs() < 1e-12);
        assert!((avg[1] - 4.5).abs() < 1e-12);
        assert!((avg[2] - 13.5).abs() < 1e-12);
    }

    #[test]
    fn ground_population_emits_nothing_and_excited_emits_k_r() {
        let g = build_preset_7level(&SevenLevelRates::reference()).unwrap();
        let n = g.len();
        let mk = |i: usize| {
            let mut p = DVector::zeros(n);
            p[i] = 1.0;
            Trajectory {
                times: vec![0.0, 0.5, 1.0],
                populations: vec![p.clone(), p.clone(), p],
                powers: vec![0.0; 3],
            }
        };
        let t = synthesize_trace(&mk(0), &g, 0.5).unwrap();
        assert!(t.values.iter().all(|&v| v == 0.0));
        let t = synthesize_trace(&mk(g.index_of("e0").unwrap()), &g, 0.5).unwrap();
        assert!(t.values.iter().all(|&v| (v - 0.091).abs() < 1e-15));
    }

    #[test]
    fn pulse_from_thermal_shows_peak_then_quenching() {
        let g = build_preset_7level(&SevenLevelRates::reference()).unwrap();
        let seq = build_pump_probe(1000.0, 100.0, 1000.0, 13.6, true).unwrap();
        let traj = simulate_sequence(&g, &seq, &InitialCondition::Thermal, &SimulationSettings::default()).unwrap();
        let trace = synthesize_trace(&traj, &g, 0.5).unwrap().window(0.0, 1000.0).unwrap();
        let early = trace.window(0.0, 50.0).unwrap().values.iter().copied().fold(0.0, f64::max);
        let late = trace.window(900.0, 1000.0).unwrap();
        let late_mean = late.values.iter().sum::<f64>() / late.len() as f64;
        assert!(early > late_mean, "{early} vs {late_mean}");
    }

    #[test]
    fn synthesis_is_linear_in_weights() {
        let g = build_preset_7level(&SevenLevelRates::reference()).unwrap();
        let g2 = g.with_scaled_emission(2.0).unwrap();
        let seq = build_pump_probe(200.0, 50.0, 100.0, 10.0, true).unwrap();
        let traj = simulate_sequence(&g, &seq, &InitialCondition::Thermal, &SimulationSettings::default()).unwrap();
        let a = synthesize_trace(&traj, &g, 1.0).unwrap();
        let b = synthesize_trace(&traj, &g2, 1.0).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((2.0 * x - y).abs() <= 1e-15 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn trace_validation() {
        assert!(PLTrace::new(vec![0.0, 1.0], vec![1.0, 2.0], TraceMode::Rate, TraceMetadata::default()).is_err());
        assert!(PLTrace::new(vec![0.0, 1.0, 1.0], vec![1.0, 2.0], TraceMode::Rate, TraceMetadata::default()).is_err());
        assert!(PLTrace::new(vec![0.0, 1.0], vec![1.5], TraceMode::Counts, TraceMetadata::default()).is_err());
        assert!(PLTrace::new(vec![0.0, 1.0], vec![-1.0], TraceMode::Rate, TraceMetadata::default()).is_err());
        assert!(PLTrace::new(vec![0.0, 1.0], vec![3.0], TraceMode::Counts, TraceMetadata::default()).is_ok());
    }
}
