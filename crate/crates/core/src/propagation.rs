//! Population propagation under piecewise laser-power profiles.
//!
//! Within a profile segment the power relaxes exponentially from its value at
//! the segment start toward the segment target with the rise (or fall) time
//! constant. While the power is still moving, the time axis is cut into
//! sub-intervals no longer than `min(sample_dt, τ/substep_divisor)` and each
//! sub-interval is propagated with the exact mean power over it. Once the
//! remaining offset drops below `settle_tolerance` of the jump, the power is
//! held at the target and the cached one-sample propagator is reused.
//!
//! A [`StepPlan`] holds this time discretisation. It depends only on the
//! profile and options, so fits reuse one plan across every parameter
//! evaluation.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{thermal_state, GeneratorParts, LevelGraph};

const TIME_EPS: f64 = 1e-7;

/// `exp(m)` by scaling and squaring; errors on a non-finite result.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = m.exp();
    if e.iter().all(|x| x.is_finite()) {
        Ok(e)
    } else {
        Err(Error::numerical("matrix exponential is not finite"))
    }
}

/// `exp(M·t)·p0` for a constant generator `m` (MHz) and time `t` (ns).
pub fn propagate_constant(m: &DMatrix<f64>, p0: &DVector<f64>, t_ns: f64) -> Result<DVector<f64>> {
    if m.nrows() != m.ncols() || m.nrows() != p0.len() {
        return Err(Error::validation("propagate_constant: dimension mismatch"));
    }
    if !(t_ns >= 0.0) || !t_ns.is_finite() {
        return Err(Error::validation(format!("propagation time {t_ns} ns must be >= 0")));
    }
    if t_ns == 0.0 {
        return Ok(p0.clone());
    }
    let p = expm(&(m * (t_ns * 1e-3)))? * p0;
    if p.iter().all(|x| x.is_finite()) {
        Ok(p)
    } else {
        Err(Error::numerical("propagated populations are not finite"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Pulse,
    Dark,
    Wait,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSegment {
    pub duration_ns: f64,
    pub target_power_mw: f64,
    pub kind: SegmentKind,
    /// Population is reset to the thermal state at the start of this segment.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reset_before: bool,
}

impl ProfileSegment {
    pub fn new(duration_ns: f64, target_power_mw: f64) -> Self {
        let kind = if target_power_mw > 0.0 {
            SegmentKind::Pulse
        } else {
            SegmentKind::Dark
        };
        ProfileSegment {
            duration_ns,
            target_power_mw,
            kind,
            reset_before: false,
        }
    }
}

/// Laser-power schedule with a first-order rise/fall response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    pub segments: Vec<ProfileSegment>,
    pub rise_time_ns: f64,
    /// Defaults to the rise time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fall_time_ns: Option<f64>,
    /// Laser power before the first segment.
    #[serde(default)]
    pub initial_power_mw: f64,
    /// Thermal reset after the last segment.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reset_at_end: bool,
}

impl PowerProfile {
    pub fn new(segments: Vec<ProfileSegment>, rise_time_ns: f64) -> Self {
        PowerProfile {
            segments,
            rise_time_ns,
            fall_time_ns: None,
            initial_power_mw: 0.0,
            reset_at_end: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::validation("power profile has no segments"));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.duration_ns > 0.0) || !s.duration_ns.is_finite() {
                return Err(Error::validation(format!("segment {i}: duration {} ns must be > 0", s.duration_ns)));
            }
            if !(s.target_power_mw >= 0.0) || !s.target_power_mw.is_finite() {
                return Err(Error::validation(format!("segment {i}: power {} mW must be >= 0", s.target_power_mw)));
            }
        }
        let fall = self.fall_time();
        if !(self.rise_time_ns >= 0.0) || !(fall >= 0.0) || !self.rise_time_ns.is_finite() || !fall.is_finite() {
            return Err(Error::validation("rise/fall time constants must be finite and >= 0"));
        }
        if !(self.initial_power_mw >= 0.0) {
            return Err(Error::validation("initial power must be >= 0"));
        }
        Ok(())
    }

    pub fn fall_time(&self) -> f64 {
        self.fall_time_ns.unwrap_or(self.rise_time_ns)
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_ns).sum()
    }

    /// Start time of each segment.
    pub fn segment_starts(&self) -> Vec<f64> {
        let mut t = 0.0;
        self.segments
            .iter()
            .map(|s| {
                let start = t;
                t += s.duration_ns;
                start
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationOptions {
    /// Ramp sub-intervals are at most `τ / substep_divisor`.
    pub substep_divisor: f64,
    /// Relative offset at which a ramp counts as settled.
    pub settle_tolerance: f64,
}

impl Default for PropagationOptions {
    fn default() -> Self {
        PropagationOptions {
            substep_divisor: 5.0,
            settle_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlanOp {
    Step { h_ns: f64, power: f64 },
    Sample { power: f64 },
    Reset,
}

/// Per parameter, the population derivative at every sample.
pub type Sensitivities = Vec<Vec<DVector<f64>>>;

/// Time discretisation of a profile at a fixed sample spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    ops: Vec<PlanOp>,
    times: Vec<f64>,
    sample_dt: f64,
}

struct PlanBuilder {
    ops: Vec<PlanOp>,
    times: Vec<f64>,
    dt: f64,
    n_samples: usize,
}

impl PlanBuilder {
    fn next_sample_time(&self) -> f64 {
        if self.times.len() < self.n_samples {
            self.times.len() as f64 * self.dt
        } else {
            f64::INFINITY
        }
    }

    fn maybe_sample(&mut self, t: f64, power: f64) {
        let ts = self.next_sample_time();
        if (t - ts).abs() <= TIME_EPS {
            self.ops.push(PlanOp::Sample { power });
            self.times.push(ts);
        }
    }
}

impl StepPlan {
    pub fn new(profile: &PowerProfile, sample_dt: f64, opts: &PropagationOptions) -> Result<Self> {
        profile.validate()?;
        if !(sample_dt > 0.0) || !sample_dt.is_finite() {
            return Err(Error::validation(format!("sample_dt {sample_dt} ns must be > 0")));
        }
        if !(opts.substep_divisor >= 1.0) || !(opts.settle_tolerance > 0.0 && opts.settle_tolerance < 1.0) {
            return Err(Error::validation("invalid propagation options"));
        }
        let total = profile.total_duration();
        let n_samples = (total / sample_dt + 1e-9).floor() as usize + 1;
        let mut b = PlanBuilder {
            ops: Vec::with_capacity(2 * n_samples + 64),
            times: Vec::with_capacity(n_samples),
            dt: sample_dt,
            n_samples,
        };
        let settle_factor = (1.0 / opts.settle_tolerance).ln();
        let mut power = profile.initial_power_mw;
        let mut t0 = 0.0;
        for seg in &profile.segments {
            if seg.reset_before {
                b.ops.push(PlanOp::Reset);
            }
            b.maybe_sample(t0, power);
            let t1 = t0 + seg.duration_ns;
            let target = seg.target_power_mw;
            let jump = power - target;
            let tau = if target >= power {
                profile.rise_time_ns
            } else {
                profile.fall_time()
            };
            let ramp = jump != 0.0 && tau > 0.0;
            let ramp_len = if ramp {
                (tau * settle_factor).min(seg.duration_ns)
            } else {
                0.0
            };
            let inst = |u: f64| {
                if ramp && u < ramp_len {
                    target + jump * (-u / tau).exp()
                } else {
                    target
                }
            };
            let mut t = t0;
            for (region_end, hmax) in [
                (t0 + ramp_len, if ramp { sample_dt.min(tau / opts.substep_divisor) } else { f64::INFINITY }),
                (t1, f64::INFINITY),
            ] {
                let is_ramp = hmax.is_finite();
                while t < region_end - TIME_EPS {
                    let ts = b.next_sample_time();
                    let mut end = (t + hmax).min(region_end);
                    if ts <= end + TIME_EPS && ts > t + TIME_EPS {
                        end = ts;
                    }
                    if (region_end - end).abs() <= TIME_EPS {
                        end = region_end;
                    }
                    let h = end - t;
                    let p = if is_ramp {
                        let (a, c) = (t - t0, end - t0);
                        target + jump * tau * ((-a / tau).exp() - (-c / tau).exp()) / (c - a)
                    } else {
                        target
                    };
                    b.ops.push(PlanOp::Step { h_ns: h, power: p });
                    t = end;
                    if t < t1 - TIME_EPS {
                        b.maybe_sample(t, inst(t - t0));
                    }
                }
                t = t.max(region_end);
            }
            power = if ramp && ramp_len < seg.duration_ns || !ramp {
                target
            } else {
                target + jump * (-seg.duration_ns / tau).exp()
            };
            t0 = t1;
        }
        if profile.reset_at_end {
            b.ops.push(PlanOp::Reset);
        }
        b.maybe_sample(t0, power);
        Ok(StepPlan {
            ops: b.ops,
            times: b.times,
            sample_dt,
        })
    }

    pub fn sample_times(&self) -> &[f64] {
        &self.times
    }

    pub fn sample_dt(&self) -> f64 {
        self.sample_dt
    }

    pub fn sample_powers(&self) -> Vec<f64> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                PlanOp::Sample { power } => Some(*power),
                _ => None,
            })
            .collect()
    }

    /// Number of distinct propagators the plan needs.
    pub fn distinct_steps(&self) -> usize {
        let mut keys: Vec<(u64, u64)> = self
            .ops
            .iter()
            .filter_map(|op| match op {
                PlanOp::Step { h_ns, power } => Some((h_ns.to_bits(), power.to_bits())),
                _ => None,
            })
            .collect();
        keys.sort_unstable();
        keys.dedup();
        keys.len()
    }

    /// Run the plan and return the population at every sample.
    pub fn run(&self, parts: &GeneratorParts, p0: &DVector<f64>, thermal: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let n = parts.dim();
        if p0.len() != n || thermal.len() != n {
            return Err(Error::validation("population vector length does not match the graph"));
        }
        let mut cache: HashMap<(u64, u64), DMatrix<f64>> = HashMap::new();
        let mut p = p0.clone();
        let mut out = Vec::with_capacity(self.times.len());
        for op in &self.ops {
            match *op {
                PlanOp::Reset => p.copy_from(thermal),
                PlanOp::Sample { .. } => out.push(p.clone()),
                PlanOp::Step { h_ns, power } => {
                    let key = (h_ns.to_bits(), power.to_bits());
                    let e = match cache.get(&key) {
                        Some(e) => e,
                        None => {
                            let e = expm(&(parts.at(power) * (h_ns * 1e-3)))?;
                            cache.entry(key).or_insert(e)
                        }
                    };
                    p = e * &p;
                }
            }
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical("propagated populations are not finite"));
        }
        Ok(out)
    }

    /// Run the plan together with forward sensitivities `∂p/∂θ_j`.
    ///
    /// Each step uses the block exponential
    /// `exp([[M, ∂M], [0, M]]·h)`, whose upper-right block is the exact
    /// derivative of `exp(M·h)` for the piecewise-constant power.
    pub fn run_with_sensitivity(
        &self,
        parts: &GeneratorParts,
        dparts: &[GeneratorParts],
        p0: &DVector<f64>,
        dp0: &[DVector<f64>],
        thermal: &DVector<f64>,
    ) -> Result<(Vec<DVector<f64>>, Sensitivities)> {
        let n = parts.dim();
        let k = dparts.len();
        if dp0.len() != k || p0.len() != n {
            return Err(Error::validation("sensitivity dimensions do not match"));
        }
        struct Prop {
            e: DMatrix<f64>,
            d: Vec<Option<DMatrix<f64>>>,
        }
        let mut cache: HashMap<(u64, u64), Prop> = HashMap::new();
        let mut p = p0.clone();
        let mut s: Vec<DVector<f64>> = dp0.to_vec();
        let mut out = Vec::with_capacity(self.times.len());
        let mut dout: Vec<Vec<DVector<f64>>> = (0..k).map(|_| Vec::with_capacity(self.times.len())).collect();
        for op in &self.ops {
            match *op {
                PlanOp::Reset => {
                    p.copy_from(thermal);
                    s.iter_mut().for_each(|v| v.fill(0.0));
                }
                PlanOp::Sample { .. } => {
                    out.push(p.clone());
                    for (j, v) in s.iter().enumerate() {
                        dout[j].push(v.clone());
                    }
                }
                PlanOp::Step { h_ns, power } => {
                    let key = (h_ns.to_bits(), power.to_bits());
                    if let std::collections::hash_map::Entry::Vacant(slot) = cache.entry(key) {
                        let hm = h_ns * 1e-3;
                        let m = parts.at(power) * hm;
                        let e = expm(&m)?;
                        let d = dparts
                            .iter()
                            .map(|dp| {
                                let dm = dp.at(power) * hm;
                                if dm.iter().all(|&x| x == 0.0) {
                                    return Ok(None);
                                }
                                let mut block = DMatrix::zeros(2 * n, 2 * n);
                                block.view_mut((0, 0), (n, n)).copy_from(&m);
                                block.view_mut((n, n), (n, n)).copy_from(&m);
                                block.view_mut((0, n), (n, n)).copy_from(&dm);
                                let eb = expm(&block)?;
                                Ok(Some(eb.view((0, n), (n, n)).into_owned()))
                            })
                            .collect::<Result<Vec<_>>>()?;
                        slot.insert(Prop { e, d });
                    }
                    let prop = &cache[&key];
                    for (sj, dj) in s.iter_mut().zip(&prop.d) {
                        let mut next = &prop.e * &*sj;
                        if let Some(dj) = dj {
                            next += dj * &p;
                        }
                        *sj = next;
                    }
                    p = &prop.e * &p;
                }
            }
        }
        Ok((out, dout))
    }
}

/// Sampled populations along a profile.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub populations: Vec<DVector<f64>>,
    pub powers: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn sample_dt(&self) -> Option<f64> {
        (self.times.len() > 1).then(|| self.times[1] - self.times[0])
    }

    /// Detected PL rate `Σ w_s p_s` at each sample.
    pub fn emission_rates(&self, weights: &DVector<f64>) -> Vec<f64> {
        self.populations.iter().map(|p| weights.dot(p)).collect()
    }
}

/// Clamp tiny negative populations to zero, logging the clamp magnitude.
pub(crate) fn clamp_populations(pops: &mut [DVector<f64>]) {
    let mut worst = 0.0f64;
    for p in pops.iter_mut() {
        for x in p.iter_mut() {
            if *x < 0.0 {
                worst = worst.min(*x);
                *x = 0.0;
            }
        }
    }
    if worst < -1e-12 {
        log::warn!("clamped population of {worst:e} to zero");
    } else if worst < 0.0 {
        log::debug!("clamped population of {worst:e} to zero");
    }
}

pub(crate) fn check_initial(p0: &DVector<f64>, n: usize) -> Result<()> {
    if p0.len() != n {
        return Err(Error::validation(format!(
            "initial population has {} entries, graph has {n} states",
            p0.len()
        )));
    }
    let sum: f64 = p0.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p0.iter().any(|&x| x < -1e-12 || !x.is_finite()) {
        return Err(Error::validation(format!("initial population must be a distribution (sum {sum})")));
    }
    Ok(())
}

pub fn propagate_profile(
    graph: &LevelGraph,
    profile: &PowerProfile,
    p0: &DVector<f64>,
    sample_dt: f64,
) -> Result<Trajectory> {
    propagate_profile_with(graph, profile, p0, sample_dt, &PropagationOptions::default())
}

pub fn propagate_profile_with(
    graph: &LevelGraph,
    profile: &PowerProfile,
    p0: &DVector<f64>,
    sample_dt: f64,
    opts: &PropagationOptions,
) -> Result<Trajectory> {
    check_initial(p0, graph.len())?;
    let plan = StepPlan::new(profile, sample_dt, opts)?;
    let parts = GeneratorParts::from_graph(graph);
    let thermal = if plan.ops.iter().any(|o| matches!(o, PlanOp::Reset)) {
        thermal_state(graph)?
    } else {
        p0.clone()
    };
    let mut populations = plan.run(&parts, p0, &thermal)?;
    clamp_populations(&mut populations);
    Ok(Trajectory {
        times: plan.times.clone(),
        powers: plan.sample_powers(),
        populations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{build_preset_7level, build_rate_matrix, SevenLevelRates, LABEL_SINGLET};

    fn graph7() -> LevelGraph {
        build_preset_7level(&SevenLevelRates::reference()).unwrap()
    }

    #[test]
    fn zero_time_is_identity() {
        let g = graph7();
        let m = build_rate_matrix(&g, 13.6).unwrap();
        let p0 = thermal_state(&g).unwrap();
        assert_eq!(propagate_constant(&m, &p0, 0.0).unwrap(), p0);
        assert!(propagate_constant(&m, &p0, -1.0).is_err());
    }

    #[test]
    fn singlet_decays_with_analytic_lifetime() {
        let g = graph7();
        let m = build_rate_matrix(&g, 0.0).unwrap();
        let s = g.index_of(LABEL_SINGLET).unwrap();
        let mut p0 = DVector::zeros(7);
        p0[s] = 1.0;
        let tau = 1000.0 / 43.8;
        let p = propagate_constant(&m, &p0, tau).unwrap();
        assert!((p[s] - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn plan_samples_on_grid_and_substeps_ramps() {
        let profile = PowerProfile::new(
            vec![ProfileSegment::new(20.0, 10.0), ProfileSegment::new(10.0, 0.0)],
            2.5,
        );
        let plan = StepPlan::new(&profile, 1.0, &PropagationOptions::default()).unwrap();
        assert_eq!(plan.sample_times().len(), 31);
        for (k, &t) in plan.sample_times().iter().enumerate() {
            assert!((t - k as f64).abs() < 1e-9);
        }
        let max_ramp_step = plan
            .ops
            .iter()
            .filter_map(|o| match o {
                PlanOp::Step { h_ns, power } if *power > 0.0 && *power < 9.99 => Some(*h_ns),
                _ => None,
            })
            .fold(0.0, f64::max);
        assert!(max_ramp_step <= 0.5 + 1e-12);
        // instantaneous power at 5 tau into the pulse is within 1% of target
        let powers = plan.sample_powers();
        assert!((powers[13] - 10.0).abs() / 10.0 < 0.01 * (12.5f64 / 13.0).exp());
        assert!((powers[12] - 10.0 * (1.0 - (-12.0f64 / 2.5).exp())).abs() < 1e-12);
    }

    #[test]
    fn empty_profile_is_rejected() {
        let g = graph7();
        let p0 = thermal_state(&g).unwrap();
        let profile = PowerProfile::new(vec![], 0.0);
        assert!(propagate_profile(&g, &profile, &p0, 1.0).is_err());
        let ok = PowerProfile::new(vec![ProfileSegment::new(5.0, 1.0)], 0.0);
        assert!(propagate_profile(&g, &ok, &p0, 0.0).is_err());
    }

    #[test]
    fn reset_restores_thermal_state() {
        let g = graph7();
        let p0 = thermal_state(&g).unwrap();
        let mut second = ProfileSegment::new(10.0, 0.0);
        second.reset_before = true;
        let profile = PowerProfile::new(vec![ProfileSegment::new(100.0, 13.6), second], 0.0);
        let traj = propagate_profile(&g, &profile, &p0, 1.0).unwrap();
        // the sample at the reset boundary is taken after the reset
        assert_eq!(traj.populations[100], p0);
        assert_ne!(traj.populations[99], p0);
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        use crate::kinetics::{template_7level, RateParameter};
        let template = template_7level(false);
        let ps = SevenLevelRates::reference().to_parameters();
        let profile = PowerProfile::new(
            vec![ProfileSegment::new(60.0, 13.6), ProfileSegment::new(30.0, 0.0), ProfileSegment::new(60.0, 13.6)],
            2.5,
        );
        let plan = StepPlan::new(&profile, 0.5, &PropagationOptions::default()).unwrap();
        let g = template.instantiate(&ps).unwrap();
        let thermal = thermal_state(&g).unwrap();
        let params = [RateParameter::SingletToZero, RateParameter::IscOne, RateParameter::PumpPerPower];
        let dparts: Vec<_> = params
            .iter()
            .map(|&p| GeneratorParts::derivative(&template, &ps, p).unwrap())
            .collect();
        let zeros = vec![DVector::zeros(7); params.len()];
        let (_, sens) = plan
            .run_with_sensitivity(&GeneratorParts::from_graph(&g), &dparts, &thermal, &zeros, &thermal)
            .unwrap();
        for (j, &p) in params.iter().enumerate() {
            let v = ps.get(p).unwrap();
            let h = 1e-5 * v;
            let run = |val: f64| {
                let mut q = ps.clone();
                q.set(p, val);
                let gq = template.instantiate(&q).unwrap();
                plan.run(&GeneratorParts::from_graph(&gq), &thermal, &thermal).unwrap()
            };
            let (up, dn) = (run(v + h), run(v - h));
            let scale = sens[j].iter().map(|s| s.amax()).fold(0.0, f64::max);
            assert!(scale > 0.0);
            for k in (0..up.len()).step_by(17) {
                let fd = (&up[k] - &dn[k]) / (2.0 * h);
                let diff = (&fd - &sens[j][k]).amax();
                assert!(diff <= 1e-6 * scale, "{p} sample {k}: {diff} vs scale {scale}");
            }
        }
    }
}
