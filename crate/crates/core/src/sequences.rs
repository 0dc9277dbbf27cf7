//! Measurement protocols as data.
//!
//! A [`PulseSequence`] is an ordered list of laser pulses, dark gaps, waits and
//! instantaneous thermal resets. It compiles to a [`PowerProfile`] for the
//! propagator. Thermal resets stand in for waiting many spin-lattice times.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{thermal_state, LevelGraph};
use crate::propagation::{
    check_initial, clamp_populations, PowerProfile, ProfileSegment, PropagationOptions, SegmentKind, StepPlan,
    Trajectory,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SequenceElement {
    Pulse { duration_ns: f64, power_mw: f64 },
    Dark { duration_ns: f64 },
    Wait { duration_ns: f64 },
    ResetThermal,
}

impl SequenceElement {
    pub fn duration(&self) -> f64 {
        match *self {
            SequenceElement::Pulse { duration_ns, .. }
            | SequenceElement::Dark { duration_ns }
            | SequenceElement::Wait { duration_ns } => duration_ns,
            SequenceElement::ResetThermal => 0.0,
        }
    }

    fn is_pulse(&self) -> bool {
        matches!(self, SequenceElement::Pulse { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub elements: Vec<SequenceElement>,
    #[serde(default = "one")]
    pub repeat_count: u32,
}

fn one() -> u32 {
    1
}

impl PulseSequence {
    pub fn new(elements: Vec<SequenceElement>) -> Result<Self> {
        let s = PulseSequence {
            elements,
            repeat_count: 1,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeat_count == 0 {
            return Err(Error::validation("repeat_count must be >= 1"));
        }
        if !self.elements.iter().any(|e| e.duration() > 0.0) {
            return Err(Error::validation("sequence has no timed elements"));
        }
        let n = self.elements.len();
        for (i, e) in self.elements.iter().enumerate() {
            match *e {
                SequenceElement::Pulse { duration_ns, power_mw } => {
                    if !(duration_ns > 0.0) || !duration_ns.is_finite() {
                        return Err(Error::validation(format!("element {i}: pulse duration {duration_ns} ns must be > 0")));
                    }
                    if !(power_mw > 0.0) || !power_mw.is_finite() {
                        return Err(Error::validation(format!("element {i}: pulse power {power_mw} mW must be > 0")));
                    }
                }
                SequenceElement::Dark { duration_ns } | SequenceElement::Wait { duration_ns } => {
                    if !(duration_ns > 0.0) || !duration_ns.is_finite() {
                        return Err(Error::validation(format!("element {i}: duration {duration_ns} ns must be > 0")));
                    }
                }
                SequenceElement::ResetThermal => {
                    // A reset stands in for a long laser-off interval, so it
                    // cannot sit inside continuous illumination.
                    let cyclic = self.repeat_count > 1;
                    let neighbour = |step: isize| -> Option<&SequenceElement> {
                        let mut j = i as isize;
                        loop {
                            j += step;
                            if j < 0 || j >= n as isize {
                                if !cyclic {
                                    return None;
                                }
                                j = j.rem_euclid(n as isize);
                            }
                            if j as usize == i {
                                return None;
                            }
                            let e = &self.elements[j as usize];
                            if !matches!(e, SequenceElement::ResetThermal) {
                                return Some(e);
                            }
                        }
                    };
                    let before = neighbour(-1).is_some_and(SequenceElement::is_pulse);
                    let after = neighbour(1).is_some_and(SequenceElement::is_pulse);
                    if before && after {
                        return Err(Error::validation(format!(
                            "element {i}: reset-thermal between two pulses (allowed only where a dark or wait could be)"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Duration of one repetition.
    pub fn period(&self) -> f64 {
        self.elements.iter().map(SequenceElement::duration).sum()
    }

    pub fn total_duration(&self) -> f64 {
        self.period() * self.repeat_count as f64
    }

    /// Copy with every pulse set to `power_mw`.
    pub fn with_power(&self, power_mw: f64) -> Self {
        let mut s = self.clone();
        for e in &mut s.elements {
            if let SequenceElement::Pulse { power_mw: p, .. } = e {
                *p = power_mw;
            }
        }
        s
    }

    /// Start and end time of every pulse across all repetitions. Adjacent
    /// pulse elements are reported separately.
    pub fn pulse_windows(&self) -> Vec<(f64, f64)> {
        let mut t = 0.0;
        let mut out = Vec::new();
        for _ in 0..self.repeat_count {
            for e in &self.elements {
                let d = e.duration();
                if e.is_pulse() {
                    out.push((t, t + d));
                }
                t += d;
            }
        }
        out
    }

    pub fn compile(&self, rise_time_ns: f64, fall_time_ns: Option<f64>) -> Result<PowerProfile> {
        self.compile_with_wait_cap(rise_time_ns, fall_time_ns, None)
    }

    /// Compile to a power profile. With `wait_cap`, a wait that is directly
    /// followed by a thermal reset is shortened to at most `wait_cap` ns, since
    /// the reset discards whatever happened during it.
    pub fn compile_with_wait_cap(
        &self,
        rise_time_ns: f64,
        fall_time_ns: Option<f64>,
        wait_cap: Option<f64>,
    ) -> Result<PowerProfile> {
        self.validate()?;
        let n = self.elements.len();
        let mut segments: Vec<ProfileSegment> = Vec::new();
        let mut pending_reset = false;
        let total_reps = self.repeat_count as usize;
        for rep in 0..total_reps {
            for (i, e) in self.elements.iter().enumerate() {
                let (duration, power, kind) = match *e {
                    SequenceElement::ResetThermal => {
                        pending_reset = true;
                        continue;
                    }
                    SequenceElement::Pulse { duration_ns, power_mw } => (duration_ns, power_mw, SegmentKind::Pulse),
                    SequenceElement::Dark { duration_ns } => (duration_ns, 0.0, SegmentKind::Dark),
                    SequenceElement::Wait { duration_ns } => {
                        let mut d = duration_ns;
                        if let Some(cap) = wait_cap {
                            let last = rep + 1 == total_reps && i + 1 == n;
                            let next_is_reset = if i + 1 < n {
                                matches!(self.elements[i + 1], SequenceElement::ResetThermal)
                            } else {
                                matches!(self.elements[0], SequenceElement::ResetThermal)
                            };
                            if next_is_reset || last {
                                d = d.min(cap);
                            }
                        }
                        (d, 0.0, SegmentKind::Wait)
                    }
                };
                segments.push(ProfileSegment {
                    duration_ns: duration,
                    target_power_mw: power,
                    kind,
                    reset_before: std::mem::take(&mut pending_reset),
                });
            }
        }
        let mut profile = PowerProfile::new(segments, rise_time_ns);
        profile.fall_time_ns = fall_time_ns;
        profile.reset_at_end = pending_reset;
        profile.validate()?;
        Ok(profile)
    }

    /// Rebuild a single-repetition sequence from a compiled profile.
    pub fn from_profile(profile: &PowerProfile) -> Result<Self> {
        let mut elements = Vec::with_capacity(profile.segments.len() + 2);
        for s in &profile.segments {
            if s.reset_before {
                elements.push(SequenceElement::ResetThermal);
            }
            elements.push(match s.kind {
                SegmentKind::Pulse => SequenceElement::Pulse {
                    duration_ns: s.duration_ns,
                    power_mw: s.target_power_mw,
                },
                SegmentKind::Dark => SequenceElement::Dark {
                    duration_ns: s.duration_ns,
                },
                SegmentKind::Wait => SequenceElement::Wait {
                    duration_ns: s.duration_ns,
                },
            });
        }
        if profile.reset_at_end {
            elements.push(SequenceElement::ResetThermal);
        }
        PulseSequence::new(elements)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sequence serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: PulseSequence = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<pulse sequence>".into(),
            message: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }
}

/// Dark-time scan of pulse pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScan {
    pub pulse_duration_ns: f64,
    pub power_mw: f64,
    pub dark_times_ns: Vec<f64>,
    pub inter_pair_wait_ns: f64,
}

impl RecoveryScan {
    /// `points` dark times evenly spaced over `[0, max_dark_ns]`.
    pub fn uniform(pulse_duration_ns: f64, power_mw: f64, max_dark_ns: f64, points: usize, inter_pair_wait_ns: f64) -> Self {
        let dark_times_ns = match points {
            0 => vec![],
            1 => vec![0.0],
            _ => (0..points)
                .map(|i| max_dark_ns * i as f64 / (points - 1) as f64)
                .collect(),
        };
        RecoveryScan {
            pulse_duration_ns,
            power_mw,
            dark_times_ns,
            inter_pair_wait_ns,
        }
    }

    /// 1 µs pulses, dark times 0–54.8 ns, 100 ns wait between pairs.
    pub fn default_protocol(power_mw: f64, points: usize) -> Self {
        RecoveryScan::uniform(1000.0, power_mw, 54.8, points, 100.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pulse_duration_ns > 0.0) || !(self.power_mw > 0.0) || !(self.inter_pair_wait_ns > 0.0) {
            return Err(Error::validation("recovery scan: pulse duration, power and wait must be > 0"));
        }
        for w in self.dark_times_ns.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::validation("recovery scan: dark times must be strictly increasing"));
            }
        }
        if self.dark_times_ns.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
            return Err(Error::validation("recovery scan: dark times must be >= 0"));
        }
        Ok(())
    }
}

/// One `[pulse, dark(t_D), pulse, wait]` sequence per dark time. A zero dark
/// time gives two back-to-back pulses.
pub fn build_recovery_scan(scan: &RecoveryScan) -> Result<Vec<PulseSequence>> {
    scan.validate()?;
    let pulse = SequenceElement::Pulse {
        duration_ns: scan.pulse_duration_ns,
        power_mw: scan.power_mw,
    };
    scan.dark_times_ns
        .iter()
        .map(|&t_d| {
            let mut el = vec![pulse.clone()];
            if t_d > 0.0 {
                el.push(SequenceElement::Dark { duration_ns: t_d });
            }
            el.push(pulse.clone());
            el.push(SequenceElement::Wait {
                duration_ns: scan.inter_pair_wait_ns,
            });
            PulseSequence::new(el)
        })
        .collect()
}

/// `[reset-thermal?, pulse, dark, pulse, wait]`.
pub fn build_pump_probe(pulse_ns: f64, dark_ns: f64, wait_ns: f64, power_mw: f64, reset: bool) -> Result<PulseSequence> {
    for (name, v) in [("pulse", pulse_ns), ("dark", dark_ns), ("wait", wait_ns), ("power", power_mw)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::validation(format!("pump-probe {name} must be > 0, got {v}")));
        }
    }
    let mut el = Vec::with_capacity(5);
    if reset {
        el.push(SequenceElement::ResetThermal);
    }
    el.push(SequenceElement::Pulse {
        duration_ns: pulse_ns,
        power_mw,
    });
    el.push(SequenceElement::Dark { duration_ns: dark_ns });
    el.push(SequenceElement::Pulse {
        duration_ns: pulse_ns,
        power_mw,
    });
    el.push(SequenceElement::Wait { duration_ns: wait_ns });
    PulseSequence::new(el)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialCondition {
    Thermal,
    SteadyState { power_mw: f64 },
    Populations { values: Vec<f64> },
}

impl InitialCondition {
    pub fn populations(&self, graph: &LevelGraph) -> Result<DVector<f64>> {
        match self {
            InitialCondition::Thermal => thermal_state(graph),
            InitialCondition::SteadyState { power_mw } => Ok(graph.steady_state(*power_mw)?.populations),
            InitialCondition::Populations { values } => {
                let p = DVector::from_column_slice(values);
                check_initial(&p, graph.len())?;
                Ok(p)
            }
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            InitialCondition::Thermal => "thermal",
            InitialCondition::SteadyState { .. } => "steady-state",
            InitialCondition::Populations { .. } => "explicit",
        }
    }
}

/// Time discretisation and laser response used when simulating a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationSettings {
    pub sample_dt_ns: f64,
    pub rise_time_ns: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fall_time_ns: Option<f64>,
    #[serde(default = "default_divisor")]
    pub substep_divisor: f64,
    /// Waits followed by a thermal reset are shortened to this length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait_cap_ns: Option<f64>,
}

fn default_divisor() -> f64 {
    5.0
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            sample_dt_ns: 0.5,
            rise_time_ns: 2.5,
            fall_time_ns: None,
            substep_divisor: 5.0,
            wait_cap_ns: Some(200.0),
        }
    }
}

impl SimulationSettings {
    pub fn propagation_options(&self) -> PropagationOptions {
        PropagationOptions {
            substep_divisor: self.substep_divisor,
            ..PropagationOptions::default()
        }
    }

    pub fn profile(&self, sequence: &PulseSequence) -> Result<PowerProfile> {
        sequence.compile_with_wait_cap(self.rise_time_ns, self.fall_time_ns, self.wait_cap_ns)
    }

    pub fn plan(&self, sequence: &PulseSequence) -> Result<StepPlan> {
        StepPlan::new(&self.profile(sequence)?, self.sample_dt_ns, &self.propagation_options())
    }
}

/// Simulate a sequence on a graph from the given initial condition.
pub fn simulate_sequence(
    graph: &LevelGraph,
    sequence: &PulseSequence,
    initial: &InitialCondition,
    settings: &SimulationSettings,
) -> Result<Trajectory> {
    let plan = settings.plan(sequence)?;
    let p0 = initial.populations(graph)?;
    let thermal = thermal_state(graph).unwrap_or_else(|_| p0.clone());
    let parts = crate::kinetics::GeneratorParts::from_graph(graph);
    let mut populations = plan.run(&parts, &p0, &thermal)?;
    clamp_populations(&mut populations);
    Ok(Trajectory {
        times: plan.sample_times().to_vec(),
        powers: plan.sample_powers(),
        populations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovery_scan_shapes() {
        let scan = RecoveryScan::default_protocol(13.6, 12);
        let seqs = build_recovery_scan(&scan).unwrap();
        assert_eq!(seqs.len(), 12);
        assert_eq!(seqs[0].elements.len(), 3);
        assert_eq!(seqs[11].elements.len(), 4);
        assert!((seqs[11].period() - (2000.0 + 54.8 + 100.0)).abs() < 1e-9);
        assert_eq!(scan.dark_times_ns[0], 0.0);
        assert!((scan.dark_times_ns[11] - 54.8).abs() < 1e-12);

        let empty = RecoveryScan::uniform(1000.0, 13.6, 54.8, 0, 100.0);
        assert!(build_recovery_scan(&empty).unwrap().is_empty());

        let bad = RecoveryScan {
            dark_times_ns: vec![0.0, 5.0, 5.0],
            ..scan
        };
        assert!(build_recovery_scan(&bad).is_err());
    }

    #[test]
    fn zero_dark_time_is_one_long_pulse() {
        let scan = RecoveryScan::uniform(1000.0, 13.6, 0.0, 1, 100.0);
        let seq = &build_recovery_scan(&scan).unwrap()[0];
        let profile = seq.compile(2.5, None).unwrap();
        let plan = StepPlan::new(&profile, 0.5, &PropagationOptions::default()).unwrap();
        let powers = plan.sample_powers();
        // sample at t = 1000 ns sits on the pulse boundary; power is continuous
        let i = 2000;
        assert!((powers[i] - 13.6).abs() < 1e-12);
        assert!((powers[i + 1] - 13.6).abs() < 1e-12);
        assert!((powers[i - 1] - 13.6).abs() < 1e-12);
    }

    #[test]
    fn pump_probe_layout() {
        let s = build_pump_probe(1000.0, 100.0, 100_000.0, 13.6, true).unwrap();
        assert_eq!(s.elements[0], SequenceElement::ResetThermal);
        assert_eq!(s.pulse_windows(), vec![(0.0, 1000.0), (1100.0, 2100.0)]);
        assert!((s.total_duration() - 102_100.0).abs() < 1e-9);
        let large_flake = build_pump_probe(1000.0, 5.0, 1000.0, 11.6, false).unwrap();
        assert_eq!(large_flake.elements.len(), 4);
        assert!(build_pump_probe(1000.0, 0.0, 10.0, 1.0, false).is_err());
    }

    #[test]
    fn reset_placement_rules() {
        let p = SequenceElement::Pulse {
            duration_ns: 10.0,
            power_mw: 1.0,
        };
        assert!(PulseSequence::new(vec![p.clone(), SequenceElement::ResetThermal, p.clone()]).is_err());
        assert!(PulseSequence::new(vec![
            p.clone(),
            SequenceElement::ResetThermal,
            SequenceElement::Dark { duration_ns: 5.0 },
            p.clone()
        ])
        .is_ok());
        let mut cyc = PulseSequence::new(vec![SequenceElement::ResetThermal, p.clone(), p.clone()]).unwrap();
        cyc.repeat_count = 2;
        assert!(cyc.validate().is_err());
    }

    #[test]
    fn wait_cap_only_applies_before_reset() {
        let s = build_pump_probe(1000.0, 100.0, 100_000.0, 13.6, true).unwrap();
        let full = s.compile(2.5, None).unwrap();
        let capped = s.compile_with_wait_cap(2.5, None, Some(200.0)).unwrap();
        assert_eq!(full.total_duration(), 102_100.0);
        assert_eq!(capped.total_duration(), 2300.0);
        assert!(capped.segments[0].reset_before);
        // dark time is never shortened
        assert_eq!(capped.segments[1].duration_ns, 100.0);
    }

    #[test]
    fn repeat_count_expands() {
        let mut s = build_pump_probe(100.0, 10.0, 50.0, 5.0, true).unwrap();
        s.repeat_count = 3;
        let prof = s.compile(0.0, None).unwrap();
        assert_eq!(prof.segments.len(), 12);
        assert!((prof.total_duration() - s.total_duration()).abs() < 1e-9);
        assert_eq!(prof.segments.iter().filter(|x| x.reset_before).count(), 3);
        assert_eq!(s.pulse_windows().len(), 6);
    }
}
