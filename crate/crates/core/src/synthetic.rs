//! Synthetic measurement campaigns: pump-probe datasets for rate fits and
//! dark-time scans for lifetime fits, optionally with shot noise.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::inference::{fit_recovery, summarize, Dataset, EnsembleSummary, RecoveryFitResult};
use crate::kinetics::LevelGraph;
use crate::sequences::{
    build_pump_probe, build_recovery_scan, simulate_sequence, InitialCondition, PulseSequence, RecoveryScan,
    SimulationSettings,
};
use crate::signal::{
    add_shot_noise, recovery_curve, synthesize_trace, PLTrace, RecoveryCurve, RecoveryPair, ShotNoise,
    DEFAULT_BIN_WIDTH_NS, DEFAULT_PEAK_WINDOW_NS,
};

/// Detection settings independent of the sequence period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSettings {
    pub collection_efficiency: f64,
    pub averaging_time_s: f64,
    pub emitter_count: f64,
}

impl NoiseSettings {
    /// Detection for a sequence with the given period.
    pub fn for_period(&self, period_ns: f64) -> ShotNoise {
        ShotNoise {
            collection_efficiency: self.collection_efficiency,
            averaging_time_s: self.averaging_time_s,
            period_ns,
            emitter_count: self.emitter_count,
        }
    }

    /// Bright single flake: roughly 10⁵ counts per 0.5 ns bin at the PL
    /// peak after 15 minutes of pump-probe averaging at 100 µs waits.
    pub fn ensemble(averaging_time_s: f64) -> Self {
        NoiseSettings {
            collection_efficiency: 0.02,
            averaging_time_s,
            emitter_count: 2.0e5,
        }
    }

    /// Sub-micron flake for dark-time scans: a few hundred counts per 0.5 ns
    /// bin at the peak after 5 minutes of averaging.
    pub fn small_flake(averaging_time_s: f64) -> Self {
        NoiseSettings {
            collection_efficiency: 0.01,
            averaging_time_s,
            emitter_count: 100.0,
        }
    }
}

/// Independent trace seeds derived from one master seed.
struct SeedStream(ChaCha8Rng);

impl SeedStream {
    fn new(seed: u64) -> Self {
        SeedStream(ChaCha8Rng::seed_from_u64(seed))
    }

    fn take(&mut self, n: usize) -> Vec<u64> {
        (0..n).map(|_| self.0.next_u64()).collect()
    }
}

fn maybe_noisy(trace: &PLTrace, noise: Option<&NoiseSettings>, period_ns: f64, seed: u64) -> Result<PLTrace> {
    match noise {
        Some(n) => add_shot_noise(trace, &n.for_period(period_ns), seed),
        None => Ok(trace.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumpProbeScenario {
    pub pulse_ns: f64,
    pub dark_ns: f64,
    pub wait_ns: f64,
    pub powers_mw: Vec<f64>,
    pub bin_width_ns: f64,
    pub settings: SimulationSettings,
    pub noise: Option<NoiseSettings>,
}

impl PumpProbeScenario {
    /// 1 µs pulses, 100 ns dark time, 100 µs wait.
    pub fn standard(powers_mw: Vec<f64>, noise: Option<NoiseSettings>) -> Self {
        PumpProbeScenario {
            pulse_ns: 1000.0,
            dark_ns: 100.0,
            wait_ns: 100_000.0,
            powers_mw,
            bin_width_ns: DEFAULT_BIN_WIDTH_NS,
            settings: SimulationSettings::default(),
            noise,
        }
    }

    pub fn sequence(&self, power_mw: f64) -> Result<PulseSequence> {
        build_pump_probe(self.pulse_ns, self.dark_ns, self.wait_ns, power_mw, true)
    }
}

/// Five powers spanning 3.71–21.3 mW, roughly log-spaced.
pub const STANDARD_POWERS_MW: [f64; 5] = [3.71, 5.9, 9.4, 13.6, 21.3];

/// Two datasets per power: the first pulse (thermal start) and the second
/// (polarized start). Both traces of one power share an amplitude group.
pub fn pump_probe_datasets(
    graph: &LevelGraph,
    scenario: &PumpProbeScenario,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Dataset>> {
    let seeds = SeedStream::new(seed).take(2 * scenario.powers_mw.len());
    let per_power = exec.try_map(&scenario.powers_mw.iter().enumerate().collect::<Vec<_>>(), |&(k, &power)| {
        let seq = scenario.sequence(power)?;
        let traj = simulate_sequence(graph, &seq, &InitialCondition::Thermal, &scenario.settings)?;
        let full = synthesize_trace(&traj, graph, scenario.bin_width_ns)?;
        let windows = seq.pulse_windows();
        let mut out = Vec::with_capacity(2);
        for (pulse, (tag, (t0, t1))) in ["thermal", "polarized"].into_iter().zip(windows).enumerate() {
            let mut trace = full.window(t0, t1)?;
            trace.metadata.power_mw = Some(power);
            trace.metadata.pulse_index = Some(pulse);
            trace.metadata.sequence_id = Some("pump-probe".into());
            trace.metadata.initial_condition = Some(tag.into());
            let trace = maybe_noisy(&trace, scenario.noise.as_ref(), seq.period(), seeds[2 * k + pulse])?;
            out.push(Dataset {
                trace,
                sequence: seq.clone(),
                power_mw: power,
                initial: InitialCondition::Thermal,
                tag: tag.into(),
                amplitude_group: Some(format!("{power} mW")),
            });
        }
        Ok::<_, crate::Error>(out)
    })?;
    Ok(per_power.into_iter().flatten().collect())
}

/// First- and second-pulse traces for every dark time of a scan, simulated
/// from the thermal state.
pub fn recovery_pairs(
    graph: &LevelGraph,
    scan: &RecoveryScan,
    settings: &SimulationSettings,
    bin_width_ns: f64,
    noise: Option<&NoiseSettings>,
    seed: u64,
    exec: Execution,
) -> Result<Vec<RecoveryPair>> {
    let seqs = build_recovery_scan(scan)?;
    let seeds = SeedStream::new(seed).take(2 * seqs.len());
    let items: Vec<(usize, &PulseSequence)> = seqs.iter().enumerate().collect();
    exec.try_map(&items, |&(k, seq)| {
        let traj = simulate_sequence(graph, seq, &InitialCondition::Thermal, settings)?;
        let full = synthesize_trace(&traj, graph, bin_width_ns)?;
        let mut pair = RecoveryPair::from_sequence_trace(scan.dark_times_ns[k], &full, &seq.pulse_windows())?;
        for (pulse, t) in [&mut pair.first, &mut pair.second].into_iter().enumerate() {
            t.metadata.power_mw = Some(scan.power_mw);
            t.metadata.pulse_index = Some(pulse);
            t.metadata.sequence_id = Some(format!("recovery-td-{}", scan.dark_times_ns[k]));
            *t = maybe_noisy(t, noise, seq.period(), seeds[2 * k + pulse])?;
        }
        Ok(pair)
    })
}

/// Recovery curve of a scan with the default 50 ns peak window.
pub fn simulate_recovery_curve(
    graph: &LevelGraph,
    scan: &RecoveryScan,
    settings: &SimulationSettings,
    noise: Option<&NoiseSettings>,
    seed: u64,
    exec: Execution,
) -> Result<RecoveryCurve> {
    let pairs = recovery_pairs(graph, scan, settings, DEFAULT_BIN_WIDTH_NS, noise, seed, exec)?;
    recovery_curve(&pairs, DEFAULT_PEAK_WINDOW_NS)
}

/// Dark-time scans over a batch of flakes sharing one rate model. Each flake
/// gets its own noise realisation and a brightness drawn log-uniformly from
/// `[1/brightness_spread, brightness_spread]` times the nominal emitter count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlakeBatch {
    pub flakes: usize,
    pub scan: RecoveryScan,
    pub settings: SimulationSettings,
    pub noise: Option<NoiseSettings>,
    pub brightness_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlakeOutcome {
    pub flake: usize,
    pub seed: u64,
    pub brightness: f64,
    pub curve: RecoveryCurve,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<RecoveryFitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub flakes: Vec<FlakeOutcome>,
    /// Over the flakes whose fit succeeded.
    pub summary: EnsembleSummary,
    pub failed: usize,
}

pub fn recovery_batch(graph: &LevelGraph, batch: &FlakeBatch, seed: u64, exec: Execution) -> Result<BatchReport> {
    if batch.flakes == 0 {
        return Err(Error::validation("flake batch is empty"));
    }
    if !(batch.brightness_spread >= 1.0) || !batch.brightness_spread.is_finite() {
        return Err(Error::validation(format!(
            "brightness spread {} must be >= 1",
            batch.brightness_spread
        )));
    }
    batch.scan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln_spread = batch.brightness_spread.ln();
    let draws: Vec<(usize, u64, f64)> = (0..batch.flakes)
        .map(|i| {
            let s = rng.next_u64();
            let b = if ln_spread > 0.0 {
                rng.random_range(-ln_spread..ln_spread).exp()
            } else {
                1.0
            };
            (i, s, b)
        })
        .collect();
    let flakes = exec.try_map(&draws, |&(flake, seed, brightness)| {
        let noise = batch.noise.map(|n| NoiseSettings {
            emitter_count: n.emitter_count * brightness,
            ..n
        });
        let curve = simulate_recovery_curve(
            graph,
            &batch.scan,
            &batch.settings,
            noise.as_ref(),
            seed,
            Execution::Sequential,
        )?;
        let (fit, error) = match fit_recovery(&curve) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok::<_, Error>(FlakeOutcome {
            flake,
            seed,
            brightness,
            curve,
            fit,
            error,
        })
    })?;
    let taus: Vec<f64> = flakes.iter().filter_map(|f| f.fit.as_ref().map(|r| r.tau_s_ns)).collect();
    if taus.is_empty() {
        let first = flakes.iter().find_map(|f| f.error.clone()).unwrap_or_default();
        return Err(Error::DegenerateFit(format!("no flake produced a lifetime; first error: {first}")));
    }
    let failed = flakes.len() - taus.len();
    if failed > 0 {
        log::warn!("{failed} of {} flakes failed the recovery fit", flakes.len());
    }
    Ok(BatchReport {
        summary: summarize(&taus)?,
        flakes,
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{build_preset_7level, SevenLevelRates};

    #[test]
    fn pump_probe_has_two_traces_per_power() {
        let g = build_preset_7level(&SevenLevelRates::reference()).unwrap();
        let mut sc = PumpProbeScenario::standard(vec![5.0, 10.0], None);
        sc.pulse_ns = 200.0;
        let ds = pump_probe_datasets(&g, &sc, 1, Execution::Sequential).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds[0].trace.len(), 400);
        assert_eq!(ds[1].tag, "polarized");
        assert_eq!(ds[0].amplitude_group, ds[1].amplitude_group);
        // The polarized start sits mostly in the brighter m_s = 0 sublevel.
        let peak = |d: &Dataset| d.trace.values.iter().cloned().fold(0.0, f64::max);
        assert!(peak(&ds[1]) > peak(&ds[0]));
    }

    #[test]
    fn batch_is_deterministic_and_sized() {
        let g = build_preset_7level(&SevenLevelRates::reference()).unwrap();
        let batch = FlakeBatch {
            flakes: 3,
            scan: RecoveryScan::uniform(300.0, 13.6, 40.0, 6, 100.0),
            settings: SimulationSettings::default(),
            noise: Some(NoiseSettings::small_flake(300.0)),
            brightness_spread: 2.0,
        };
        let a = recovery_batch(&g, &batch, 5, Execution::Parallel).unwrap();
        let b = recovery_batch(&g, &batch, 5, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.flakes.len(), 3);
        assert!(a.flakes.iter().all(|f| (0.5..=2.0).contains(&f.brightness)));
        let empty = FlakeBatch { flakes: 0, ..batch };
        assert!(recovery_batch(&g, &empty, 5, Execution::Sequential).is_err());
    }
}
