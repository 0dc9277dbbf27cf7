use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{PLTrace, TraceMode};
use crate::error::{Error, Result};

/// Photon-counting model for a signal-averaged measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotNoise {
    /// Detected fraction of emitted photons, in (0, 1].
    pub collection_efficiency: f64,
    /// Total signal-averaging time in seconds.
    pub averaging_time_s: f64,
    /// Duration of one sequence repetition (ns).
    pub period_ns: f64,
    /// Number of identical emitters contributing to the signal.
    #[serde(default = "one")]
    pub emitter_count: f64,
}

fn one() -> f64 {
    1.0
}

impl ShotNoise {
    pub fn new(collection_efficiency: f64, averaging_time_s: f64, period_ns: f64) -> Self {
        ShotNoise {
            collection_efficiency,
            averaging_time_s,
            period_ns,
            emitter_count: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.collection_efficiency > 0.0 && self.collection_efficiency <= 1.0) {
            return Err(Error::validation(format!(
                "collection efficiency must be in (0, 1], got {}",
                self.collection_efficiency
            )));
        }
        if !(self.averaging_time_s > 0.0) || !self.averaging_time_s.is_finite() {
            return Err(Error::validation("averaging time must be > 0"));
        }
        if !(self.period_ns > 0.0) || !(self.emitter_count > 0.0) {
            return Err(Error::validation("sequence period and emitter count must be > 0"));
        }
        Ok(())
    }

    /// Sequence repetitions that fit in the averaging time.
    pub fn repetitions(&self) -> f64 {
        (self.averaging_time_s * 1e9 / self.period_ns).floor().max(1.0)
    }

    /// Expected counts per MHz of emission rate per ns of bin width.
    pub fn counts_per_rate_ns(&self) -> f64 {
        1e-3 * self.collection_efficiency * self.repetitions() * self.emitter_count
    }

    /// Poisson mean of every bin of a rate-mode trace.
    pub fn expected_counts(&self, trace: &PLTrace) -> Result<Vec<f64>> {
        self.validate()?;
        if trace.mode != TraceMode::Rate {
            return Err(Error::validation("shot noise needs a rate-mode trace"));
        }
        let c = self.counts_per_rate_ns();
        Ok((0..trace.len()).map(|i| trace.values[i] * trace.bin_width(i) * c).collect())
    }
}

/// Counts-mode copy of `trace` with every bin drawn from its Poisson law.
pub fn add_shot_noise(trace: &PLTrace, noise: &ShotNoise, seed: u64) -> Result<PLTrace> {
    let means = noise.expected_counts(trace)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(means.len());
    for m in means {
        if m <= 0.0 {
            values.push(0.0);
            continue;
        }
        let d = Poisson::new(m).map_err(|e| Error::numerical(format!("Poisson mean {m}: {e}")))?;
        values.push(d.sample(&mut rng).round());
    }
    let mut metadata = trace.metadata.clone();
    metadata.averaging_s = Some(noise.averaging_time_s);
    PLTrace::new(trace.bin_edges.clone(), values, TraceMode::Counts, metadata)
}
