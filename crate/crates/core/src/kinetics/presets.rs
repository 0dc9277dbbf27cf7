//! 7-level and 9-level boron-vacancy rate models.

use serde::{Deserialize, Serialize};

use super::template::{EmissionTerm, ModelTemplate, ParameterSet, RateParameter, TemplateEdge};
use super::generator::analytic_singlet_lifetime;
use super::{LevelGraph, Manifold, StateSpec};
use crate::error::{Error, Result};

pub const LABEL_SINGLET: &str = "S";
pub const LABEL_AUX_GROUND: &str = "aux_g";
pub const LABEL_AUX_EXCITED: &str = "aux_e";

const SPINS: [(i8, &str); 3] = [(0, "0"), (1, "+1"), (-1, "-1")];

fn ground(suffix: &str) -> String {
    format!("g{suffix}")
}

fn excited(suffix: &str) -> String {
    format!("e{suffix}")
}

/// Rates of the 7-level model. `t1_us` adds symmetric ground-sublevel mixing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SevenLevelRates {
    /// MHz/mW
    pub k_p0: f64,
    pub k_r: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub kappa0: f64,
    pub kappa1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1_us: Option<f64>,
}

impl SevenLevelRates {
    /// Reference 7-level rates; k_r is the computed radiative rate, not a fit.
    pub fn reference() -> Self {
        SevenLevelRates {
            k_p0: 2.98,
            k_r: 0.091,
            gamma0: 7.8e2,
            gamma1: 1.90e3,
            kappa0: 37.0,
            kappa1: 3.4,
            t1_us: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("k_p0", self.k_p0),
            ("k_r", self.k_r),
            ("gamma0", self.gamma0),
            ("gamma1", self.gamma1),
            ("kappa0", self.kappa0),
            ("kappa1", self.kappa1),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if let Some(t1) = self.t1_us {
            if !(t1 > 0.0) || !t1.is_finite() {
                return Err(Error::validation(format!("T1 = {t1} us must be > 0")));
            }
        }
        Ok(())
    }

    pub fn to_parameters(&self) -> ParameterSet {
        let mut ps = ParameterSet::new()
            .with(RateParameter::PumpPerPower, self.k_p0)
            .with(RateParameter::Radiative, self.k_r)
            .with(RateParameter::IscZero, self.gamma0)
            .with(RateParameter::IscOne, self.gamma1)
            .with(RateParameter::SingletToZero, self.kappa0)
            .with(RateParameter::SingletToOne, self.kappa1);
        if let Some(t1) = self.t1_us {
            ps.set(RateParameter::SpinLattice, t1);
        }
        ps
    }

    /// Both singlet return rates scaled so that `1/(κ₀ + 2κ₁)` is `tau_s_ns`.
    pub fn with_singlet_lifetime(mut self, tau_s_ns: f64) -> Result<Self> {
        let current = analytic_singlet_lifetime(self.kappa0, self.kappa1)?;
        if !(tau_s_ns > 0.0) || !tau_s_ns.is_finite() {
            return Err(Error::validation(format!("singlet lifetime {tau_s_ns} ns must be > 0")));
        }
        let f = current / tau_s_ns;
        self.kappa0 *= f;
        self.kappa1 *= f;
        Ok(self)
    }

    pub fn from_parameters(ps: &ParameterSet) -> Result<Self> {
        Ok(SevenLevelRates {
            k_p0: ps.require(RateParameter::PumpPerPower)?,
            k_r: ps.require(RateParameter::Radiative)?,
            gamma0: ps.require(RateParameter::IscZero)?,
            gamma1: ps.require(RateParameter::IscOne)?,
            kappa0: ps.require(RateParameter::SingletToZero)?,
            kappa1: ps.require(RateParameter::SingletToOne)?,
            t1_us: ps.get(RateParameter::SpinLattice),
        })
    }
}

/// 7-level rates plus the auxiliary two-level manifold and its couplings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NineLevelRates {
    #[serde(flatten)]
    pub base: SevenLevelRates,
    pub k_di: f64,
    pub k_dr: f64,
    /// MHz/mW
    pub k_p2_0: f64,
    /// MHz/mW²
    pub k_i1_0: f64,
    /// MHz/mW
    pub k_i2_0: f64,
    pub k_r2: f64,
    pub k_nr: f64,
    /// Fraction of aux-excited emission inside the detection band, in [0, 1].
    #[serde(default)]
    pub band_factor: f64,
}

impl NineLevelRates {
    /// Reference 9-level rates.
    pub fn reference() -> Self {
        NineLevelRates {
            base: SevenLevelRates {
                k_p0: 5.4,
                k_r: 0.091,
                gamma0: 7.4e2,
                gamma1: 1.85e3,
                kappa0: 56.0,
                kappa1: 0.33,
                t1_us: None,
            },
            k_di: 0.0019,
            k_dr: 1.02,
            k_p2_0: 48.0,
            k_i1_0: 0.034,
            k_i2_0: 0.0029,
            k_r2: 0.0050,
            k_nr: 2.4e2,
            band_factor: 0.0,
        }
    }

    /// Same 7-level rates with every auxiliary coupling switched off.
    pub fn decoupled(base: SevenLevelRates) -> Self {
        NineLevelRates {
            base,
            k_di: 0.0,
            k_dr: 0.0,
            k_p2_0: 0.0,
            k_i1_0: 0.0,
            k_i2_0: 0.0,
            k_r2: 0.0,
            k_nr: 0.0,
            band_factor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let named = [
            ("k_di", self.k_di),
            ("k_dr", self.k_dr),
            ("k_p2_0", self.k_p2_0),
            ("k_i1_0", self.k_i1_0),
            ("k_i2_0", self.k_i2_0),
            ("k_r2", self.k_r2),
            ("k_nr", self.k_nr),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.band_factor) {
            return Err(Error::validation(format!(
                "band_factor = {} must lie in [0, 1]",
                self.band_factor
            )));
        }
        Ok(())
    }

    pub fn to_parameters(&self) -> ParameterSet {
        let mut ps = self.base.to_parameters();
        ps.set(RateParameter::DarkConversion, self.k_di);
        ps.set(RateParameter::DarkRecombination, self.k_dr);
        ps.set(RateParameter::AuxPumpPerPower, self.k_p2_0);
        ps.set(RateParameter::PhotoconversionPerPower2, self.k_i1_0);
        ps.set(RateParameter::PhotorecombinationPerPower, self.k_i2_0);
        ps.set(RateParameter::AuxRadiative, self.k_r2);
        ps.set(RateParameter::AuxNonRadiative, self.k_nr);
        ps.set(RateParameter::AuxDetectionBand, self.band_factor);
        ps
    }

    pub fn from_parameters(ps: &ParameterSet) -> Result<Self> {
        Ok(NineLevelRates {
            base: SevenLevelRates::from_parameters(ps)?,
            k_di: ps.require(RateParameter::DarkConversion)?,
            k_dr: ps.require(RateParameter::DarkRecombination)?,
            k_p2_0: ps.require(RateParameter::AuxPumpPerPower)?,
            k_i1_0: ps.require(RateParameter::PhotoconversionPerPower2)?,
            k_i2_0: ps.require(RateParameter::PhotorecombinationPerPower)?,
            k_r2: ps.require(RateParameter::AuxRadiative)?,
            k_nr: ps.require(RateParameter::AuxNonRadiative)?,
            band_factor: ps.get(RateParameter::AuxDetectionBand).unwrap_or(0.0),
        })
    }
}

fn edge(from: &str, to: &str, power_exponent: u8, parameter: RateParameter, factor: f64) -> TemplateEdge {
    TemplateEdge {
        from: from.to_string(),
        to: to.to_string(),
        power_exponent,
        parameter,
        factor,
        reciprocal: false,
    }
}

/// Template of the 7-level model; `with_t1` adds ground-sublevel mixing edges
/// at rate 1/(3·T1) between every ground pair, in both directions.
pub fn template_7level(with_t1: bool) -> ModelTemplate {
    use RateParameter::*;

    let mut states = Vec::with_capacity(7);
    for (m, s) in SPINS {
        states.push(StateSpec::new(ground(s), Manifold::TripletGround, Some(m)));
    }
    for (m, s) in SPINS {
        states.push(StateSpec::new(excited(s), Manifold::TripletExcited, Some(m)));
    }
    states.push(StateSpec::new(LABEL_SINGLET, Manifold::Singlet, None));

    let mut edges = Vec::new();
    let mut emission = Vec::new();
    for (m, s) in SPINS {
        let (g, e) = (ground(s), excited(s));
        edges.push(edge(&g, &e, 1, PumpPerPower, 1.0));
        edges.push(edge(&e, &g, 0, Radiative, 1.0));
        let isc = if m == 0 { IscZero } else { IscOne };
        edges.push(edge(&e, LABEL_SINGLET, 0, isc, 1.0));
        let back = if m == 0 { SingletToZero } else { SingletToOne };
        edges.push(edge(LABEL_SINGLET, &g, 0, back, 1.0));
        emission.push(EmissionTerm {
            state: e,
            factor: 1.0,
            parameters: vec![Radiative],
        });
    }
    if with_t1 {
        for (i, (_, a)) in SPINS.iter().enumerate() {
            for (j, (_, b)) in SPINS.iter().enumerate() {
                if i != j {
                    edges.push(TemplateEdge {
                        from: ground(a),
                        to: ground(b),
                        power_exponent: 0,
                        parameter: SpinLattice,
                        // T1 is in µs, rates in MHz.
                        factor: 1.0 / 3.0,
                        reciprocal: true,
                    });
                }
            }
        }
    }
    ModelTemplate {
        name: "7level".into(),
        states,
        edges,
        emission,
    }
}

/// Template of the 9-level model with the default auxiliary wiring:
/// photoconversion leaves every excited triplet, dark conversion leaves the
/// singlet, and both recombination paths return to the three ground sublevels
/// in equal thirds.
pub fn template_9level(with_t1: bool) -> ModelTemplate {
    use RateParameter::*;

    let mut t = template_7level(with_t1);
    t.name = "9level".into();
    t.states.push(StateSpec::new(LABEL_AUX_GROUND, Manifold::AuxGround, None));
    t.states.push(StateSpec::new(LABEL_AUX_EXCITED, Manifold::AuxExcited, None));

    t.edges.push(edge(LABEL_AUX_GROUND, LABEL_AUX_EXCITED, 1, AuxPumpPerPower, 1.0));
    t.edges.push(edge(LABEL_AUX_EXCITED, LABEL_AUX_GROUND, 0, AuxRadiative, 1.0));
    t.edges.push(edge(LABEL_AUX_EXCITED, LABEL_AUX_GROUND, 0, AuxNonRadiative, 1.0));
    t.edges.push(edge(LABEL_SINGLET, LABEL_AUX_GROUND, 0, DarkConversion, 1.0));
    for (_, s) in SPINS {
        let (g, e) = (ground(s), excited(s));
        t.edges.push(edge(&e, LABEL_AUX_GROUND, 2, PhotoconversionPerPower2, 1.0));
        t.edges.push(edge(LABEL_AUX_EXCITED, &g, 1, PhotorecombinationPerPower, 1.0 / 3.0));
        t.edges.push(edge(LABEL_AUX_GROUND, &g, 0, DarkRecombination, 1.0 / 3.0));
    }
    t.emission.push(EmissionTerm {
        state: LABEL_AUX_EXCITED.into(),
        factor: 1.0,
        parameters: vec![AuxDetectionBand, AuxRadiative],
    });
    t
}

pub fn build_preset_7level(rates: &SevenLevelRates) -> Result<LevelGraph> {
    rates.validate()?;
    template_7level(rates.t1_us.is_some()).instantiate(&rates.to_parameters())
}

pub fn build_preset_9level(rates: &NineLevelRates) -> Result<LevelGraph> {
    rates.validate()?;
    template_9level(rates.base.t1_us.is_some()).instantiate(&rates.to_parameters())
}
