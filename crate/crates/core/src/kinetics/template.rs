use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{LevelGraph, RateSpec, StateSpec};
use crate::error::{Error, Result};

/// Named model parameter. Serialized names match the config keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RateParameter {
    #[serde(rename = "k_p0")]
    PumpPerPower,
    #[serde(rename = "k_r")]
    Radiative,
    #[serde(rename = "gamma0")]
    IscZero,
    #[serde(rename = "gamma1")]
    IscOne,
    #[serde(rename = "kappa0")]
    SingletToZero,
    #[serde(rename = "kappa1")]
    SingletToOne,
    #[serde(rename = "T1")]
    SpinLattice,
    #[serde(rename = "k_di")]
    DarkConversion,
    #[serde(rename = "k_dr")]
    DarkRecombination,
    #[serde(rename = "k_p2_0")]
    AuxPumpPerPower,
    #[serde(rename = "k_i1_0")]
    PhotoconversionPerPower2,
    #[serde(rename = "k_i2_0")]
    PhotorecombinationPerPower,
    #[serde(rename = "k_r2")]
    AuxRadiative,
    #[serde(rename = "k_nr")]
    AuxNonRadiative,
    #[serde(rename = "band_factor")]
    AuxDetectionBand,
}

/// Physical dimension of a parameter value in canonical units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    /// MHz
    Rate,
    /// MHz/mW
    RatePerPower,
    /// MHz/mW²
    RatePerPower2,
    /// µs
    Microseconds,
    Dimensionless,
}

impl RateParameter {
    pub const ALL: [RateParameter; 15] = [
        RateParameter::PumpPerPower,
        RateParameter::Radiative,
        RateParameter::IscZero,
        RateParameter::IscOne,
        RateParameter::SingletToZero,
        RateParameter::SingletToOne,
        RateParameter::SpinLattice,
        RateParameter::DarkConversion,
        RateParameter::DarkRecombination,
        RateParameter::AuxPumpPerPower,
        RateParameter::PhotoconversionPerPower2,
        RateParameter::PhotorecombinationPerPower,
        RateParameter::AuxRadiative,
        RateParameter::AuxNonRadiative,
        RateParameter::AuxDetectionBand,
    ];

    pub fn key(self) -> &'static str {
        match self {
            RateParameter::PumpPerPower => "k_p0",
            RateParameter::Radiative => "k_r",
            RateParameter::IscZero => "gamma0",
            RateParameter::IscOne => "gamma1",
            RateParameter::SingletToZero => "kappa0",
            RateParameter::SingletToOne => "kappa1",
            RateParameter::SpinLattice => "T1",
            RateParameter::DarkConversion => "k_di",
            RateParameter::DarkRecombination => "k_dr",
            RateParameter::AuxPumpPerPower => "k_p2_0",
            RateParameter::PhotoconversionPerPower2 => "k_i1_0",
            RateParameter::PhotorecombinationPerPower => "k_i2_0",
            RateParameter::AuxRadiative => "k_r2",
            RateParameter::AuxNonRadiative => "k_nr",
            RateParameter::AuxDetectionBand => "band_factor",
        }
    }

    pub fn unit(self) -> UnitKind {
        match self {
            RateParameter::PumpPerPower
            | RateParameter::AuxPumpPerPower
            | RateParameter::PhotorecombinationPerPower => UnitKind::RatePerPower,
            RateParameter::PhotoconversionPerPower2 => UnitKind::RatePerPower2,
            RateParameter::SpinLattice => UnitKind::Microseconds,
            RateParameter::AuxDetectionBand => UnitKind::Dimensionless,
            _ => UnitKind::Rate,
        }
    }
}

impl fmt::Display for RateParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for RateParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RateParameter::ALL
            .iter()
            .copied()
            .find(|p| p.key() == s)
            .ok_or_else(|| Error::validation(format!("unknown model parameter '{s}'")))
    }
}

/// Parameter values in canonical units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterSet(BTreeMap<RateParameter, f64>);

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, p: RateParameter, value: f64) -> Self {
        self.0.insert(p, value);
        self
    }

    pub fn set(&mut self, p: RateParameter, value: f64) {
        self.0.insert(p, value);
    }

    pub fn get(&self, p: RateParameter) -> Option<f64> {
        self.0.get(&p).copied()
    }

    pub fn require(&self, p: RateParameter) -> Result<f64> {
        self.get(p)
            .ok_or_else(|| Error::validation(format!("parameter {p} is not set")))
    }

    pub fn remove(&mut self, p: RateParameter) -> Option<f64> {
        self.0.remove(&p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (RateParameter, f64)> + '_ {
        self.0.iter().map(|(k, v)| (*k, *v))
    }

    pub fn contains(&self, p: RateParameter) -> bool {
        self.0.contains_key(&p)
    }
}

/// Edge whose coefficient is `factor · value` or, when `reciprocal` is set,
/// `factor / value` of a single parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateEdge {
    pub from: String,
    pub to: String,
    pub power_exponent: u8,
    pub parameter: RateParameter,
    #[serde(default = "one")]
    pub factor: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub reciprocal: bool,
}

/// Emission weight `factor · Π parameters` on one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionTerm {
    pub state: String,
    #[serde(default = "one")]
    pub factor: f64,
    pub parameters: Vec<RateParameter>,
}

fn one() -> f64 {
    1.0
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Parameterised level graph. Wiring is data: alternate topologies can be
/// loaded from JSON and fitted with the same machinery as the presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTemplate {
    pub name: String,
    pub states: Vec<StateSpec>,
    pub edges: Vec<TemplateEdge>,
    pub emission: Vec<EmissionTerm>,
}

impl TemplateEdge {
    fn coefficient(&self, params: &ParameterSet) -> Result<f64> {
        let v = params.require(self.parameter)?;
        if self.reciprocal {
            if !(v > 0.0) {
                return Err(Error::validation(format!("{} must be > 0, got {v}", self.parameter)));
            }
            Ok(self.factor / v)
        } else {
            Ok(self.factor * v)
        }
    }

    fn derivative(&self, params: &ParameterSet, p: RateParameter) -> Result<f64> {
        if p != self.parameter {
            return Ok(0.0);
        }
        let v = params.require(self.parameter)?;
        Ok(if self.reciprocal {
            -self.factor / (v * v)
        } else {
            self.factor
        })
    }
}

impl EmissionTerm {
    fn weight(&self, params: &ParameterSet) -> Result<f64> {
        let mut w = self.factor;
        for &p in &self.parameters {
            w *= params.require(p)?;
        }
        Ok(w)
    }

    fn derivative(&self, params: &ParameterSet, p: RateParameter) -> Result<f64> {
        let mut total = 0.0;
        for (k, &q) in self.parameters.iter().enumerate() {
            if q != p {
                continue;
            }
            let mut w = self.factor;
            for (j, &r) in self.parameters.iter().enumerate() {
                if j != k {
                    w *= params.require(r)?;
                }
            }
            total += w;
        }
        Ok(total)
    }
}

impl ModelTemplate {
    /// Parameters referenced anywhere in the template.
    pub fn parameters(&self) -> Vec<RateParameter> {
        let mut ps: Vec<RateParameter> = self
            .edges
            .iter()
            .map(|e| e.parameter)
            .chain(self.emission.iter().flat_map(|t| t.parameters.iter().copied()))
            .collect();
        ps.sort();
        ps.dedup();
        ps
    }

    pub fn uses(&self, p: RateParameter) -> bool {
        self.parameters().contains(&p)
    }

    pub fn instantiate(&self, params: &ParameterSet) -> Result<LevelGraph> {
        for (p, v) in params.iter() {
            if self.uses(p) && !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("parameter {p} = {v} must be finite and >= 0")));
            }
        }
        let edges = self
            .edges
            .iter()
            .map(|e| {
                Ok(RateSpec::new(
                    e.from.clone(),
                    e.to.clone(),
                    e.coefficient(params)?,
                    e.power_exponent,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut weights = BTreeMap::new();
        for t in &self.emission {
            *weights.entry(t.state.clone()).or_insert(0.0) += t.weight(params)?;
        }
        LevelGraph::new(self.states.clone(), edges, weights)
    }

    /// Edge coefficient derivatives with respect to `p`, in template edge order.
    pub fn edge_derivatives(&self, params: &ParameterSet, p: RateParameter) -> Result<Vec<f64>> {
        self.edges.iter().map(|e| e.derivative(params, p)).collect()
    }

    /// Derivative of the emission-weight vector with respect to `p`.
    pub fn emission_derivative(&self, params: &ParameterSet, p: RateParameter) -> Result<nalgebra::DVector<f64>> {
        let mut d = nalgebra::DVector::zeros(self.states.len());
        for t in &self.emission {
            let i = self
                .states
                .iter()
                .position(|s| s.label == t.state)
                .ok_or_else(|| Error::validation(format!("emission on unknown state '{}'", t.state)))?;
            d[i] += t.derivative(params, p)?;
        }
        Ok(d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("template serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<model template>".into(),
            message: e.to_string(),
        })
    }
}
