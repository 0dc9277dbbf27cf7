//! Power-dependent multi-level rate models.
//!
//! A [`LevelGraph`] is a concrete set of states and rate edges. Each edge
//! carries a coefficient and a laser-power exponent, so the generator at power
//! `P` is `Σ coefficient · P^exponent` over edges. The 7-level and 9-level
//! boron-vacancy models are built from parameterised [`ModelTemplate`]s, which
//! the fitting code also uses to get analytic parameter derivatives.
//!
//! Units are fixed throughout: time in ns, rates in MHz, power in mW.

mod generator;
mod presets;
mod template;

pub use generator::{
    analytic_singlet_lifetime, build_rate_matrix, steady_state, thermal_state, GeneratorParts,
    SteadyState,
};
pub use presets::{
    build_preset_7level, build_preset_9level, template_7level, template_9level, NineLevelRates,
    SevenLevelRates, LABEL_AUX_EXCITED, LABEL_AUX_GROUND, LABEL_SINGLET,
};
pub use template::{EmissionTerm, ModelTemplate, ParameterSet, RateParameter, TemplateEdge, UnitKind};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Manifold {
    TripletGround,
    TripletExcited,
    Singlet,
    AuxGround,
    AuxExcited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub label: String,
    pub manifold: Manifold,
    /// Spin projection m_s, when the state has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spin: Option<i8>,
}

impl StateSpec {
    pub fn new(label: impl Into<String>, manifold: Manifold, spin: Option<i8>) -> Self {
        StateSpec {
            label: label.into(),
            manifold,
            spin,
        }
    }
}

/// One rate edge. The coefficient is in MHz, MHz/mW or MHz/mW² for power
/// exponents 0, 1 and 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSpec {
    pub from: String,
    pub to: String,
    pub coefficient: f64,
    pub power_exponent: u8,
}

impl RateSpec {
    pub fn new(from: impl Into<String>, to: impl Into<String>, coefficient: f64, power_exponent: u8) -> Self {
        RateSpec {
            from: from.into(),
            to: to.into(),
            coefficient,
            power_exponent,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct RawLevelGraph {
    states: Vec<StateSpec>,
    edges: Vec<RateSpec>,
    #[serde(default)]
    emission_weights: BTreeMap<String, f64>,
}

/// Validated state graph with rate edges and detector emission weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLevelGraph")]
pub struct LevelGraph {
    states: Vec<StateSpec>,
    edges: Vec<RateSpec>,
    emission_weights: BTreeMap<String, f64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TryFrom<RawLevelGraph> for LevelGraph {
    type Error = Error;

    fn try_from(raw: RawLevelGraph) -> Result<Self> {
        LevelGraph::new(raw.states, raw.edges, raw.emission_weights)
    }
}

impl LevelGraph {
    pub fn new(
        states: Vec<StateSpec>,
        edges: Vec<RateSpec>,
        emission_weights: BTreeMap<String, f64>,
    ) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::validation("level graph has no states"));
        }
        let mut index = HashMap::with_capacity(states.len());
        for (i, s) in states.iter().enumerate() {
            if s.label.is_empty() {
                return Err(Error::validation("empty state label"));
            }
            if index.insert(s.label.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate state label '{}'", s.label)));
            }
            if let Some(m) = s.spin {
                if !(-1..=1).contains(&m) {
                    return Err(Error::validation(format!("state '{}' has spin {m} outside {{-1,0,+1}}", s.label)));
                }
            }
        }
        for e in &edges {
            for end in [&e.from, &e.to] {
                if !index.contains_key(end) {
                    return Err(Error::validation(format!("edge endpoint '{end}' is not a state")));
                }
            }
            if e.from == e.to {
                return Err(Error::validation(format!("self-loop edge on '{}'", e.from)));
            }
            if !(e.coefficient >= 0.0) || !e.coefficient.is_finite() {
                return Err(Error::validation(format!(
                    "edge {} -> {} has invalid coefficient {}",
                    e.from, e.to, e.coefficient
                )));
            }
            if e.power_exponent > 2 {
                return Err(Error::validation(format!(
                    "edge {} -> {} has power exponent {} (allowed 0, 1, 2)",
                    e.from, e.to, e.power_exponent
                )));
            }
        }
        for (label, &w) in &emission_weights {
            if !index.contains_key(label) {
                return Err(Error::validation(format!("emission weight for unknown state '{label}'")));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::validation(format!("emission weight for '{label}' is {w}")));
            }
        }
        Ok(LevelGraph {
            states,
            edges,
            emission_weights,
            index,
        })
    }

    pub fn states(&self) -> &[StateSpec] {
        &self.states
    }

    pub fn edges(&self) -> &[RateSpec] {
        &self.edges
    }

    pub fn emission_weights(&self) -> &BTreeMap<String, f64> {
        &self.emission_weights
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Emission weights as a dense vector in state order.
    pub fn emission_vector(&self) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_iterator(
            self.states.len(),
            self.states
                .iter()
                .map(|s| self.emission_weights.get(&s.label).copied().unwrap_or(0.0)),
        )
    }

    /// True when at least one state contributes to detected PL.
    pub fn has_detector(&self) -> bool {
        self.emission_weights.values().any(|&w| w > 0.0)
    }

    pub fn indices_in(&self, manifold: Manifold) -> Vec<usize> {
        self.states
            .iter()
            .enumerate()
            .filter(|(_, s)| s.manifold == manifold)
            .map(|(i, _)| i)
            .collect()
    }

    /// Total out-rate of a state at the given power.
    pub fn total_out_rate(&self, label: &str, power: f64) -> f64 {
        self.edges
            .iter()
            .filter(|e| e.from == label)
            .map(|e| e.coefficient * power.powi(e.power_exponent as i32))
            .sum()
    }

    /// Copy with every emission weight multiplied by `factor`.
    pub fn with_scaled_emission(&self, factor: f64) -> Result<Self> {
        let weights = self
            .emission_weights
            .iter()
            .map(|(k, v)| (k.clone(), v * factor))
            .collect();
        LevelGraph::new(self.states.clone(), self.edges.clone(), weights)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("level graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<level graph>".into(),
            message: e.to_string(),
        })
    }
}
