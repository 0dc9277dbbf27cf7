//! Run configuration: TOML file, `--set` overrides and command-line flags,
//! resolved into canonical units with line-anchored validation errors.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vbphys::inference::JacobianMode;
use vbphys::kinetics::{
    build_preset_7level, build_preset_9level, template_7level, template_9level, LevelGraph, ModelTemplate,
    NineLevelRates, ParameterSet, RateParameter, SevenLevelRates,
};
use vbphys::sequences::{build_pump_probe, PulseSequence, RecoveryScan, SimulationSettings};
use vbphys::synthetic::NoiseSettings;

use crate::error::CliError;
use crate::units::{parse_quantity, Dimension};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    pub preset: Option<String>,
    /// Level graph JSON; simulation only.
    pub file: Option<String>,
    #[serde(default)]
    pub rates: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawProtocol {
    pub kind: Option<String>,
    pub pulse: Option<String>,
    pub dark: Option<String>,
    pub wait: Option<String>,
    pub reset: Option<bool>,
    pub max_dark: Option<String>,
    pub points: Option<usize>,
    pub dark_times: Option<Vec<String>>,
    pub file: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSimulation {
    pub sample_dt: Option<String>,
    pub rise_time: Option<String>,
    pub fall_time: Option<String>,
    pub bin_width: Option<String>,
    /// Length that waits before a thermal reset are cut to, or `"none"`.
    pub wait_cap: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawNoise {
    pub enabled: Option<bool>,
    pub efficiency: Option<f64>,
    pub averaging: Option<String>,
    pub emitters: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecovery {
    pub flakes: Option<usize>,
    /// Rescale the singlet return rates to this lifetime.
    pub lifetime: Option<String>,
    pub brightness_spread: Option<f64>,
    /// TOML file of `[[pair]]` entries for ingested traces.
    pub pairs: Option<String>,
    pub peak_window: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFit {
    pub manifest: Option<String>,
    pub free: Option<Vec<String>>,
    pub bounds_factor: Option<f64>,
    pub starts: Option<usize>,
    pub seed: Option<u64>,
    pub jacobian: Option<String>,
    pub background: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    #[serde(default)]
    pub model: RawModel,
    #[serde(default)]
    pub protocol: RawProtocol,
    pub powers: Option<Vec<String>>,
    #[serde(default)]
    pub simulation: RawSimulation,
    pub noise: Option<RawNoise>,
    #[serde(default)]
    pub recovery: RawRecovery,
    #[serde(default)]
    pub fit: RawFit,
    pub output: Option<String>,
}

/// Where config values came from, for error messages.
#[derive(Debug, Clone, Default)]
pub struct SourceMap {
    file: Option<PathBuf>,
    lines: HashMap<String, usize>,
    /// Paths set on the command line, with the flag that set them.
    overridden: Vec<(String, String)>,
}

impl SourceMap {
    /// Line of every `key = value` and `[table]`, keyed by dotted path.
    /// Arrays of tables are keyed `name[i]`.
    pub fn scan(file: &Path, text: &str) -> Self {
        let mut lines = HashMap::new();
        let mut prefix = String::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(name) = line.strip_prefix("[[").and_then(|l| l.split("]]").next()) {
                let name = name.trim().to_string();
                let k = counts.entry(name.clone()).or_insert(0);
                prefix = format!("{name}[{k}]");
                *k += 1;
                lines.insert(prefix.clone(), i + 1);
            } else if let Some(name) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
                prefix = name.trim().to_string();
                lines.insert(prefix.clone(), i + 1);
            } else if let Some((key, _)) = line.split_once('=') {
                let key = key.trim().trim_matches('"');
                if !key.is_empty() && !key.starts_with('#') {
                    let path = if prefix.is_empty() {
                        key.to_string()
                    } else {
                        format!("{prefix}.{key}")
                    };
                    lines.insert(path, i + 1);
                }
            }
        }
        SourceMap {
            file: Some(file.to_path_buf()),
            lines,
            overridden: Vec::new(),
        }
    }

    /// `file:line: path` for a value, or the flag that set it.
    pub fn locate(&self, path: &str) -> String {
        if let Some((_, flag)) = self
            .overridden
            .iter()
            .rev()
            .find(|(o, _)| path == o || path.starts_with(&format!("{o}.")))
        {
            return flag.clone();
        }
        let file = self.file.as_ref().map(|f| f.display().to_string());
        // Fall back to the nearest enclosing key that has a line.
        let mut probe = path;
        loop {
            if let (Some(f), Some(line)) = (&file, self.lines.get(probe)) {
                return format!("{f}:{line}: {path}");
            }
            match probe.rfind(['.', '[']) {
                Some(i) => probe = &probe[..i],
                None => break,
            }
        }
        match file {
            Some(f) => format!("{f}: {path}"),
            None => path.to_string(),
        }
    }

    pub fn mark(&mut self, path: &str, flag: &str) {
        self.overridden.push((path.to_string(), flag.to_string()));
    }

    pub fn error(&self, path: &str, message: impl std::fmt::Display) -> CliError {
        CliError::config(format!("{}: {message}", self.locate(path)))
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parse a config file, reporting TOML and schema errors with their line.
pub fn parse_file(path: &Path) -> Result<(toml::Table, SourceMap), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    let anchored = |e: toml::de::Error| {
        let at = e.span().map(|s| format!(":{}", line_of(&text, s.start))).unwrap_or_default();
        CliError::config(format!("{}{at}: {}", path.display(), e.message().trim()))
    };
    toml::from_str::<RawConfig>(&text).map_err(anchored)?;
    let table: toml::Table = toml::from_str(&text).map_err(anchored)?;
    Ok((table, SourceMap::scan(path, &text)))
}

/// Apply `key.path=value`; the value is read as TOML and falls back to a string.
pub fn apply_set(table: &mut toml::Table, map: &mut SourceMap, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set {assignment}: expected key=value")))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("--set {key}: empty key segment")));
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("--set {key}: '{part}' is not a table")))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    map.mark(key, &format!("--set {key}"));
    Ok(())
}

pub fn into_raw(table: toml::Table, map: &SourceMap) -> Result<RawConfig, CliError> {
    table.try_into().map_err(|e: toml::de::Error| {
        let origin = if map.overridden.is_empty() {
            "config".to_string()
        } else {
            let flags: Vec<&str> = map.overridden.iter().map(|(_, f)| f.as_str()).collect();
            format!("config with {}", flags.join(", "))
        };
        CliError::config(format!("{origin}: {}", e.message().trim()))
    })
}

/// Command-line flags that shadow config keys.
#[derive(Debug, Clone, Default)]
pub struct Flags {
    pub preset: Option<String>,
    pub powers: Option<Vec<String>>,
    pub seed: Option<u64>,
}

/// Apply flags over the file. A bare `--power` number is taken as mW, and
/// `--seed` feeds both the noise and the multi-start draws without turning
/// noise on.
pub fn apply_flags(raw: &mut RawConfig, map: &mut SourceMap, flags: &Flags) {
    if let Some(p) = &flags.preset {
        raw.model.preset = Some(p.clone());
        map.mark("model.preset", "--preset");
    }
    if let Some(list) = &flags.powers {
        raw.powers = Some(
            list.iter()
                .map(|p| p.trim())
                .filter(|p| !p.is_empty())
                .map(|p| match p.parse::<f64>() {
                    Ok(_) => format!("{p} mW"),
                    Err(_) => p.to_string(),
                })
                .collect(),
        );
        map.mark("powers", "--power");
    }
    if let Some(seed) = flags.seed {
        if let Some(n) = raw.noise.as_mut() {
            n.seed = Some(seed);
            map.mark("noise.seed", "--seed");
        }
        raw.fit.seed = Some(seed);
        map.mark("fit.seed", "--seed");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "7level")]
    Seven,
    #[serde(rename = "9level")]
    Nine,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "7level" => Some(Preset::Seven),
            "9level" => Some(Preset::Nine),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Seven => "7level",
            Preset::Nine => "9level",
        }
    }

    pub fn defaults(self) -> ParameterSet {
        match self {
            Preset::Seven => SevenLevelRates::reference().to_parameters(),
            Preset::Nine => NineLevelRates::reference().to_parameters(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Model {
    pub preset: Option<Preset>,
    pub parameters: Option<ParameterSet>,
    pub graph: LevelGraph,
    #[serde(skip)]
    pub template: Option<ModelTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Protocol {
    PumpProbe {
        pulse_ns: f64,
        dark_ns: f64,
        wait_ns: f64,
        reset: bool,
    },
    Recovery {
        pulse_ns: f64,
        dark_times_ns: Vec<f64>,
        wait_ns: f64,
    },
    File {
        sequence: PulseSequence,
    },
}

impl Protocol {
    pub fn sequence(&self, power_mw: f64) -> vbphys::Result<PulseSequence> {
        match self {
            Protocol::PumpProbe {
                pulse_ns,
                dark_ns,
                wait_ns,
                reset,
            } => build_pump_probe(*pulse_ns, *dark_ns, *wait_ns, power_mw, *reset),
            Protocol::File { sequence } => Ok(sequence.with_power(power_mw)),
            Protocol::Recovery { .. } => Err(vbphys::Error::Validation(
                "a recovery protocol expands to one sequence per dark time".into(),
            )),
        }
    }

    pub fn scan(&self, power_mw: f64) -> Option<RecoveryScan> {
        match self {
            Protocol::Recovery {
                pulse_ns,
                dark_times_ns,
                wait_ns,
            } => Some(RecoveryScan {
                pulse_duration_ns: *pulse_ns,
                power_mw,
                dark_times_ns: dark_times_ns.clone(),
                inter_pair_wait_ns: *wait_ns,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Noise {
    pub settings: NoiseSettings,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoverySpec {
    pub flakes: usize,
    pub lifetime_ns: Option<f64>,
    pub brightness_spread: f64,
    pub pairs: Option<PathBuf>,
    pub peak_window_ns: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSpec {
    pub manifest: Option<PathBuf>,
    pub free: Vec<RateParameter>,
    pub bounds_factor: f64,
    pub starts: usize,
    pub seed: u64,
    pub jacobian: JacobianMode,
    pub background: bool,
}

/// Fully resolved settings in canonical units.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub model: Model,
    pub protocol: Protocol,
    pub powers_mw: Vec<f64>,
    pub simulation: SimulationSettings,
    pub bin_width_ns: f64,
    pub noise: Option<Noise>,
    pub recovery: RecoverySpec,
    pub fit: FitSpec,
    #[serde(skip)]
    pub output: PathBuf,
}

impl RunConfig {
    /// SHA-256 of the resolved settings; output location and job count are
    /// excluded since they do not change results.
    pub fn settings_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub const DEFAULT_FREE: [RateParameter; 5] = [
    RateParameter::PumpPerPower,
    RateParameter::IscZero,
    RateParameter::IscOne,
    RateParameter::SingletToZero,
    RateParameter::SingletToOne,
];

struct Resolver<'a> {
    map: &'a SourceMap,
    base: PathBuf,
}

impl Resolver<'_> {
    fn quantity(&self, path: &str, text: Option<&String>, dim: Dimension, default: f64) -> Result<f64, CliError> {
        match text {
            Some(t) => parse_quantity(t, dim).map_err(|e| self.map.error(path, e)),
            None => Ok(default),
        }
    }

    fn positive(&self, path: &str, text: Option<&String>, dim: Dimension, default: f64) -> Result<f64, CliError> {
        let v = self.quantity(path, text, dim, default)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.map.error(path, format!("must be > 0, got {v} {}", dim.canonical())))
        }
    }

    fn path(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn existing(&self, path: &str, p: &str) -> Result<PathBuf, CliError> {
        let full = self.path(p);
        if full.exists() {
            Ok(full)
        } else {
            Err(self.map.error(path, format!("file {} does not exist", full.display())))
        }
    }
}

fn resolve_model(r: &Resolver, raw: &RawModel) -> Result<Model, CliError> {
    if raw.file.is_some() && raw.preset.is_some() {
        return Err(r.map.error("model", "set either model.preset or model.file, not both"));
    }
    if let Some(file) = &raw.file {
        if !raw.rates.is_empty() {
            return Err(r.map.error("model.rates", "rate overrides need a preset model"));
        }
        let path = r.existing("model.file", file)?;
        let text = std::fs::read_to_string(&path).map_err(|e| r.map.error("model.file", e))?;
        let graph = LevelGraph::from_json(&text).map_err(|e| r.map.error("model.file", e))?;
        return Ok(Model {
            preset: None,
            parameters: None,
            graph,
            template: None,
        });
    }
    let name = raw.preset.as_deref().unwrap_or("7level");
    let preset = Preset::parse(name)
        .ok_or_else(|| r.map.error("model.preset", format!("unknown preset '{name}' (7level or 9level)")))?;
    let mut params = preset.defaults();
    for (key, text) in &raw.rates {
        let path = format!("model.rates.{key}");
        let p: RateParameter = key.parse().map_err(|e| r.map.error(&path, e))?;
        let v = parse_quantity(text, Dimension::for_parameter(p.unit())).map_err(|e| r.map.error(&path, e))?;
        params.set(p, v);
    }
    let with_t1 = params.contains(RateParameter::SpinLattice);
    let template = match preset {
        Preset::Seven => template_7level(with_t1),
        Preset::Nine => template_9level(with_t1),
    };
    let graph = match preset {
        Preset::Seven => SevenLevelRates::from_parameters(&params).and_then(|x| build_preset_7level(&x)),
        Preset::Nine => NineLevelRates::from_parameters(&params).and_then(|x| build_preset_9level(&x)),
    }
    .map_err(|e| r.map.error("model.rates", e))?;
    for p in params.iter().map(|(p, _)| p).collect::<Vec<_>>() {
        if !template.uses(p) {
            return Err(r.map.error(&format!("model.rates.{p}"), format!("not a parameter of the {name} model")));
        }
    }
    Ok(Model {
        preset: Some(preset),
        parameters: Some(params),
        graph,
        template: Some(template),
    })
}

fn resolve_protocol(r: &Resolver, raw: &RawProtocol, prefix: &str, default_kind: &str) -> Result<Protocol, CliError> {
    let at = |k: &str| format!("{prefix}.{k}");
    let kind = raw.kind.as_deref().unwrap_or(default_kind);
    let proto = match kind {
        "pump-probe" => Protocol::PumpProbe {
            pulse_ns: r.positive(&at("pulse"), raw.pulse.as_ref(), Dimension::Time, 1000.0)?,
            dark_ns: r.positive(&at("dark"), raw.dark.as_ref(), Dimension::Time, 100.0)?,
            wait_ns: r.positive(&at("wait"), raw.wait.as_ref(), Dimension::Time, 100_000.0)?,
            reset: raw.reset.unwrap_or(true),
        },
        "recovery" => {
            let pulse_ns = r.positive(&at("pulse"), raw.pulse.as_ref(), Dimension::Time, 1000.0)?;
            let wait_ns = r.positive(&at("wait"), raw.wait.as_ref(), Dimension::Time, 100.0)?;
            let dark_times_ns = match &raw.dark_times {
                Some(list) => list
                    .iter()
                    .map(|t| parse_quantity(t, Dimension::Time).map_err(|e| r.map.error(&at("dark_times"), e)))
                    .collect::<Result<Vec<_>, _>>()?,
                None => {
                    let max = r.positive(&at("max_dark"), raw.max_dark.as_ref(), Dimension::Time, 54.8)?;
                    let n = raw.points.unwrap_or(12);
                    if n == 0 {
                        return Err(r.map.error(&at("points"), "must be >= 1"));
                    }
                    RecoveryScan::uniform(pulse_ns, 1.0, max, n, wait_ns).dark_times_ns
                }
            };
            let proto = Protocol::Recovery {
                pulse_ns,
                dark_times_ns,
                wait_ns,
            };
            proto.scan(1.0).unwrap().validate().map_err(|e| r.map.error(&at("dark_times"), e))?;
            proto
        }
        "file" => {
            let file = raw
                .file
                .as_ref()
                .ok_or_else(|| r.map.error(&at("file"), "protocol kind 'file' needs a sequence file"))?;
            let path = r.existing(&at("file"), file)?;
            let text = std::fs::read_to_string(&path).map_err(|e| r.map.error(&at("file"), e))?;
            let sequence = PulseSequence::from_json(&text).map_err(|e| r.map.error(&at("file"), e))?;
            Protocol::File { sequence }
        }
        other => {
            return Err(r.map.error(
                &at("kind"),
                format!("unknown protocol '{other}' (pump-probe, recovery or file)"),
            ))
        }
    };
    if let Protocol::PumpProbe { .. } = proto {
        proto.sequence(1.0).map_err(|e| r.map.error(prefix, e))?;
    }
    Ok(proto)
}

/// Resolve a raw config. `base` anchors relative paths and `default_kind` is
/// the protocol used when the config names none.
pub fn resolve(raw: &RawConfig, map: &SourceMap, base: &Path, default_kind: &str) -> Result<RunConfig, CliError> {
    let r = Resolver {
        map,
        base: base.to_path_buf(),
    };
    let model = resolve_model(&r, &raw.model)?;
    let protocol = resolve_protocol(&r, &raw.protocol, "protocol", default_kind)?;

    let powers_mw = match &raw.powers {
        Some(list) => {
            if list.is_empty() {
                return Err(map.error("powers", "powers list is empty"));
            }
            list.iter()
                .map(|p| {
                    let v = parse_quantity(p, Dimension::Power).map_err(|e| map.error("powers", e))?;
                    if v > 0.0 {
                        Ok(v)
                    } else {
                        Err(map.error("powers", format!("power {p} must be > 0")))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        None => vec![13.6],
    };

    let s = &raw.simulation;
    let defaults = SimulationSettings::default();
    let wait_cap_ns = match s.wait_cap.as_deref() {
        Some("none") => None,
        Some(t) => Some(r.positive("simulation.wait_cap", Some(&t.to_string()), Dimension::Time, 0.0)?),
        None => defaults.wait_cap_ns,
    };
    let rise = r.quantity("simulation.rise_time", s.rise_time.as_ref(), Dimension::Time, defaults.rise_time_ns)?;
    if rise < 0.0 {
        return Err(map.error("simulation.rise_time", "must be >= 0"));
    }
    let fall = match &s.fall_time {
        Some(t) => {
            let v = r.quantity("simulation.fall_time", Some(t), Dimension::Time, 0.0)?;
            if v < 0.0 {
                return Err(map.error("simulation.fall_time", "must be >= 0"));
            }
            Some(v)
        }
        None => None,
    };
    let simulation = SimulationSettings {
        sample_dt_ns: r.positive("simulation.sample_dt", s.sample_dt.as_ref(), Dimension::Time, defaults.sample_dt_ns)?,
        rise_time_ns: rise,
        fall_time_ns: fall,
        substep_divisor: defaults.substep_divisor,
        wait_cap_ns,
    };
    let bin_width_ns = r.positive(
        "simulation.bin_width",
        s.bin_width.as_ref(),
        Dimension::Time,
        vbphys::signal::DEFAULT_BIN_WIDTH_NS,
    )?;

    let noise = match &raw.noise {
        Some(n) if n.enabled.unwrap_or(true) => {
            let base = NoiseSettings::ensemble(900.0);
            let averaging_ns = r.positive("noise.averaging", n.averaging.as_ref(), Dimension::Time, 900e9)?;
            let settings = NoiseSettings {
                collection_efficiency: n.efficiency.unwrap_or(base.collection_efficiency),
                averaging_time_s: averaging_ns * 1e-9,
                emitter_count: n.emitters.unwrap_or(base.emitter_count),
            };
            if !(settings.collection_efficiency > 0.0 && settings.collection_efficiency <= 1.0) {
                return Err(map.error("noise.efficiency", "must lie in (0, 1]"));
            }
            if !(settings.emitter_count > 0.0) || !settings.emitter_count.is_finite() {
                return Err(map.error("noise.emitters", "must be > 0"));
            }
            let seed = n
                .seed
                .ok_or_else(|| map.error("noise", "noise is enabled but no seed is set (noise.seed or --seed)"))?;
            Some(Noise { settings, seed })
        }
        _ => None,
    };

    let rc = &raw.recovery;
    let recovery = RecoverySpec {
        flakes: rc.flakes.unwrap_or(1),
        lifetime_ns: match &rc.lifetime {
            Some(t) => Some(r.positive("recovery.lifetime", Some(t), Dimension::Time, 0.0)?),
            None => None,
        },
        brightness_spread: rc.brightness_spread.unwrap_or(1.0),
        pairs: match &rc.pairs {
            Some(p) => Some(r.existing("recovery.pairs", p)?),
            None => None,
        },
        peak_window_ns: r.positive(
            "recovery.peak_window",
            rc.peak_window.as_ref(),
            Dimension::Time,
            vbphys::signal::DEFAULT_PEAK_WINDOW_NS,
        )?,
    };
    if recovery.flakes == 0 {
        return Err(map.error("recovery.flakes", "must be >= 1"));
    }
    if !(recovery.brightness_spread >= 1.0) {
        return Err(map.error("recovery.brightness_spread", "must be >= 1"));
    }

    let f = &raw.fit;
    let free = match &f.free {
        Some(list) => list
            .iter()
            .map(|k| k.parse::<RateParameter>().map_err(|e| map.error("fit.free", e)))
            .collect::<Result<Vec<_>, _>>()?,
        None => DEFAULT_FREE.to_vec(),
    };
    if let Some(t) = &model.template {
        if let Some(p) = free.iter().find(|p| !t.uses(**p)) {
            return Err(map.error("fit.free", format!("'{p}' is not a parameter of this model")));
        }
    }
    let fit = FitSpec {
        manifest: match &f.manifest {
            Some(m) => Some(r.existing("fit.manifest", m)?),
            None => None,
        },
        free,
        bounds_factor: f.bounds_factor.unwrap_or(20.0),
        starts: f.starts.unwrap_or(4),
        seed: f.seed.unwrap_or(0),
        jacobian: match f.jacobian.as_deref() {
            None | Some("sensitivity") => JacobianMode::Sensitivity,
            Some("finite-difference") => JacobianMode::FiniteDifference,
            Some(other) => {
                return Err(map.error(
                    "fit.jacobian",
                    format!("unknown mode '{other}' (sensitivity or finite-difference)"),
                ))
            }
        },
        background: f.background.unwrap_or(false),
    };
    if !(fit.bounds_factor > 1.0) {
        return Err(map.error("fit.bounds_factor", "must be > 1"));
    }
    if fit.starts == 0 {
        return Err(map.error("fit.starts", "must be >= 1"));
    }

    Ok(RunConfig {
        model,
        protocol,
        powers_mw,
        simulation,
        bin_width_ns,
        noise,
        recovery,
        fit,
        output: r.path(raw.output.as_deref().unwrap_or("vbwb-out")),
    })
}

/// One trace of a fit manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub power: String,
    #[serde(default = "thermal")]
    pub initial: String,
    pub tag: Option<String>,
    pub group: Option<String>,
}

fn thermal() -> String {
    "thermal".into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub protocol: Option<RawProtocol>,
    #[serde(default, rename = "dataset")]
    pub datasets: Vec<ManifestEntry>,
}

/// One ingested pulse pair for the recovery command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub t_d: String,
    pub first: String,
    pub second: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairList {
    #[serde(default, rename = "pair")]
    pub pairs: Vec<PairEntry>,
}

/// Read a TOML side file with line-anchored errors.
pub fn read_side_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, SourceMap), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let value = toml::from_str(&text).map_err(|e: toml::de::Error| {
        let at = e.span().map(|s| format!(":{}", line_of(&text, s.start))).unwrap_or_default();
        CliError::config(format!("{}{at}: {}", path.display(), e.message().trim()))
    })?;
    Ok((value, SourceMap::scan(path, &text)))
}

/// A protocol table from a side file, resolved against that file's location.
pub fn resolve_side_protocol(raw: &RawProtocol, map: &SourceMap, base: &Path) -> Result<Protocol, CliError> {
    let r = Resolver {
        map,
        base: base.to_path_buf(),
    };
    resolve_protocol(&r, raw, "protocol", "pump-probe")
}

pub fn quantity_at(map: &SourceMap, path: &str, text: &str, dim: Dimension) -> Result<f64, CliError> {
    parse_quantity(text, dim).map_err(|e| map.error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_text(text: &str) -> Result<RunConfig, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, text).unwrap();
        let (table, map) = parse_file(&path)?;
        let raw = into_raw(table, &map)?;
        resolve(&raw, &map, dir.path(), "pump-probe")
    }

    #[test]
    fn resolves_units_and_defaults() {
        let cfg = resolve_text(
            "powers = [\"3.71 mW\", \"21.3 mW\"]\n[model]\npreset = \"9level\"\n[model.rates]\nkappa0 = \"56 MHz\"\nk_i1_0 = \"34 kHz/mW^2\"\n[protocol]\nwait = \"100 us\"\n",
        )
        .unwrap();
        assert_eq!(cfg.powers_mw, vec![3.71, 21.3]);
        let p = cfg.model.parameters.as_ref().unwrap();
        assert!((p.get(RateParameter::PhotoconversionPerPower2).unwrap() - 0.034).abs() < 1e-15);
        assert_eq!(
            cfg.protocol,
            Protocol::PumpProbe {
                pulse_ns: 1000.0,
                dark_ns: 100.0,
                wait_ns: 100_000.0,
                reset: true
            }
        );
    }

    #[test]
    fn errors_name_the_line() {
        let err = resolve_text("[model]\npreset = \"7level\"\n\n[model.rates]\nkappa0 = \"37\"\n").unwrap_err();
        assert!(err.message.contains("run.toml:5: model.rates.kappa0"), "{}", err.message);
        let err = resolve_text("powers = []\n").unwrap_err();
        assert!(err.message.contains(":1: powers"), "{}", err.message);
        let err = resolve_text("[noise]\nefficiency = 0.1\n").unwrap_err();
        assert!(err.message.contains(":1: noise") && err.message.contains("seed"), "{}", err.message);
        let err = resolve_text("[protocol]\nkind = \"pump-probe\"\nbogus = 1\n").unwrap_err();
        assert!(err.message.contains("run.toml:3"), "{}", err.message);
    }

    #[test]
    fn set_overrides_and_hash() {
        let mut table = toml::Table::new();
        let mut map = SourceMap::default();
        apply_set(&mut table, &mut map, "model.rates.kappa1=\"5 MHz\"").unwrap();
        apply_set(&mut table, &mut map, "fit.starts=2").unwrap();
        let raw = into_raw(table, &map).unwrap();
        let a = resolve(&raw, &map, Path::new("."), "pump-probe").unwrap();
        assert_eq!(a.fit.starts, 2);
        assert_eq!(a.model.parameters.as_ref().unwrap().get(RateParameter::SingletToOne), Some(5.0));
        let mut b = a.clone();
        b.output = PathBuf::from("elsewhere");
        assert_eq!(a.settings_hash(), b.settings_hash());
        b.powers_mw = vec![1.0];
        assert_ne!(a.settings_hash(), b.settings_hash());

        let mut table = toml::Table::new();
        let mut map = SourceMap::default();
        apply_set(&mut table, &mut map, "model.rates.kappa1=5").unwrap();
        let err = into_raw(table, &map).unwrap_err();
        assert!(err.message.contains("--set model.rates.kappa1"), "{}", err.message);

        let mut table = toml::Table::new();
        let mut map = SourceMap::default();
        apply_set(&mut table, &mut map, "model.rates.kappa1=5 ns").unwrap();
        let raw = into_raw(table, &map).unwrap();
        let err = resolve(&raw, &map, Path::new("."), "pump-probe").unwrap_err();
        assert!(err.message.starts_with("--set model.rates.kappa1:"), "{}", err.message);
    }
}
