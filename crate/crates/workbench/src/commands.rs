//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use vbphys::inference::{
    fit_model, fit_recovery, format_uncertainty, runs_test, Dataset, FitProblem, FitResult, FitStrategy,
    FreeParameter, RecoveryFitResult,
};
use vbphys::kinetics::{build_preset_7level, build_preset_9level, LevelGraph, NineLevelRates, SevenLevelRates};
use vbphys::sequences::{simulate_sequence, InitialCondition};
use vbphys::signal::{
    contrast_lower_bound, peak_height, read_trace, recovery_curve, synthesize_trace, write_trace, PLTrace,
    RecoveryCurve, RecoveryPair, DEFAULT_BIN_WIDTH_NS, DEFAULT_PEAK_WINDOW_NS,
};
use vbphys::synthetic::{recovery_batch, recovery_pairs, FlakeBatch, NoiseSettings};
use vbphys::Execution;

use crate::config::{
    quantity_at, read_side_file, resolve_side_protocol, Manifest, ManifestEntry, PairEntry, PairList, Preset,
    Protocol, RawProtocol, RunConfig, SourceMap,
};
use crate::error::CliError;
use crate::output::{create_dir, tag_number, write_atomic, write_json, write_toml};
use crate::units::{Dimension, parse_quantity};

pub struct Context {
    pub cfg: RunConfig,
    pub exec: Execution,
    pub hash: String,
}

impl Context {
    pub fn new(cfg: RunConfig, exec: Execution) -> Self {
        let hash = cfg.settings_hash();
        Context { cfg, exec, hash }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output.join(name)
    }

    fn noise(&self) -> Option<&NoiseSettings> {
        self.cfg.noise.as_ref().map(|n| &n.settings)
    }

    fn seed(&self) -> u64 {
        self.cfg.noise.as_ref().map_or(0, |n| n.seed)
    }
}

/// Per-stream seed; stream 0 keeps the master seed so a single-power run
/// matches the library's own draws.
fn derive_seed(seed: u64, stream: usize) -> u64 {
    seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn power_label(power_mw: f64) -> String {
    format!("p{}mW", tag_number(power_mw))
}

#[derive(Debug, Serialize)]
struct TraceSummary {
    file: String,
    power_mw: f64,
    tag: String,
    bins: usize,
    peak: f64,
    peak_time_ns: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    contrast: Option<f64>,
}

fn summarize_trace(file: &str, tag: &str, power_mw: f64, trace: &PLTrace) -> Result<TraceSummary, CliError> {
    let onset = trace.start();
    let peak = peak_height(trace, (onset, onset + DEFAULT_PEAK_WINDOW_NS.min(trace.end() - onset)))?;
    Ok(TraceSummary {
        file: file.to_string(),
        power_mw,
        tag: tag.to_string(),
        bins: trace.len(),
        peak: peak.value,
        peak_time_ns: peak.time_ns - onset,
        contrast: contrast_lower_bound(trace).ok(),
    })
}

#[derive(Debug, Serialize)]
struct SimulateReport<'a> {
    settings_hash: &'a str,
    model: String,
    protocol: &'a Protocol,
    noise: Option<&'a NoiseSettings>,
    traces: Vec<TraceSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pair_files: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    manifest: Option<String>,
}

fn model_name(cfg: &RunConfig) -> String {
    cfg.model.preset.map_or_else(|| "custom".to_string(), |p| p.name().to_string())
}

/// Config-form protocol table for a manifest next to the traces.
fn protocol_table(protocol: &Protocol, out: &Path) -> Result<RawProtocol, CliError> {
    Ok(match protocol {
        Protocol::PumpProbe {
            pulse_ns,
            dark_ns,
            wait_ns,
            reset,
        } => RawProtocol {
            kind: Some("pump-probe".into()),
            pulse: Some(format!("{pulse_ns} ns")),
            dark: Some(format!("{dark_ns} ns")),
            wait: Some(format!("{wait_ns} ns")),
            reset: Some(*reset),
            ..RawProtocol::default()
        },
        Protocol::File { sequence } => {
            write_atomic(&out.join("sequence.json"), sequence.to_json().as_bytes())?;
            RawProtocol {
                kind: Some("file".into()),
                file: Some("sequence.json".into()),
                ..RawProtocol::default()
            }
        }
        Protocol::Recovery { .. } => unreachable!("recovery scans are written as pair lists"),
    })
}

struct PulseTrace {
    file: String,
    tag: String,
    power_mw: f64,
    trace: PLTrace,
}

fn simulate_pulses(ctx: &Context) -> Result<Vec<PulseTrace>, CliError> {
    let cfg = &ctx.cfg;
    let graph = &cfg.model.graph;
    let pump_probe = matches!(cfg.protocol, Protocol::PumpProbe { .. });
    let sequence_id = if pump_probe { "pump-probe" } else { "file" };
    let powers: Vec<(usize, f64)> = cfg.powers_mw.iter().copied().enumerate().collect();
    let per_power = ctx.exec.try_map(&powers, |&(k, power)| {
        let seq = cfg.protocol.sequence(power)?;
        let traj = simulate_sequence(graph, &seq, &InitialCondition::Thermal, &cfg.simulation)?;
        let full = synthesize_trace(&traj, graph, cfg.bin_width_ns)?;
        let mut out = Vec::new();
        for (j, (t0, t1)) in seq.pulse_windows().into_iter().enumerate() {
            let tag = match (pump_probe, j) {
                (true, 0) => "thermal".to_string(),
                (true, 1) => "polarized".to_string(),
                _ => format!("pulse{j}"),
            };
            let mut trace = full.window(t0, t1)?;
            trace.metadata.power_mw = Some(power);
            trace.metadata.pulse_index = Some(j);
            trace.metadata.sequence_id = Some(sequence_id.into());
            if pump_probe && j < 2 {
                trace.metadata.initial_condition = Some(tag.clone());
            }
            if let Some(n) = ctx.noise() {
                trace.metadata.averaging_s = Some(n.averaging_time_s);
                let seed = derive_seed(ctx.seed(), 1000 * k + j);
                trace = vbphys::signal::add_shot_noise(&trace, &n.for_period(seq.period()), seed)?;
            }
            out.push(PulseTrace {
                file: format!("traces/{}_{tag}.csv", power_label(power)),
                tag,
                power_mw: power,
                trace,
            });
        }
        Ok::<_, CliError>(out)
    })?;
    Ok(per_power.into_iter().flatten().collect())
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    create_dir(&cfg.output.join("traces"))?;
    let mut traces = Vec::new();
    let mut pair_files = Vec::new();
    let mut manifest_file = None;
    match &cfg.protocol {
        Protocol::Recovery { .. } => {
            for (k, &power) in cfg.powers_mw.iter().enumerate() {
                let scan = cfg.protocol.scan(power).expect("recovery protocol");
                let pairs = recovery_pairs(
                    &cfg.model.graph,
                    &scan,
                    &cfg.simulation,
                    cfg.bin_width_ns,
                    ctx.noise(),
                    derive_seed(ctx.seed(), k),
                    ctx.exec,
                )?;
                let mut list = PairList::default();
                for pair in &pairs {
                    let stem = format!("traces/{}_td{}ns", power_label(power), tag_number(pair.t_d_ns));
                    let (first, second) = (format!("{stem}_first.csv"), format!("{stem}_second.csv"));
                    write_trace(&cfg.output.join(&first), &pair.first)?;
                    write_trace(&cfg.output.join(&second), &pair.second)?;
                    traces.push(summarize_trace(&first, "first", power, &pair.first)?);
                    traces.push(summarize_trace(&second, "second", power, &pair.second)?);
                    list.pairs.push(PairEntry {
                        t_d: format!("{} ns", pair.t_d_ns),
                        first,
                        second,
                    });
                }
                let name = format!("pairs_{}.toml", power_label(power));
                write_toml(&ctx.out(&name), &list)?;
                pair_files.push(name);
            }
        }
        _ => {
            let pulses = simulate_pulses(ctx)?;
            let mut manifest = Manifest {
                protocol: Some(protocol_table(&cfg.protocol, &cfg.output)?),
                datasets: Vec::new(),
            };
            for p in &pulses {
                write_trace(&cfg.output.join(&p.file), &p.trace)?;
                traces.push(summarize_trace(&p.file, &p.tag, p.power_mw, &p.trace)?);
                manifest.datasets.push(ManifestEntry {
                    file: p.file.clone(),
                    power: format!("{} mW", p.power_mw),
                    initial: "thermal".into(),
                    tag: Some(p.tag.clone()),
                    group: Some(format!("{} mW", p.power_mw)),
                });
            }
            write_toml(&ctx.out("manifest.toml"), &manifest)?;
            manifest_file = Some("manifest.toml".to_string());
        }
    }
    let report = SimulateReport {
        settings_hash: &ctx.hash,
        model: model_name(cfg),
        protocol: &cfg.protocol,
        noise: ctx.noise(),
        traces,
        pair_files,
        manifest: manifest_file,
    };
    write_json(&ctx.out("simulate.json"), &report)?;
    println!(
        "wrote {} traces to {} (settings {})",
        report.traces.len(),
        cfg.output.display(),
        &ctx.hash[..12]
    );
    for t in &report.traces {
        match t.contrast {
            Some(c) => println!("  {:<40} peak {:>12.6} at {:>5.1} ns  contrast {:+.3}", t.file, t.peak, t.peak_time_ns, c),
            None => println!("  {:<40} peak {:>12.6} at {:>5.1} ns", t.file, t.peak, t.peak_time_ns),
        }
    }
    Ok(())
}

fn load_trace(map: &SourceMap, key: &str, path: &Path) -> Result<PLTrace, CliError> {
    if !path.exists() {
        return Err(map.error(key, format!("trace file {} does not exist", path.display())));
    }
    read_trace(path).map_err(|e| CliError::from(e).context(map.locate(key)))
}

fn load_pairs(path: &Path) -> Result<Vec<RecoveryPair>, CliError> {
    let (list, map) = read_side_file::<PairList>(path)?;
    if list.pairs.is_empty() {
        return Err(CliError::config(format!("{}: no [[pair]] entries", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    list.pairs
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let key = |k: &str| format!("pair[{i}].{k}");
            Ok(RecoveryPair {
                t_d_ns: quantity_at(&map, &key("t_d"), &e.t_d, Dimension::Time)?,
                first: load_trace(&map, &key("first"), &base.join(&e.first))?,
                second: load_trace(&map, &key("second"), &base.join(&e.second))?,
            })
        })
        .collect()
}

/// Model graph for synthetic scans, with the singlet lifetime override applied.
fn recovery_graph(cfg: &RunConfig) -> Result<LevelGraph, CliError> {
    let Some(tau) = cfg.recovery.lifetime_ns else {
        return Ok(cfg.model.graph.clone());
    };
    let (preset, params) = match (cfg.model.preset, &cfg.model.parameters) {
        (Some(p), Some(ps)) => (p, ps),
        _ => return Err(CliError::config("recovery.lifetime needs a preset model")),
    };
    Ok(match preset {
        Preset::Seven => build_preset_7level(&SevenLevelRates::from_parameters(params)?.with_singlet_lifetime(tau)?)?,
        Preset::Nine => {
            let mut rates = NineLevelRates::from_parameters(params)?;
            rates.base = rates.base.with_singlet_lifetime(tau)?;
            build_preset_9level(&rates)?
        }
    })
}

#[derive(Debug, Serialize)]
struct RecoveryReport<'a> {
    settings_hash: &'a str,
    source: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    power_mw: Option<f64>,
    curve: &'a RecoveryCurve,
    fit: &'a RecoveryFitResult,
}

#[derive(Debug, Serialize)]
struct BatchSummary<'a> {
    settings_hash: &'a str,
    power_mw: f64,
    flakes: usize,
    failed: usize,
    mean_ns: f64,
    std_ns: f64,
    formatted: &'a str,
    tau_s_ns: &'a [f64],
}

fn write_curve(path: &Path, curve: &RecoveryCurve) -> Result<(), CliError> {
    let mut text = String::from("t_d_ns,ratio,sigma\n");
    for ((t, r), s) in curve.t_d_ns.iter().zip(&curve.ratio).zip(&curve.ratio_sigma) {
        writeln!(text, "{t},{r},{s}").unwrap();
    }
    write_atomic(path, text.as_bytes())
}

pub fn recovery(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let window = cfg.recovery.peak_window_ns;
    let (curve, source, power) = match &cfg.recovery.pairs {
        Some(path) => {
            let pairs = load_pairs(path)?;
            (recovery_curve(&pairs, window)?, "ingested", None)
        }
        None => {
            if !matches!(cfg.protocol, Protocol::Recovery { .. }) {
                return Err(CliError::config(
                    "the recovery command needs protocol.kind = \"recovery\" or a recovery.pairs file",
                ));
            }
            if cfg.powers_mw.len() != 1 {
                return Err(CliError::config(format!(
                    "a dark-time scan runs at one power, got {}",
                    cfg.powers_mw.len()
                )));
            }
            let power = cfg.powers_mw[0];
            let scan = cfg.protocol.scan(power).expect("recovery protocol");
            let graph = recovery_graph(cfg)?;
            if cfg.recovery.flakes > 1 {
                return flake_batch(ctx, &graph, FlakeBatch {
                    flakes: cfg.recovery.flakes,
                    scan,
                    settings: cfg.simulation,
                    noise: ctx.noise().copied(),
                    brightness_spread: cfg.recovery.brightness_spread,
                });
            }
            let pairs = recovery_pairs(
                &graph,
                &scan,
                &cfg.simulation,
                cfg.bin_width_ns,
                ctx.noise(),
                ctx.seed(),
                ctx.exec,
            )?;
            (recovery_curve(&pairs, window)?, "synthetic", Some(power))
        }
    };
    create_dir(&cfg.output)?;
    write_curve(&ctx.out("recovery_curve.csv"), &curve)?;
    let fit = fit_recovery(&curve)?;
    write_json(
        &ctx.out("recovery_fit.json"),
        &RecoveryReport {
            settings_hash: &ctx.hash,
            source,
            power_mw: power,
            curve: &curve,
            fit: &fit,
        },
    )?;
    println!(
        "tau_s = {} ns from {} dark times (reduced chi2 {:.3})",
        format_uncertainty(fit.tau_s_ns, fit.tau_s_sigma_ns),
        curve.len(),
        fit.reduced_chi2
    );
    Ok(())
}

fn flake_batch(ctx: &Context, graph: &LevelGraph, batch: FlakeBatch) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    if cfg.bin_width_ns != DEFAULT_BIN_WIDTH_NS || cfg.recovery.peak_window_ns != DEFAULT_PEAK_WINDOW_NS {
        log::warn!("flake batches use the default bin width and peak window");
    }
    let power = batch.scan.power_mw;
    let report = recovery_batch(graph, &batch, ctx.seed(), ctx.exec)?;
    create_dir(&cfg.output)?;
    write_json(&ctx.out("flakes.json"), &report)?;
    let s = &report.summary;
    write_json(
        &ctx.out("summary.json"),
        &BatchSummary {
            settings_hash: &ctx.hash,
            power_mw: power,
            flakes: report.flakes.len(),
            failed: report.failed,
            mean_ns: s.mean,
            std_ns: s.std,
            formatted: &s.formatted,
            tau_s_ns: &s.values,
        },
    )?;
    println!(
        "tau_s = {} ns over {} flakes ({} failed)",
        s.formatted,
        report.flakes.len(),
        report.failed
    );
    Ok(())
}

fn initial_condition(map: &SourceMap, key: &str, text: &str, power: f64) -> Result<InitialCondition, CliError> {
    match text {
        "thermal" => Ok(InitialCondition::Thermal),
        "steady-state" => Ok(InitialCondition::SteadyState { power_mw: power }),
        other => Err(map.error(key, format!("unknown initial condition '{other}' (thermal or steady-state)"))),
    }
}

fn load_datasets(manifest_path: &Path, fallback: &Protocol) -> Result<Vec<Dataset>, CliError> {
    let (manifest, map) = read_side_file::<Manifest>(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let protocol = match &manifest.protocol {
        Some(p) => resolve_side_protocol(p, &map, base)?,
        None => fallback.clone(),
    };
    if let Protocol::Recovery { .. } = protocol {
        return Err(CliError::config(format!(
            "{}: rate fits need a pump-probe or file protocol",
            manifest_path.display()
        )));
    }
    if manifest.datasets.is_empty() {
        return Err(CliError::config(format!("{}: no [[dataset]] entries", manifest_path.display())));
    }
    manifest
        .datasets
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let key = |k: &str| format!("dataset[{i}].{k}");
            let power = quantity_at(&map, &key("power"), &e.power, Dimension::Power)?;
            let path = base.join(&e.file);
            let tag = e.tag.clone().unwrap_or_else(|| {
                path.file_stem().map_or_else(|| format!("dataset-{i}"), |s| s.to_string_lossy().into_owned())
            });
            Ok(Dataset {
                trace: load_trace(&map, &key("file"), &path)?,
                sequence: protocol.sequence(power).map_err(|e| map.error(&key("power"), e))?,
                power_mw: power,
                initial: initial_condition(&map, &key("initial"), &e.initial, power)?,
                tag,
                amplitude_group: e.group.clone(),
            })
        })
        .collect()
}

fn fit_problem(cfg: &RunConfig, datasets: Vec<Dataset>, exec: Execution) -> Result<FitProblem, CliError> {
    let (template, params) = match (&cfg.model.template, &cfg.model.parameters) {
        (Some(t), Some(p)) => (t.clone(), p.clone()),
        _ => return Err(CliError::config("rate fits need a preset model (model.preset)")),
    };
    let free = cfg
        .fit
        .free
        .iter()
        .map(|&p| {
            let v = params.get(p).ok_or_else(|| {
                CliError::config(format!("fit.free: {p} has no start value; set model.rates.{p}"))
            })?;
            Ok(FreeParameter::around(p, v, cfg.fit.bounds_factor))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(FitProblem {
        template,
        fixed: params,
        free,
        datasets,
        fit_background: cfg.fit.background,
        settings: cfg.simulation,
        execution: exec,
        jacobian: cfg.fit.jacobian,
    })
}

fn with_unit(p: vbphys::kinetics::RateParameter, value: String) -> String {
    crate::units::with_unit(&value, Dimension::for_parameter(p.unit()))
}

fn fit_report(ctx: &Context, result: &FitResult) -> String {
    let mut r = String::new();
    let w = &mut r;
    writeln!(w, "model            {}", model_name(&ctx.cfg)).unwrap();
    writeln!(w, "datasets         {}", result.datasets.len()).unwrap();
    writeln!(w, "reduced chi2     {:.4} (dof {})", result.reduced_chi2, result.dof).unwrap();
    writeln!(
        w,
        "iterations       {} (best of {} starts: #{})",
        result.iterations,
        result.starts.len(),
        result.best_start
    )
    .unwrap();
    writeln!(w, "stop reason      {:?}", result.reason).unwrap();
    writeln!(w).unwrap();
    for e in &result.parameters {
        let value = match e.sigma {
            Some(s) => format_uncertainty(e.value, s),
            None => format!("{}", e.value),
        };
        let flag = if e.at_bound { "  at bound" } else { "" };
        writeln!(w, "{:<16} {}{flag}", e.parameter.key(), with_unit(e.parameter, value)).unwrap();
    }
    if let Some(life) = result.lifetime {
        let value = match life.sigma_ns {
            Some(s) => format_uncertainty(life.tau_ns, s),
            None => format!("{:.2}", life.tau_ns),
        };
        writeln!(w, "{:<16} {value} ns", "tau_s").unwrap();
    }
    writeln!(w).unwrap();
    writeln!(w, "{:<12} {:>9} {:>7} {:>10} {:>12} {:>8}", "dataset", "power mW", "bins", "chi2/bin", "amplitude", "runs p").unwrap();
    for d in &result.datasets {
        let runs = runs_test(&d.residuals).map_or_else(|_| "-".to_string(), |t| format!("{:.3}", t.p_value));
        writeln!(
            w,
            "{:<12} {:>9} {:>7} {:>10.4} {:>12.5e} {:>8}",
            d.tag,
            d.power_mw,
            d.bins,
            d.chi2 / d.bins as f64,
            d.amplitude,
            runs
        )
        .unwrap();
    }
    writeln!(w).unwrap();
    writeln!(w, "settings hash    {}", ctx.hash).unwrap();
    r
}

#[derive(Debug, Serialize)]
struct FitOutput<'a> {
    settings_hash: &'a str,
    model: String,
    result: &'a FitResult,
}

pub fn fit(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let manifest = cfg
        .fit
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::config("fit needs a manifest: pass it as an argument or set fit.manifest"))?;
    let datasets = load_datasets(manifest, &cfg.protocol)?;
    let problem = fit_problem(cfg, datasets, ctx.exec)?;
    let strategy = FitStrategy {
        starts: cfg.fit.starts,
        seed: cfg.fit.seed,
        ..FitStrategy::default()
    };
    let start = problem.fixed.clone();
    let result = fit_model(&problem, &start, &strategy)?;
    create_dir(&cfg.output)?;
    write_json(
        &ctx.out("fit_result.json"),
        &FitOutput {
            settings_hash: &ctx.hash,
            model: model_name(cfg),
            result: &result,
        },
    )?;
    let report = fit_report(ctx, &result);
    write_atomic(&ctx.out("fit_report.txt"), report.as_bytes())?;
    print!("{report}");
    if !result.converged {
        return Err(CliError::degenerate(format!(
            "fit stopped without converging ({:?}); partial results are in {}",
            result.reason,
            cfg.output.display()
        )));
    }
    Ok(())
}

pub fn presets() -> Result<(), CliError> {
    for preset in [Preset::Seven, Preset::Nine] {
        println!("# {}", preset.name());
        println!("[model]\npreset = \"{}\"\n\n[model.rates]", preset.name());
        for (p, v) in preset.defaults().iter() {
            let dim = Dimension::for_parameter(p.unit());
            let text = crate::units::with_unit(&format!("{v}"), dim);
            debug_assert_eq!(parse_quantity(&text, dim).ok(), Some(v));
            println!("{} = \"{text}\"", p.key());
        }
        println!();
    }
    Ok(())
}

pub fn validate(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    if let Some(m) = &cfg.fit.manifest {
        let datasets = load_datasets(m, &cfg.protocol)?;
        fit_problem(cfg, datasets, ctx.exec)?.validate()?;
        println!("manifest ok: {}", m.display());
    }
    if let Some(p) = &cfg.recovery.pairs {
        let pairs = load_pairs(p)?;
        recovery_curve(&pairs, cfg.recovery.peak_window_ns)?;
        println!("pairs ok: {} pairs in {}", pairs.len(), p.display());
    }
    println!("model {} with {} states", model_name(cfg), cfg.model.graph.len());
    println!("powers {:?} mW", cfg.powers_mw);
    println!("settings hash {}", ctx.hash);
    Ok(())
}
