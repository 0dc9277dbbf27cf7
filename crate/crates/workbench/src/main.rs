//! `vbwb`: simulate, fit and inspect boron-vacancy photophysics runs.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod output;
mod units;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vbphys::Execution;

use crate::commands::Context;
use crate::config::{apply_flags, apply_set, into_raw, parse_file, resolve, Flags, SourceMap};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "vbwb", version, about = "Boron-vacancy photophysics workbench")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Model preset: 7level or 9level.
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Override a config key, e.g. `--set model.rates.kappa0="40 MHz"`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Comma-separated laser powers; bare numbers are mW.
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',', allow_hyphen_values = true)]
    power: Option<Vec<String>>,

    /// Master seed for noise and multi-start draws.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the configured protocol and write trace files.
    Simulate,
    /// Dark-time recovery scan: synthetic single flake, flake batch, or
    /// ingested pulse-pair traces.
    Recovery,
    /// Joint rate fit of the traces listed in a manifest.
    Fit {
        /// Manifest TOML (overrides fit.manifest).
        manifest: Option<PathBuf>,
    },
    /// Print the built-in parameter presets as config snippets.
    Presets,
    /// Resolve and check the configuration without running anything.
    Validate,
}

fn load(cli: &Cli) -> Result<Context, CliError> {
    let cwd = std::env::current_dir().map_err(|e| CliError::config(format!("current directory: {e}")))?;
    let (mut table, mut map, base) = match &cli.config {
        Some(path) => {
            let (t, m) = parse_file(path)?;
            let base = path.parent().map_or_else(|| cwd.clone(), |p| cwd.join(p));
            (t, m, base)
        }
        None => (toml::Table::new(), SourceMap::default(), cwd.clone()),
    };
    for s in &cli.set {
        apply_set(&mut table, &mut map, s)?;
    }
    let mut raw = into_raw(table, &map)?;
    apply_flags(
        &mut raw,
        &mut map,
        &Flags {
            preset: cli.preset.clone(),
            powers: cli.power.clone(),
            seed: cli.seed,
        },
    );
    let default_kind = match cli.command {
        Command::Recovery => "recovery",
        _ => "pump-probe",
    };
    let mut cfg = resolve(&raw, &map, &base, default_kind)?;
    if let Command::Fit { manifest: Some(m) } = &cli.command {
        if !m.exists() {
            return Err(CliError::config(format!("manifest {} does not exist", m.display())));
        }
        cfg.fit.manifest = Some(cwd.join(m));
    }
    if let Some(out) = &cli.out {
        cfg.output = cwd.join(out);
    }
    let exec = match cli.jobs {
        Some(0) => return Err(CliError::config("--jobs must be >= 1")),
        Some(1) => Execution::Sequential,
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::config(format!("--jobs: {e}")))?;
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    Ok(Context::new(cfg, exec))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Presets = cli.command {
        return commands::presets();
    }
    let ctx = load(cli)?;
    log::info!("settings hash {}", ctx.hash);
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Recovery => commands::recovery(&ctx),
        Command::Fit { .. } => commands::fit(&ctx),
        Command::Validate => commands::validate(&ctx),
        Command::Presets => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
