//! `perc`: runs one experiment per invocation and writes a manifest plus
//! result files into the output directory.

mod config;
mod experiments;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{Experiment, FluctKind, RunConfig, ValidationError};
use output::{Manifest, ERROR, MANIFEST};

#[derive(Parser)]
#[command(name = "perc", version, about = "Zero-range process on percolation clusters: experiments and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one environment and store its bonds.
    Gen(RunArgs),
    /// Estimate the giant-cluster density.
    Theta(RunArgs),
    /// Estimate the diffusion constant of the random walk on the cluster.
    Walk(RunArgs),
    /// Solve the resolvent equation for each test function.
    Corrector(RunArgs),
    /// Run stationary zero-range trajectories and record the fields.
    Simulate(RunArgs),
    /// Fluctuation experiments.
    Fluct {
        #[arg(long = "exp", value_enum)]
        exp: Option<FluctKind>,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Census of good and bad boxes over a range of scales.
    Connect(RunArgs),
    /// Chemical-distance tail estimate.
    Chemdist(RunArgs),
    /// Run the experiment named in the configuration.
    Run(RunArgs),
    /// Print the estimates of a run directory against their targets.
    Report { dir: PathBuf },
    /// Print the reference configuration with every default.
    Defaults,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Override a single key, e.g. `--set environment.p=0.6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Report { dir } => report(&dir),
        Command::Defaults => {
            print!("{}", config::REFERENCE);
            ExitCode::SUCCESS
        }
        Command::Gen(a) => execute(Some(Experiment::Gen), None, a),
        Command::Theta(a) => execute(Some(Experiment::Theta), None, a),
        Command::Walk(a) => execute(Some(Experiment::Walk), None, a),
        Command::Corrector(a) => execute(Some(Experiment::Corrector), None, a),
        Command::Simulate(a) => execute(Some(Experiment::Simulate), None, a),
        Command::Fluct { exp, args } => execute(Some(Experiment::Fluct), exp, args),
        Command::Connect(a) => execute(Some(Experiment::Connect), None, a),
        Command::Chemdist(a) => execute(Some(Experiment::Chemdist), None, a),
        Command::Run(a) => execute(None, None, a),
    }
}

fn resolve(kind: Option<Experiment>, exp: Option<FluctKind>, args: &RunArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = config::load(&text, &args.set)?;
    if let Some(k) = kind {
        cfg.experiment = k;
    }
    if let Some(e) = exp {
        cfg.fluct.experiment = e;
    }
    if let Some(o) = &args.out {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn execute(kind: Option<Experiment>, exp: Option<FluctKind>, args: RunArgs) -> ExitCode {
    let cfg = match resolve(kind, exp, &args) {
        Ok(c) => c,
        Err(e) => return fail(None, &e),
    };
    match experiments::run(&cfg) {
        Ok(m) => {
            let _ = experiments::report_table(&m, std::io::stdout().lock());
            println!("wrote {}", cfg.output.join(MANIFEST).display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(Some(&cfg.output), &e),
    }
}

/// Emits a machine-readable error record on stderr and, when the run
/// directory is known, as `error.json`.
fn fail(dir: Option<&Path>, err: &anyhow::Error) -> ExitCode {
    let record = match err.downcast_ref::<ValidationError>() {
        Some(v) => json!({ "error": { "kind": "validation", "message": v.to_string(), "fields": v.fields } }),
        None => json!({ "error": { "kind": "runtime", "message": format!("{err:#}") } }),
    };
    let text = serde_json::to_string_pretty(&record).unwrap_or_default();
    eprintln!("{text}");
    if let Some(d) = dir {
        if fs::create_dir_all(d).is_ok() {
            let _ = output::write_atomic(d, ERROR, format!("{text}\n").as_bytes());
        }
    }
    ExitCode::from(if err.is::<ValidationError>() { 2 } else { 1 })
}

fn report(dir: &Path) -> ExitCode {
    let load = || -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("missing manifest {}", path.display()))?;
        let m: Manifest =
            serde_json::from_str(&text).with_context(|| format!("corrupt manifest {}", path.display()))?;
        experiments::ensure_valid(&m)?;
        Ok(m)
    };
    match load() {
        Ok(m) => {
            let _ = experiments::report_table(&m, std::io::stdout().lock());
            let failed: Vec<&str> = m.failed().map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                eprintln!("{}", json!({ "error": { "kind": "failed_checks", "checks": failed } }));
                ExitCode::from(3)
            }
        }
        Err(e) => fail(None, &e),
    }
}
