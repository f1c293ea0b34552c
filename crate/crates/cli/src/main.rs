//! `ckfgait` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use ckfgait::config::{EventSource, RunConfig};
use ckfgait::io::{self, TrialFileSet};
use ckfgait::workflow;

#[derive(Parser)]
#[command(name = "ckfgait", version, about = "Lower-body kinematics from three inertial sensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trial directory.
    Synth(SynthArgs),
    /// Run the filter on a trial and write estimate.csv.
    Estimate(EstimateArgs),
    /// Compare estimate.csv against the trial reference and write metrics.json.
    Evaluate(EvaluateArgs),
    /// Synthesize, estimate and evaluate into one directory.
    Pipeline(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON run configuration; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Generate n trials (seeds seed, seed+1, ...) into trial_000, trial_001, ... on n threads.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u32).range(1..))]
    batch: Option<u32>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// `detect`, or an events CSV (relative paths resolve inside each trial in batch mode).
    #[arg(long, value_name = "detect|FILE")]
    events: Option<String>,
    /// Treat every subdirectory of --input holding imu.csv as a trial; use n threads.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u32).range(1..))]
    batch: Option<u32>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Defaults to the trial's config.json, then to built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trial directory with the reference.
    #[arg(long)]
    input: PathBuf,
    /// Directory holding estimate.csv; metrics.json is written next to it.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_name = "detect|FILE")]
    events: Option<String>,
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u32).range(1..))]
    batch: Option<u32>,
}

type CliResult<T = ()> = Result<T, String>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CKFGAIT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Synth(a) => {
            let cfg = load_config(a.config.as_deref())?;
            for_seeds(&a, |seed, dir| workflow::synth_to_dir(&cfg, seed, dir).map_err(|e| e.to_string()))
        }
        Command::Pipeline(a) => {
            let cfg = load_config(a.config.as_deref())?;
            for_seeds(&a, |seed, dir| {
                let report = workflow::pipeline(&cfg, seed, dir).map_err(|e| e.to_string())?;
                log::info!("{}: e_pos {:.4} m", dir.display(), report.e_pos);
                Ok(())
            })
        }
        Command::Estimate(a) => {
            let cfg = load_config(Some(&a.config))?;
            for_trials(&a.input, &a.output, a.batch, |input, output| {
                let (trial, cfg) = prepare(input, &cfg, a.events.as_deref(), a.batch.is_some())?;
                workflow::estimate_to_dir(&cfg, &trial, output).map_err(|e| e.to_string())?;
                Ok(())
            })
        }
        Command::Evaluate(a) => {
            let explicit = a.config.as_deref().map(|p| load_config(Some(p))).transpose()?;
            for_trials(&a.input, &a.output, a.batch, |input, output| {
                let (mut trial, _) = prepare(input, &RunConfig::default(), a.events.as_deref(), a.batch.is_some())?;
                let cfg = explicit.clone().or_else(|| trial.config.clone()).unwrap_or_default();
                if a.events.as_deref() == Some("detect") {
                    trial.events = None;
                }
                workflow::evaluate_to_dir(&cfg, &trial, output, output).map_err(|e| e.to_string())?;
                Ok(())
            })
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| e.to_string()),
        None => Ok(RunConfig::default()),
    }
}

/// Loads a trial and applies the `--events` choice to it and to the config.
fn prepare(input: &Path, cfg: &RunConfig, events: Option<&str>, batch: bool) -> CliResult<(TrialFileSet, RunConfig)> {
    let mut trial = TrialFileSet::load(input).map_err(|e| e.to_string())?;
    let mut cfg = cfg.clone();
    match events {
        None => {}
        Some("detect") => cfg.events = EventSource::Detect,
        Some(file) => {
            let mut path = PathBuf::from(file);
            if batch && path.is_relative() {
                path = input.join(path);
            }
            trial.events = Some(io::read_events_csv(&path, trial.raw.len()).map_err(|e| e.to_string())?);
            cfg.events = EventSource::File;
        }
    }
    Ok((trial, cfg))
}

fn pool(n: u32) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(n as usize).build().map_err(|e| e.to_string())
}

fn for_seeds(a: &SynthArgs, job: impl Fn(Option<u64>, &Path) -> CliResult + Sync) -> CliResult {
    let Some(n) = a.batch else {
        return job(a.seed, &a.output);
    };
    let base = match a.seed {
        Some(s) => s,
        None => load_config(a.config.as_deref())?.synth.gait.rng_seed,
    };
    let jobs: Vec<(u64, PathBuf)> =
        (0..n).map(|i| (base.wrapping_add(i as u64), a.output.join(format!("trial_{i:03}")))).collect();
    let failures: Vec<String> = pool(n)?.install(|| {
        jobs.par_iter().filter_map(|(seed, dir)| job(Some(*seed), dir).err().map(|e| format!("{}: {e}", dir.display()))).collect()
    });
    collect_failures(failures)
}

fn for_trials(input: &Path, output: &Path, batch: Option<u32>, job: impl Fn(&Path, &Path) -> CliResult + Sync) -> CliResult {
    let Some(n) = batch else {
        return job(input, output);
    };
    let entries = std::fs::read_dir(input).map_err(|e| format!("{}: {e}", input.display()))?;
    let mut names: Vec<_> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(io::IMU_FILE).is_file())
        .map(|e| e.file_name())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(format!("{}: no trial directories found", input.display()));
    }
    let failures: Vec<String> = pool(n)?.install(|| {
        names
            .par_iter()
            .filter_map(|name| {
                let (i, o) = (input.join(name), output.join(name));
                job(&i, &o).err().map(|e| format!("{}: {e}", i.display()))
            })
            .collect()
    });
    collect_failures(failures)
}

fn collect_failures(failures: Vec<String>) -> CliResult {
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures.join("\n"))
    }
}
