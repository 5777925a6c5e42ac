//! `dfl`: run, sweep and analyse delay-aware hierarchical federated learning.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dfl_core::analysis::{compute_constants, BoundConstants, BoundInputs};
use dfl_core::config::{run_seed, set_path, ExperimentConfig, SeedRun};
use dfl_core::control::{objective_breakdown, solve_p, Decision, ObjectiveBreakdown, ProblemInput};
use dfl_core::metrics::{summarize, write_rows, SweepRecord};
use dfl_core::validation::{run_suite, SuiteOptions, SUITES};
use dfl_core::{DflError, Result};

#[derive(Parser)]
#[command(name = "dfl", version, about = "Delay-aware hierarchical federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Added to every seed, so disjoint offsets shard multi-seed work.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment config and write metrics, events and manifests.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a config for each value of one dotted config field.
    Sweep {
        config: PathBuf,
        /// Dotted path of the swept field, e.g. `training.mode.delay`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print every bound constant and step-size limit for a parameter file.
    Bounds {
        params: PathBuf,
        /// Also list the gap bound for rounds 0..=horizon.
        #[arg(long)]
        horizon: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Solve the interval problem once from a snapshot file.
    Control {
        snapshot: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run one invariant suite: facts, onestep, proposition, theorem or solver.
    Validate {
        suite: String,
        /// Monte Carlo repetitions for the stochastic suites.
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, common } => run(&config, &out, common.seed_offset),
        Command::Sweep { config, axis, values, out, common } => {
            sweep(&config, &axis, &values, &out, common.seed_offset)
        }
        Command::Bounds { params, horizon, .. } => bounds(&params, horizon),
        Command::Control { snapshot, .. } => control(&snapshot),
        Command::Validate { suite, seeds, common } => validate(&suite, seeds, common.seed_offset),
    };
    match result {
        Ok(code) => code,
        Err(e @ DflError::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn seeds(cfg: &ExperimentConfig, offset: u64) -> impl Iterator<Item = u64> {
    let first = cfg.seed + offset;
    (0..cfg.num_seeds as u64).map(move |i| first + i)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_seed(dir: &Path, cfg: &ExperimentConfig, run: &SeedRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_rows(&dir.join(format!("metrics_seed{}.csv", run.seed)), &run.output.metrics)?;
    write_rows(&dir.join(format!("events_seed{}.csv", run.seed)), &run.output.events)?;
    write_json(&dir.join(format!("manifest_seed{}.json", run.seed)), &cfg.manifest(run)?)
}

fn run(config: &Path, out: &Path, offset: u64) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(config)?;
    for seed in seeds(&cfg, offset) {
        let r = run_seed(&cfg, seed, &base_dir(config))?;
        write_seed(out, &cfg, &r)?;
        let last = r.output.metrics.last();
        let accuracy =
            if r.final_accuracy.is_finite() { format!(", accuracy {:.4}", r.final_accuracy) } else { String::new() };
        println!(
            "seed {seed}: F = {:.6} (optimum {:.6}){accuracy}, energy {:.4e} J, delay {:.4e} s",
            r.output.final_loss,
            r.optimum_loss,
            last.map_or(0.0, |m| m.cum_energy),
            last.map_or(0.0, |m| m.cum_delay),
        );
    }
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

/// Per-run scalars reported by a sweep.
fn sweep_metrics(run: &SeedRun) -> Vec<(&'static str, f64)> {
    let out = &run.output;
    let last = out.metrics.last();
    let n = out.intervals.len().max(1) as f64;
    let mut m = vec![
        ("final_loss", out.final_loss),
        ("suboptimality", out.final_loss - run.optimum_loss),
        ("cum_energy", last.map_or(0.0, |r| r.cum_energy)),
        ("cum_delay", last.map_or(0.0, |r| r.cum_delay)),
        ("mean_alpha", out.intervals.iter().map(|i| i.alpha).sum::<f64>() / n),
        ("mean_tau", out.intervals.iter().map(|i| i.tau as f64).sum::<f64>() / n),
    ];
    if let Some(gap) = out.final_gap {
        m.push(("final_gap", gap));
    }
    if run.final_accuracy.is_finite() {
        m.push(("final_accuracy", run.final_accuracy));
    }
    m
}

fn sweep(config: &Path, axis: &str, values: &[String], out: &Path, offset: u64) -> Result<ExitCode> {
    let values: Vec<f64> = values
        .iter()
        .filter(|v| !v.trim().is_empty())
        .map(|v| v.trim().parse::<f64>().map_err(|e| DflError::InvalidInput(format!("sweep value `{v}`: {e}"))))
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(DflError::InvalidInput("sweep needs at least one value".into()));
    }
    let text = fs::read_to_string(config)?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| DflError::Config { field: ".".into(), message: e.to_string() })?;
    let mut records = Vec::new();
    for &value in &values {
        let mut d = doc.clone();
        set_path(&mut d, axis, value)?;
        let cfg = ExperimentConfig::from_json_str(&d.to_string())?;
        let dir = out.join(format!("{axis}={value}"));
        for seed in seeds(&cfg, offset) {
            let r = run_seed(&cfg, seed, &base_dir(config))?;
            write_seed(&dir, &cfg, &r)?;
            for (metric, result) in sweep_metrics(&r) {
                records.push(SweepRecord { axis: axis.into(), value, seed, metric: metric.into(), result });
            }
        }
    }
    fs::create_dir_all(out)?;
    write_rows(&out.join("sweep.csv"), &records)?;
    let summary = summarize(&records);
    write_rows(&out.join("summary.csv"), &summary)?;
    for row in summary.iter().filter(|r| matches!(r.metric.as_str(), "final_loss" | "mean_alpha")) {
        println!("{axis} = {}: {} {:.6} +- {:.2e} ({} seeds)", row.value, row.metric, row.mean, row.stderr, row.seeds);
    }
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| DflError::Config { field: e.path().to_string(), message: e.into_inner().to_string() })
}

#[derive(Serialize)]
struct BoundsReport {
    #[serde(flatten)]
    constants: BoundConstants,
    #[serde(skip_serializing_if = "Option::is_none")]
    gap_bound: Option<Vec<f64>>,
}

fn bounds(params: &Path, horizon: Option<usize>) -> Result<ExitCode> {
    let inputs: BoundInputs = read_json(params)?;
    let constants = compute_constants(&inputs)?;
    let report =
        BoundsReport { gap_bound: horizon.map(|h| (0..=h).map(|k| constants.theorem_bound(k)).collect()), constants };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ControlReport {
    decision: Decision,
    breakdown: Option<ObjectiveBreakdown>,
}

fn control(snapshot: &Path) -> Result<ExitCode> {
    let input: ProblemInput = read_json(snapshot)?;
    let decision = solve_p(&input)?;
    let breakdown = objective_breakdown(&input, decision.tau, decision.alpha);
    println!("{}", serde_json::to_string_pretty(&ControlReport { decision, breakdown })?);
    Ok(ExitCode::SUCCESS)
}

fn validate(suite: &str, seeds: usize, offset: u64) -> Result<ExitCode> {
    if !SUITES.contains(&suite) {
        return Err(DflError::InvalidInput(format!("unknown suite `{suite}`; expected one of {}", SUITES.join(", "))));
    }
    let checks = run_suite(suite, &SuiteOptions { seeds, seed: offset })?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{} {} slack={:.6e}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.slack);
    }
    println!("{suite}: {} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
