//! Operator entry point: solve DP tables, run experiments, validate
//! configs, export aggregates, and replay recorded sessions.
//!
//! Progress and diagnostics go to standard error; machine-readable
//! artifacts are written only under `--out`. Exit codes: 0 success,
//! 1 domain error, 2 usage error.

use clap::{Args, Parser, Subcommand};
use energymkt::auction::AuctionConfig;
use energymkt::battery::ScenarioConfig;
use energymkt::bidding::ValuationFile;
use energymkt::dispatch;
use energymkt::harness::{
    self, AggregateSeries, BackendConfig, ExperimentConfig, ExperimentResult, ExportFormat,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "energymkt",
    version,
    about = "Energy-market decision testbed: battery dispatch and simultaneous ascending auctions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the battery dispatch DP and write value/policy tables.
    DpSolve {
        /// Scenario config JSON (price model, battery, intervention).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for value_table.json and policy_table.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the battery dispatch experiment.
    BatteryRun(RunArgs),
    /// Run the auction experiment.
    AuctionRun(RunArgs),
    /// Parse and validate a config file (experiment, scenario, auction, or
    /// valuation schema).
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Convert a previously written aggregate.json to CSV or JSON.
    Export {
        /// Path to an aggregate.json produced by a run.
        #[arg(long)]
        input: PathBuf,
        /// csv or json.
        #[arg(long)]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run an experiment against recorded transcripts.
    Replay {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Transcript JSONL recorded by a previous run.
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for run artifacts and aggregates.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the backend: live, scripted, or replay.
    #[arg(long)]
    backend: Option<String>,
    /// Override the run count.
    #[arg(long)]
    runs: Option<u32>,
    /// Response script (JSON array of strings) for the scripted backend.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Transcript JSONL for the replay backend.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Override the worker pool size.
    #[arg(long)]
    parallelism: Option<usize>,
}

enum CliError {
    Usage(String),
    Domain(String),
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }

    fn domain(message: impl Into<String>) -> Self {
        CliError::Domain(message.into())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::domain(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::domain(format!("{} {} is invalid: {e}", what, path.display())))
}

/// Flags override config values (config-over-flags precedence: a flag, when
/// present, wins; everything else comes from the file).
fn apply_overrides(config: &mut ExperimentConfig, args: &RunArgs) -> Result<(), CliError> {
    let backend = match args.backend.as_deref() {
        None => None,
        Some("scripted") => {
            let script_path = args
                .script
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned());
            let keeps_config_script = script_path.is_none()
                && matches!(
                    backend_of(config),
                    BackendConfig::Scripted { responses, script_path, .. }
                        if !responses.is_empty() || script_path.is_some()
                );
            if script_path.is_none() && !keeps_config_script {
                return Err(CliError::usage(
                    "--backend scripted requires --script PATH (or scripted responses in the config)",
                ));
            }
            if script_path.is_some() {
                Some(BackendConfig::Scripted {
                    responses: Vec::new(),
                    script_path,
                    cycle: true,
                })
            } else {
                None // keep the config's scripted backend as-is
            }
        }
        Some("replay") => {
            let transcript = args.transcript.as_ref().ok_or_else(|| {
                CliError::usage("--backend replay requires --transcript PATH")
            })?;
            Some(BackendConfig::Replay {
                transcript_path: transcript.to_string_lossy().into_owned(),
            })
        }
        Some("live") => {
            if !matches!(backend_of(config), BackendConfig::Live { .. }) {
                return Err(CliError::usage(
                    "--backend live requires model settings in the config's backend section",
                ));
            }
            None
        }
        Some(other) => {
            return Err(CliError::usage(format!(
                "unknown --backend {other:?} (expected live, scripted, or replay)"
            )));
        }
    };

    match config {
        ExperimentConfig::Battery(b) => {
            if let Some(seed) = args.seed {
                b.master_seed = seed;
            }
            if let Some(runs) = args.runs {
                b.runs = runs;
            }
            if let Some(parallelism) = args.parallelism {
                b.parallelism = parallelism;
            }
            if let Some(backend) = backend {
                b.backend = backend;
            }
        }
        ExperimentConfig::Auction(a) => {
            if let Some(seed) = args.seed {
                a.master_seed = seed;
            }
            if let Some(runs) = args.runs {
                a.runs = runs;
            }
            if let Some(parallelism) = args.parallelism {
                a.parallelism = parallelism;
            }
            if let Some(backend) = backend {
                a.backend = backend;
            }
        }
    }
    Ok(())
}

fn backend_of(config: &ExperimentConfig) -> &BackendConfig {
    match config {
        ExperimentConfig::Battery(b) => &b.backend,
        ExperimentConfig::Auction(a) => &a.backend,
    }
}

fn report(result: &ExperimentResult) {
    match &result.series {
        AggregateSeries::Battery { metadata, groups } => {
            eprintln!(
                "battery experiment complete: {} runs, {} groups, {} failed, {} defaulted",
                metadata.runs,
                groups.len(),
                metadata.failed_runs,
                metadata.defaulted_runs
            );
            for group in groups {
                eprintln!(
                    "  {} / {}: mean total reward ${:.2}, terminal mean SoC {:.2} kWh",
                    group.persona,
                    group.condition,
                    group.mean_total_reward,
                    group.days.last().map_or(0.0, |d| d.mean_soc)
                );
            }
        }
        AggregateSeries::Auction { metadata, terminal, .. } => {
            eprintln!(
                "auction experiment complete: {} runs, {} failed, {} defaulted",
                metadata.runs, metadata.failed_runs, metadata.defaulted_runs
            );
            for stat in terminal {
                eprintln!("  {}: mean terminal price ${:.2}", stat.item, stat.mean_price);
            }
        }
    }
    for failure in &result.failures {
        eprintln!("  run {} failed: {}", failure.run, failure.message);
    }
}

fn run_experiment(args: &RunArgs, expect_battery: bool) -> Result<(), CliError> {
    let mut config: ExperimentConfig = read_json(&args.config, "experiment config")?;
    match (&config, expect_battery) {
        (ExperimentConfig::Battery(_), true) | (ExperimentConfig::Auction(_), false) => {}
        (ExperimentConfig::Battery(_), false) => {
            return Err(CliError::usage(
                "config describes a battery experiment; use battery-run",
            ));
        }
        (ExperimentConfig::Auction(_), true) => {
            return Err(CliError::usage(
                "config describes an auction experiment; use auction-run",
            ));
        }
    }
    apply_overrides(&mut config, args)?;
    let out = args.out.as_deref();
    eprintln!(
        "running {} ...",
        if expect_battery { "battery experiment" } else { "auction experiment" }
    );
    let result = match &config {
        ExperimentConfig::Battery(b) => harness::run_battery_experiment(b, out),
        ExperimentConfig::Auction(a) => harness::run_auction_experiment(a, out),
    }
    .map_err(|e| CliError::domain(e.to_string()))?;
    report(&result);
    if let Some(out) = out {
        eprintln!("artifacts written to {}", out.display());
    }
    Ok(())
}

fn dp_solve(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let scenario: ScenarioConfig = read_json(config_path, "scenario config")?;
    scenario
        .validate()
        .map_err(|e| CliError::domain(e.to_string()))?;
    let (values, policy) = dispatch::solve_dp(&scenario.battery, &scenario.price_model)
        .map_err(|e| CliError::domain(e.to_string()))?;
    std::fs::create_dir_all(out).map_err(|e| CliError::domain(e.to_string()))?;
    let write = |name: &str, value: serde_json::Value| -> Result<(), CliError> {
        let path = out.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(&value).expect("serializable"))
            .map_err(|e| CliError::domain(format!("cannot write {}: {e}", path.display())))
    };
    write("value_table.json", values.to_json())?;
    write("policy_table.json", policy.to_json())?;
    eprintln!(
        "solved DP over {} days x {} grid points; tables written to {}",
        scenario.battery.horizon_days,
        scenario.battery.soc_grid().len(),
        out.display()
    );
    Ok(())
}

fn validate_config(path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::domain(format!("cannot read {}: {e}", path.display())))?;

    if let Ok(config) = serde_json::from_str::<ExperimentConfig>(&text) {
        config
            .validate()
            .map_err(|e| CliError::domain(e.to_string()))?;
        eprintln!("OK: experiment config");
        return Ok(());
    }
    if let Ok(scenario) = serde_json::from_str::<ScenarioConfig>(&text) {
        scenario
            .validate()
            .map_err(|e| CliError::domain(e.to_string()))?;
        eprintln!("OK: scenario config");
        return Ok(());
    }
    if let Ok(auction) = serde_json::from_str::<AuctionConfig>(&text) {
        auction
            .validate()
            .map_err(|e| CliError::domain(e.to_string()))?;
        eprintln!("OK: auction config");
        return Ok(());
    }
    if let Ok(valuations) = serde_json::from_str::<ValuationFile>(&text) {
        if !valuations.is_empty() {
            for (bidder, profile) in &valuations {
                profile
                    .validate()
                    .map_err(|e| CliError::domain(format!("{bidder}: {e}")))?;
            }
            eprintln!("OK: valuation file");
            return Ok(());
        }
    }
    Err(CliError::domain(format!(
        "{} does not match any known config schema",
        path.display()
    )))
}

fn export_cmd(input: &Path, format: &str, out: &Path) -> Result<(), CliError> {
    let format: ExportFormat = format
        .parse()
        .map_err(|e: String| CliError::usage(e))?;
    let series: AggregateSeries = read_json(input, "aggregate series")?;
    harness::export(&series, format, out).map_err(|e| CliError::domain(e.to_string()))?;
    eprintln!("exported {} -> {}", input.display(), out.display());
    Ok(())
}

fn replay(
    config_path: &Path,
    transcript: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut config: ExperimentConfig = read_json(config_path, "experiment config")?;
    let backend = BackendConfig::Replay {
        transcript_path: transcript.to_string_lossy().into_owned(),
    };
    match &mut config {
        ExperimentConfig::Battery(b) => {
            b.backend = backend;
            if let Some(seed) = seed {
                b.master_seed = seed;
            }
        }
        ExperimentConfig::Auction(a) => {
            a.backend = backend;
            if let Some(seed) = seed {
                a.master_seed = seed;
            }
        }
    }
    let result = match &config {
        ExperimentConfig::Battery(b) => harness::run_battery_experiment(b, out),
        ExperimentConfig::Auction(a) => harness::run_auction_experiment(a, out),
    }
    .map_err(|e| CliError::domain(e.to_string()))?;
    report(&result);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::DpSolve { config, out } => dp_solve(config, out),
        Command::BatteryRun(args) => run_experiment(args, true),
        Command::AuctionRun(args) => run_experiment(args, false),
        Command::ValidateConfig { config } => validate_config(config),
        Command::Export { input, format, out } => export_cmd(input, format, out),
        Command::Replay {
            config,
            transcript,
            out,
            seed,
        } => replay(config, transcript, out.as_deref(), *seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Domain(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(message)) => {
            eprintln!("usage error: {message}");
            eprintln!("run `energymkt --help` for usage");
            ExitCode::from(2)
        }
    }
}
