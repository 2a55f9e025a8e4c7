//! Monte Carlo experiment orchestration: seed management, the run loop for
//! both experiments, deterministic aggregation, and export.
//!
//! Determinism contract: with a scripted or replay backend and a fixed
//! master seed, repeated invocations produce bit-identical trajectories,
//! transcripts, and aggregates, at any parallelism level. Each run owns its
//! environment, memories, clients, and RNG stream; results are joined in
//! run-index order.

use crate::agent::{AuctionLlmAgent, AuctionObjective, BatteryLlmAgent, IclExampleSet, Persona};
use crate::auction::{self, AuctionConfig, BiddingAgent, RoundResult};
use crate::battery::{self, DayState, DispatchAction, ScenarioConfig, TrajectoryDay};
use crate::bidding::{StraightforwardAgent, ValuationFile};
use crate::dispatch::{self, PolicyTable};
use crate::llm::{
    ChatExchange, HttpBackend, LlmClient, ModelConfig, ScriptedBackend,
};
use crate::money::Money;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("series has no runs to export")]
    EmptySeries,
    #[error("run {run} failed: {message}")]
    RunFailed { run: u32, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Pure child-seed derivation (splitmix64 finalizer). Injective in the run
/// index for a fixed master seed.
pub fn child_seed(master: u64, run_index: u64) -> u64 {
    let mut z = master.wrapping_add(run_index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Backend selection shared by both experiments. Scripted and replay
/// backends are rebuilt fresh for every (run, agent) pair so runs cannot
/// interfere with each other through shared script state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum BackendConfig {
    Scripted {
        #[serde(default)]
        responses: Vec<String>,
        /// Optional JSON file holding an array of response strings,
        /// appended after the inline responses.
        #[serde(default)]
        script_path: Option<String>,
        #[serde(default = "default_true")]
        cycle: bool,
    },
    Replay {
        transcript_path: String,
    },
    Live {
        model: ModelConfig,
    },
}

fn default_true() -> bool {
    true
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Scripted {
            responses: Vec::new(),
            script_path: None,
            cycle: true,
        }
    }
}

/// Load a JSON array of response strings.
pub fn load_script(path: &Path) -> Result<Vec<String>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

impl BackendConfig {
    pub fn make_client(&self) -> Result<LlmClient, HarnessError> {
        match self {
            BackendConfig::Scripted {
                responses,
                script_path,
                cycle,
            } => {
                let mut all = responses.clone();
                if let Some(path) = script_path {
                    all.extend(load_script(Path::new(path))?);
                }
                let backend = if *cycle && !all.is_empty() {
                    ScriptedBackend::cycling(all)
                } else {
                    ScriptedBackend::ordered(all)
                };
                Ok(LlmClient::scripted(backend, 1))
            }
            BackendConfig::Replay { transcript_path } => {
                let text = std::fs::read_to_string(transcript_path)?;
                let exchanges = crate::llm::read_transcript(&text)?;
                Ok(LlmClient::scripted(
                    ScriptedBackend::from_transcript(&exchanges),
                    1,
                ))
            }
            BackendConfig::Live { model } => Ok(LlmClient::new(
                Box::new(HttpBackend::new(model.clone())),
                model,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    Battery(BatteryExperiment),
    Auction(AuctionExperiment),
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        match self {
            ExperimentConfig::Battery(b) => b.validate(),
            ExperimentConfig::Auction(a) => a.validate(),
        }
    }

    pub fn master_seed(&self) -> u64 {
        match self {
            ExperimentConfig::Battery(b) => b.master_seed,
            ExperimentConfig::Auction(a) => a.master_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryExperiment {
    pub scenario: ScenarioConfig,
    pub agents: Vec<BatteryAgentSpec>,
    #[serde(default = "default_battery_runs")]
    pub runs: u32,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_battery_runs() -> u32 {
    40
}

fn default_auction_runs() -> u32 {
    30
}

fn default_parallelism() -> usize {
    1
}

/// One aggregation group: a policy binding plus the labels it is reported
/// under in the exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryAgentSpec {
    /// Reported in the `persona` export column (baselines use their name).
    pub label: String,
    /// Reported in the `condition` export column, e.g. "baseline",
    /// "no-icl", "icl-blackout".
    pub condition: String,
    pub policy: BatteryPolicySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BatteryPolicySpec {
    Dp,
    Greedy,
    Hold,
    Llm {
        persona: String,
        #[serde(default)]
        icl_examples: Vec<String>,
    },
}

fn resolve_persona(name: &str) -> Result<Persona, HarnessError> {
    match name.to_lowercase().as_str() {
        "thinker" => Ok(Persona::thinker()),
        "realist" => Ok(Persona::realist()),
        "feeler" => Ok(Persona::feeler()),
        other => Err(HarnessError::InvalidConfig(format!(
            "unknown persona {other:?} (expected thinker, realist, or feeler)"
        ))),
    }
}

impl BatteryExperiment {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.scenario
            .validate()
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        if self.runs < 1 {
            return Err(HarnessError::InvalidConfig("runs must be >= 1".into()));
        }
        if self.agents.is_empty() {
            return Err(HarnessError::InvalidConfig("no agents configured".into()));
        }
        if self.parallelism < 1 {
            return Err(HarnessError::InvalidConfig(
                "parallelism must be >= 1".into(),
            ));
        }
        for spec in &self.agents {
            if let BatteryPolicySpec::Llm { persona, icl_examples } = &spec.policy {
                resolve_persona(persona)?;
                if !icl_examples.is_empty() {
                    IclExampleSet {
                        examples: icl_examples.clone(),
                        source: spec.label.clone(),
                    }
                    .validate()
                    .map_err(|e| {
                        HarnessError::InvalidConfig(format!(
                            "bad ICL example for {}: {e}",
                            spec.label
                        ))
                    })?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionExperiment {
    pub auction: AuctionConfig,
    pub valuations: ValuationFile,
    pub agents: Vec<AuctionAgentSpec>,
    #[serde(default = "default_auction_runs")]
    pub runs: u32,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionAgentSpec {
    pub name: String,
    /// Reported in the `agent_type` export column.
    pub agent_type: String,
    pub strategy: AuctionStrategySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AuctionStrategySpec {
    Straightforward,
    Llm { objective: AuctionObjective },
}

impl AuctionExperiment {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.auction
            .validate()
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        if self.runs < 1 {
            return Err(HarnessError::InvalidConfig("runs must be >= 1".into()));
        }
        if self.agents.is_empty() {
            return Err(HarnessError::InvalidConfig("no agents configured".into()));
        }
        if self.parallelism < 1 {
            return Err(HarnessError::InvalidConfig(
                "parallelism must be >= 1".into(),
            ));
        }
        for spec in &self.agents {
            if !self.valuations.contains_key(&spec.name) {
                return Err(HarnessError::InvalidConfig(format!(
                    "agent {} has no valuation profile",
                    spec.name
                )));
            }
        }
        if !self.auction.bidders.is_empty() {
            let names: Vec<&str> = self.agents.iter().map(|a| a.name.as_str()).collect();
            let listed: Vec<&str> = self.auction.bidders.iter().map(String::as_str).collect();
            if names != listed {
                return Err(HarnessError::InvalidConfig(
                    "auction.bidders must match the agent roster order".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Stable digest of the experiment semantics. Parallelism is an execution
/// detail with no effect on results, so it is normalized out before
/// hashing.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let mut canonical = config.clone();
    match &mut canonical {
        ExperimentConfig::Battery(b) => b.parallelism = 1,
        ExperimentConfig::Auction(a) => a.parallelism = 1,
    }
    let text = serde_json::to_string(&canonical).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    format!("{:x}", hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMetadata {
    pub config_hash: String,
    pub master_seed: u64,
    pub runs: u32,
    /// Runs that fell back to a default action at least once (parse
    /// failures are included in aggregates but flagged, not dropped).
    pub defaulted_runs: u32,
    pub failed_runs: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub git_revision: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryDayStat {
    pub day: u32,
    /// Mean state of charge after acting, in kWh.
    pub mean_soc: f64,
    pub sd_soc: f64,
    /// Mean accumulated reward through this day, in currency units.
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryGroupSeries {
    pub persona: String,
    pub condition: String,
    pub runs: u32,
    pub days: Vec<BatteryDayStat>,
    pub mean_total_reward: f64,
    pub defaulted_runs: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionRoundStat {
    pub round: u32,
    pub item: String,
    pub agent_type: String,
    /// Mean submitted bid in currency units; absent when no agent of this
    /// type bid on this item in this round of any run (runs that had
    /// already terminated contribute nothing).
    pub mean_bid: Option<f64>,
    pub sd_bid: Option<f64>,
    pub samples: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalStat {
    pub item: String,
    pub mean_price: f64,
    /// Terminal price (display string) -> run count.
    pub price_frequencies: BTreeMap<String, u32>,
    /// Winner name (or "none") -> run count.
    pub allocation_frequencies: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum AggregateSeries {
    Battery {
        metadata: SeriesMetadata,
        groups: Vec<BatteryGroupSeries>,
    },
    Auction {
        metadata: SeriesMetadata,
        rows: Vec<AuctionRoundStat>,
        terminal: Vec<TerminalStat>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub series: AggregateSeries,
    pub failures: Vec<RunFailure>,
}

#[derive(Debug, Clone, Serialize)]
struct TrajectoryLine<'a> {
    run: u32,
    persona: &'a str,
    condition: &'a str,
    #[serde(flatten)]
    day: &'a TrajectoryDay,
}

#[derive(Debug, Clone, Serialize)]
struct TranscriptLine<'a> {
    run: u32,
    agent: &'a str,
    #[serde(flatten)]
    exchange: &'a ChatExchange,
}

#[derive(Debug, Clone, Serialize)]
struct AuctionRoundLine<'a> {
    run: u32,
    #[serde(flatten)]
    round: &'a RoundResult,
}

struct BatteryAgentRun {
    days: Vec<TrajectoryDay>,
    total: Money,
    defaults: u32,
    transcript: Vec<ChatExchange>,
}

struct BatteryRunOutput {
    index: u32,
    agents: Vec<BatteryAgentRun>,
}

fn run_battery_day_loop<F>(
    scenario: &ScenarioConfig,
    path: &[Money],
    mut decide: F,
) -> Result<(Vec<TrajectoryDay>, Money), HarnessError>
where
    F: FnMut(&DayState) -> Result<DispatchAction, HarnessError>,
{
    let config = &scenario.battery;
    let mut soc = config.initial_soc;
    let mut total = Money::ZERO;
    let mut days = Vec::with_capacity(path.len());
    for (i, price) in path.iter().enumerate() {
        let day = i as u32 + 1;
        let state = DayState {
            day,
            price: *price,
            soc,
            blackout: scenario.intervention.is_blackout(day),
        };
        let mut action = decide(&state)?;
        if !battery::is_feasible(&state, action, config) {
            log::warn!("coercing infeasible {action:?} to Hold on day {day}");
            action = DispatchAction::Hold;
        }
        let (next_soc, reward) =
            battery::step(&state, action, config).expect("Hold is always feasible");
        total += reward;
        days.push(TrajectoryDay {
            day,
            price: *price,
            soc_before: soc,
            action,
            reward,
            soc_after: next_soc,
            blackout: state.blackout,
        });
        soc = next_soc;
    }
    total += battery::terminal_settlement(soc);
    Ok((days, total))
}

fn run_battery_agent(
    spec: &BatteryAgentSpec,
    scenario: &ScenarioConfig,
    dp_policy: Option<&PolicyTable>,
    backend: &BackendConfig,
    path: &[Money],
) -> Result<BatteryAgentRun, HarnessError> {
    let config = &scenario.battery;
    let model = &scenario.price_model;
    match &spec.policy {
        BatteryPolicySpec::Dp => {
            let policy = dp_policy.expect("dp policy precomputed");
            let (days, total) = run_battery_day_loop(scenario, path, |state| {
                dispatch::dp_action(policy, state.day, state.soc, state.price)
                    .map_err(|e| HarnessError::InvalidConfig(e.to_string()))
            })?;
            Ok(BatteryAgentRun {
                days,
                total,
                defaults: 0,
                transcript: Vec::new(),
            })
        }
        BatteryPolicySpec::Greedy => {
            let (days, total) = run_battery_day_loop(scenario, path, |state| {
                Ok(dispatch::greedy_action(state.price, state.soc, config, model))
            })?;
            Ok(BatteryAgentRun {
                days,
                total,
                defaults: 0,
                transcript: Vec::new(),
            })
        }
        BatteryPolicySpec::Hold => {
            let (days, total) =
                run_battery_day_loop(scenario, path, |_| Ok(DispatchAction::Hold))?;
            Ok(BatteryAgentRun {
                days,
                total,
                defaults: 0,
                transcript: Vec::new(),
            })
        }
        BatteryPolicySpec::Llm {
            persona,
            icl_examples,
        } => {
            let client = Arc::new(backend.make_client()?);
            let icl = if icl_examples.is_empty() {
                None
            } else {
                Some(IclExampleSet {
                    examples: icl_examples.clone(),
                    source: spec.label.clone(),
                })
            };
            let mut agent = BatteryLlmAgent::new(
                resolve_persona(persona)?,
                icl,
                client.clone(),
                config.clone(),
                model.clone(),
            );
            let mut defaults = 0u32;
            let (days, total) = run_battery_day_loop(scenario, path, |state| {
                let (action, record) = agent
                    .act(state)
                    .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
                let applied = if battery::is_feasible(state, action, config) {
                    action
                } else {
                    DispatchAction::Hold
                };
                match record {
                    Some(record) => {
                        let (next_soc, reward) =
                            battery::step(state, applied, config).expect("applied is feasible");
                        let summary = format!(
                            "Day {}: price ${}, action {applied:?}, reward ${}, SoC now {} kWh.",
                            state.day,
                            state.price,
                            reward,
                            next_soc.as_kwh(),
                        );
                        crate::agent::update_memory(&mut agent.memory, &record, &summary);
                    }
                    None => defaults += 1,
                }
                Ok(action)
            })?;
            Ok(BatteryAgentRun {
                days,
                total,
                defaults,
                transcript: client.transcript(),
            })
        }
    }
}

fn run_battery_once(
    config: &BatteryExperiment,
    dp_policy: Option<&PolicyTable>,
    index: u32,
) -> Result<BatteryRunOutput, HarnessError> {
    let seed = child_seed(config.master_seed, index as u64);
    // common random numbers: one price path per run index, shared by every
    // agent/condition in the roster
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path: Vec<Money> = (0..config.scenario.battery.horizon_days)
        .map(|_| battery::sample_price(&config.scenario.price_model, &mut rng))
        .collect();
    let agents = config
        .agents
        .iter()
        .map(|spec| run_battery_agent(spec, &config.scenario, dp_policy, &config.backend, &path))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BatteryRunOutput { index, agents })
}

fn mean_sd(sum: i128, sum_sq: i128, n: u32, scale: f64) -> (f64, f64) {
    let n_f = n as f64;
    let mean = sum as f64 / n_f;
    let var = (sum_sq as f64 / n_f - mean * mean).max(0.0);
    (mean / scale, var.sqrt() / scale)
}

fn aggregate_battery(
    config: &BatteryExperiment,
    outputs: &[&BatteryRunOutput],
    failures: &[RunFailure],
) -> AggregateSeries {
    let horizon = config.scenario.battery.horizon_days as usize;
    let mut groups = Vec::with_capacity(config.agents.len());
    let mut defaulted_runs_total = 0u32;
    for (gi, spec) in config.agents.iter().enumerate() {
        let mut soc_sum = vec![0i128; horizon];
        let mut soc_sq = vec![0i128; horizon];
        let mut acc_sum = vec![0i128; horizon];
        let mut total_sum = 0i128;
        let mut defaulted = 0u32;
        let n = outputs.len() as u32;
        for output in outputs {
            let run = &output.agents[gi];
            let mut acc = 0i128;
            for (d, day) in run.days.iter().enumerate() {
                let wh = day.soc_after.wh() as i128;
                soc_sum[d] += wh;
                soc_sq[d] += wh * wh;
                acc += day.reward.cents() as i128;
                acc_sum[d] += acc;
            }
            total_sum += run.total.cents() as i128;
            if run.defaults > 0 {
                defaulted += 1;
            }
        }
        let days = (0..horizon)
            .map(|d| {
                let (mean_soc, sd_soc) = mean_sd(soc_sum[d], soc_sq[d], n, 1000.0);
                BatteryDayStat {
                    day: d as u32 + 1,
                    mean_soc,
                    sd_soc,
                    mean_reward: acc_sum[d] as f64 / n as f64 / 100.0,
                }
            })
            .collect();
        defaulted_runs_total = defaulted_runs_total.max(defaulted);
        groups.push(BatteryGroupSeries {
            persona: spec.label.clone(),
            condition: spec.condition.clone(),
            runs: n,
            days,
            mean_total_reward: total_sum as f64 / outputs.len() as f64 / 100.0,
            defaulted_runs: defaulted,
        });
    }
    AggregateSeries::Battery {
        metadata: SeriesMetadata {
            config_hash: config_hash(&ExperimentConfig::Battery(config.clone())),
            master_seed: config.master_seed,
            runs: outputs.len() as u32,
            defaulted_runs: defaulted_runs_total,
            failed_runs: failures.len() as u32,
            git_revision: std::env::var("GIT_REVISION").ok(),
        },
        groups,
    }
}

fn with_pool<T: Send>(
    parallelism: usize,
    runs: u32,
    job: impl Fn(u32) -> T + Send + Sync,
) -> Vec<T> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .expect("thread pool");
    // collect() preserves run-index order, so aggregation sees a
    // deterministic sequence regardless of scheduling
    pool.install(|| (0..runs).into_par_iter().map(job).collect())
}

fn write_jsonl(
    dir: &Path,
    name: &str,
    lines: impl IntoIterator<Item = serde_json::Value>,
) -> Result<(), HarnessError> {
    let mut file = std::fs::File::create(dir.join(name))?;
    for line in lines {
        serde_json::to_writer(&mut file, &line)?;
        writeln!(file)?;
    }
    Ok(())
}

fn write_manifest(
    out: &Path,
    config: &ExperimentConfig,
    failures: &[RunFailure],
) -> Result<(), HarnessError> {
    // The manifest must be reproducible byte for byte, so it records the
    // parallelism-normalized config and carries no wall-clock timing.
    let mut canonical = config.clone();
    match &mut canonical {
        ExperimentConfig::Battery(b) => b.parallelism = 1,
        ExperimentConfig::Auction(a) => a.parallelism = 1,
    }
    let manifest = serde_json::json!({
        "config_hash": config_hash(config),
        "master_seed": config.master_seed(),
        "config": canonical,
        "failures": failures,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Run the battery experiment, optionally writing the run artifacts and
/// aggregate exports under `out`.
pub fn run_battery_experiment(
    config: &BatteryExperiment,
    out: Option<&Path>,
) -> Result<ExperimentResult, HarnessError> {
    config.validate()?;
    let started = std::time::Instant::now();
    let dp_policy = if config
        .agents
        .iter()
        .any(|a| matches!(a.policy, BatteryPolicySpec::Dp))
    {
        let (_, policy) = dispatch::solve_dp(&config.scenario.battery, &config.scenario.price_model)
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        Some(policy)
    } else {
        None
    };

    let results = with_pool(config.parallelism, config.runs, |index| {
        run_battery_once(config, dp_policy.as_ref(), index)
    });

    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for (index, result) in results.iter().enumerate() {
        match result {
            Ok(output) => outputs.push(output),
            Err(err) => failures.push(RunFailure {
                run: index as u32,
                message: err.to_string(),
            }),
        }
    }
    if outputs.is_empty() {
        return Err(HarnessError::RunFailed {
            run: 0,
            message: "every run failed".into(),
        });
    }
    let series = aggregate_battery(config, &outputs, &failures);

    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        for output in &outputs {
            let dir = out.join("runs").join(output.index.to_string());
            std::fs::create_dir_all(&dir)?;
            let mut trajectory = Vec::new();
            let mut transcript = Vec::new();
            for (spec, run) in config.agents.iter().zip(&output.agents) {
                for day in &run.days {
                    trajectory.push(serde_json::to_value(TrajectoryLine {
                        run: output.index,
                        persona: &spec.label,
                        condition: &spec.condition,
                        day,
                    })?);
                }
                for exchange in &run.transcript {
                    transcript.push(serde_json::to_value(TranscriptLine {
                        run: output.index,
                        agent: &spec.label,
                        exchange,
                    })?);
                }
            }
            write_jsonl(&dir, "trajectory.jsonl", trajectory)?;
            write_jsonl(&dir, "transcript.jsonl", transcript)?;
        }
        export(&series, ExportFormat::Csv, &out.join("aggregate.csv"))?;
        export(&series, ExportFormat::Json, &out.join("aggregate.json"))?;
        write_manifest(out, &ExperimentConfig::Battery(config.clone()), &failures)?;
    }

    log::info!("experiment finished in {} ms", started.elapsed().as_millis());
    Ok(ExperimentResult { series, failures })
}

struct AuctionRunOutput {
    index: u32,
    outcome: auction::AuctionOutcome,
    transcripts: Vec<(String, Vec<ChatExchange>)>,
}

fn run_auction_once(
    config: &AuctionExperiment,
    index: u32,
) -> Result<AuctionRunOutput, HarnessError> {
    let seed = child_seed(config.master_seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agents: Vec<Box<dyn BiddingAgent>> = Vec::with_capacity(config.agents.len());
    let mut clients: Vec<(String, Arc<LlmClient>)> = Vec::new();
    for spec in &config.agents {
        let profile = config.valuations[&spec.name].clone();
        match &spec.strategy {
            AuctionStrategySpec::Straightforward => agents.push(Box::new(StraightforwardAgent {
                id: spec.name.clone(),
                profile,
            })),
            AuctionStrategySpec::Llm { objective } => {
                let client = Arc::new(config.backend.make_client()?);
                clients.push((spec.name.clone(), client.clone()));
                agents.push(Box::new(AuctionLlmAgent::new(
                    spec.name.clone(),
                    *objective,
                    profile,
                    client,
                )));
            }
        }
    }
    let outcome = auction::run_auction(
        &mut agents,
        config.auction.items.clone(),
        config.auction.max_rounds,
        &mut rng,
    )
    .map_err(|e| HarnessError::RunFailed {
        run: index,
        message: e.to_string(),
    })?;
    let transcripts = clients
        .into_iter()
        .map(|(name, client)| (name, client.transcript()))
        .collect();
    Ok(AuctionRunOutput {
        index,
        outcome,
        transcripts,
    })
}

fn aggregate_auction(
    config: &AuctionExperiment,
    outputs: &[&AuctionRunOutput],
    failures: &[RunFailure],
) -> AggregateSeries {
    let type_of: BTreeMap<&str, &str> = config
        .agents
        .iter()
        .map(|a| (a.name.as_str(), a.agent_type.as_str()))
        .collect();
    let mut agent_types: Vec<&str> = type_of.values().copied().collect();
    agent_types.sort_unstable();
    agent_types.dedup();
    let item_names: Vec<&str> = config.auction.items.iter().map(|i| i.name.as_str()).collect();
    let max_rounds = outputs
        .iter()
        .map(|o| o.outcome.rounds.len())
        .max()
        .unwrap_or(0) as u32;

    // (round, item, type) -> submitted bid amounts, filled in run order
    let mut samples: BTreeMap<(u32, &str, &str), Vec<i64>> = BTreeMap::new();
    let mut defaulted = 0u32;
    for output in outputs {
        for round in &output.outcome.rounds {
            for (item, result) in &round.items {
                for bid in result
                    .accepted
                    .iter()
                    .chain(result.rejected.iter().map(|(b, _)| b))
                {
                    let item_name = item_names
                        .iter()
                        .find(|n| **n == item.as_str())
                        .expect("known item");
                    if let Some(agent_type) = type_of.get(bid.bidder.as_str()) {
                        samples
                            .entry((round.round, item_name, agent_type))
                            .or_default()
                            .push(bid.amount.cents());
                    }
                }
            }
        }
        // a run is flagged when an LLM agent produced no record in a round
        // where it was queried (parse fallback); detectable as a queried
        // transcript with more exchanges than records for that agent
        let llm_agents: Vec<&str> = output.transcripts.iter().map(|(n, _)| n.as_str()).collect();
        for name in llm_agents {
            let rounds_played = output.outcome.rounds.len() as u32;
            let records = output
                .outcome
                .records
                .iter()
                .filter(|(_, agent, _)| agent == name)
                .count() as u32;
            if records < rounds_played {
                defaulted += 1;
                break;
            }
        }
    }

    let mut rows = Vec::new();
    for round in 1..=max_rounds {
        for item in &item_names {
            for agent_type in &agent_types {
                let values = samples
                    .get(&(round, item, agent_type))
                    .map(Vec::as_slice)
                    .unwrap_or(&[]);
                let n = values.len() as u32;
                let (mean_bid, sd_bid) = if n == 0 {
                    (None, None)
                } else {
                    let sum: i128 = values.iter().map(|v| *v as i128).sum();
                    let sum_sq: i128 = values.iter().map(|v| (*v as i128) * (*v as i128)).sum();
                    let (mean, sd) = mean_sd(sum, sum_sq, n, 100.0);
                    (Some(mean), Some(sd))
                };
                rows.push(AuctionRoundStat {
                    round,
                    item: item.to_string(),
                    agent_type: agent_type.to_string(),
                    mean_bid,
                    sd_bid,
                    samples: n,
                });
            }
        }
    }

    let terminal = item_names
        .iter()
        .map(|item| {
            let mut price_sum = 0i128;
            let mut price_frequencies = BTreeMap::new();
            let mut allocation_frequencies = BTreeMap::new();
            for output in outputs {
                let price = output.outcome.prices[*item];
                price_sum += price.cents() as i128;
                *price_frequencies.entry(price.to_string()).or_insert(0) += 1;
                let winner = output.outcome.allocation[*item]
                    .clone()
                    .unwrap_or_else(|| "none".to_string());
                *allocation_frequencies.entry(winner).or_insert(0) += 1;
            }
            TerminalStat {
                item: item.to_string(),
                mean_price: price_sum as f64 / outputs.len() as f64 / 100.0,
                price_frequencies,
                allocation_frequencies,
            }
        })
        .collect();

    AggregateSeries::Auction {
        metadata: SeriesMetadata {
            config_hash: config_hash(&ExperimentConfig::Auction(config.clone())),
            master_seed: config.master_seed,
            runs: outputs.len() as u32,
            defaulted_runs: defaulted,
            failed_runs: failures.len() as u32,
            git_revision: std::env::var("GIT_REVISION").ok(),
        },
        rows,
        terminal,
    }
}

/// Run the auction experiment, optionally writing run artifacts and
/// aggregate exports under `out`.
pub fn run_auction_experiment(
    config: &AuctionExperiment,
    out: Option<&Path>,
) -> Result<ExperimentResult, HarnessError> {
    config.validate()?;
    let started = std::time::Instant::now();
    let results = with_pool(config.parallelism, config.runs, |index| {
        run_auction_once(config, index)
    });

    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for (index, result) in results.iter().enumerate() {
        match result {
            Ok(output) => outputs.push(output),
            Err(err) => failures.push(RunFailure {
                run: index as u32,
                message: err.to_string(),
            }),
        }
    }
    if outputs.is_empty() {
        return Err(HarnessError::RunFailed {
            run: 0,
            message: "every run failed".into(),
        });
    }
    let series = aggregate_auction(config, &outputs, &failures);

    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        for output in &outputs {
            let dir = out.join("runs").join(output.index.to_string());
            std::fs::create_dir_all(&dir)?;
            let trajectory = output
                .outcome
                .rounds
                .iter()
                .map(|round| {
                    serde_json::to_value(AuctionRoundLine {
                        run: output.index,
                        round,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            write_jsonl(&dir, "trajectory.jsonl", trajectory)?;
            let mut transcript = Vec::new();
            for (agent, exchanges) in &output.transcripts {
                for exchange in exchanges {
                    transcript.push(serde_json::to_value(TranscriptLine {
                        run: output.index,
                        agent,
                        exchange,
                    })?);
                }
            }
            write_jsonl(&dir, "transcript.jsonl", transcript)?;
        }
        export(&series, ExportFormat::Csv, &out.join("aggregate.csv"))?;
        export(&series, ExportFormat::Json, &out.join("aggregate.json"))?;
        write_manifest(out, &ExperimentConfig::Auction(config.clone()), &failures)?;
    }

    log::info!("experiment finished in {} ms", started.elapsed().as_millis());
    Ok(ExperimentResult { series, failures })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(format!("unknown export format {other:?}")),
        }
    }
}

#[derive(Debug, Serialize)]
struct BatteryCsvRow<'a> {
    day: u32,
    persona: &'a str,
    condition: &'a str,
    mean_soc: f64,
    sd_soc: f64,
    mean_reward: f64,
}

#[derive(Debug, Serialize)]
struct AuctionCsvRow<'a> {
    round: u32,
    item: &'a str,
    agent_type: &'a str,
    mean_bid: Option<f64>,
    sd_bid: Option<f64>,
}

/// Export a series. JSON is the full self-describing series (metadata
/// included); CSV is the flat plot-data table.
pub fn export(
    series: &AggregateSeries,
    format: ExportFormat,
    path: &Path,
) -> Result<(), HarnessError> {
    let empty = match series {
        AggregateSeries::Battery { metadata, groups } => {
            metadata.runs == 0 || groups.is_empty()
        }
        AggregateSeries::Auction { metadata, .. } => metadata.runs == 0,
    };
    if empty {
        return Err(HarnessError::EmptySeries);
    }
    match format {
        ExportFormat::Json => {
            std::fs::write(path, serde_json::to_string_pretty(series)?)?;
        }
        ExportFormat::Csv => {
            let mut writer = csv::Writer::from_path(path)?;
            match series {
                AggregateSeries::Battery { groups, .. } => {
                    for group in groups {
                        for day in &group.days {
                            writer.serialize(BatteryCsvRow {
                                day: day.day,
                                persona: &group.persona,
                                condition: &group.condition,
                                mean_soc: day.mean_soc,
                                sd_soc: day.sd_soc,
                                mean_reward: day.mean_reward,
                            })?;
                        }
                    }
                }
                AggregateSeries::Auction { rows, .. } => {
                    for row in rows {
                        writer.serialize(AuctionCsvRow {
                            round: row.round,
                            item: &row.item,
                            agent_type: &row.agent_type,
                            mean_bid: row.mean_bid,
                            sd_bid: row.sd_bid,
                        })?;
                    }
                }
            }
            writer.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::{BatteryConfig, Intervention, PriceModel};

    fn hold_spec(label: &str) -> BatteryAgentSpec {
        BatteryAgentSpec {
            label: label.into(),
            condition: "baseline".into(),
            policy: BatteryPolicySpec::Hold,
        }
    }

    fn scenario() -> ScenarioConfig {
        ScenarioConfig {
            price_model: PriceModel::default_two_level(),
            battery: BatteryConfig::default_home(),
            intervention: Intervention::day_ten(),
            seed: 0,
        }
    }

    fn battery_experiment(agents: Vec<BatteryAgentSpec>, runs: u32) -> BatteryExperiment {
        BatteryExperiment {
            scenario: scenario(),
            agents,
            runs,
            master_seed: 11,
            backend: BackendConfig::default(),
            parallelism: 1,
        }
    }

    #[test]
    fn child_seed_is_collision_free_over_2_16() {
        let mut seen = std::collections::HashSet::new();
        for index in 0..(1u64 << 16) {
            assert!(seen.insert(child_seed(42, index)), "collision at {index}");
        }
        assert_eq!(child_seed(42, 7), child_seed(42, 7));
        assert_ne!(child_seed(42, 7), child_seed(43, 7));
    }

    #[test]
    fn hold_baseline_keeps_soc_flat_with_zero_sd() {
        let config = battery_experiment(vec![hold_spec("hold")], 8);
        let result = run_battery_experiment(&config, None).unwrap();
        let AggregateSeries::Battery { groups, .. } = &result.series else {
            panic!("battery series expected")
        };
        for day in &groups[0].days {
            assert_eq!(day.mean_soc, 5.0);
            assert_eq!(day.sd_soc, 0.0);
            assert_eq!(day.mean_reward, 0.0);
        }
    }

    #[test]
    fn repeated_invocations_and_parallelism_levels_agree() {
        let mut config = battery_experiment(
            vec![
                hold_spec("hold"),
                BatteryAgentSpec {
                    label: "greedy".into(),
                    condition: "baseline".into(),
                    policy: BatteryPolicySpec::Greedy,
                },
            ],
            12,
        );
        let a = run_battery_experiment(&config, None).unwrap();
        let b = run_battery_experiment(&config, None).unwrap();
        assert_eq!(a.series, b.series);
        config.parallelism = 8;
        let c = run_battery_experiment(&config, None).unwrap();
        assert_eq!(a.series, c.series);
    }

    #[test]
    fn llm_agent_with_empty_script_defaults_to_hold_and_is_flagged() {
        let config = battery_experiment(
            vec![BatteryAgentSpec {
                label: "Feeler".into(),
                condition: "no-icl".into(),
                policy: BatteryPolicySpec::Llm {
                    persona: "feeler".into(),
                    icl_examples: vec![],
                },
            }],
            3,
        );
        let result = run_battery_experiment(&config, None).unwrap();
        let AggregateSeries::Battery { groups, metadata } = &result.series else {
            panic!("battery series expected")
        };
        assert_eq!(groups[0].defaulted_runs, 3);
        assert_eq!(metadata.defaulted_runs, 3);
        for day in &groups[0].days {
            assert_eq!(day.mean_soc, 5.0);
        }
    }

    #[test]
    fn poisoned_llm_agent_does_not_perturb_baseline_group() {
        let baseline_only = battery_experiment(vec![hold_spec("hold")], 6);
        let with_poison = battery_experiment(
            vec![
                hold_spec("hold"),
                BatteryAgentSpec {
                    label: "Thinker".into(),
                    condition: "no-icl".into(),
                    policy: BatteryPolicySpec::Llm {
                        persona: "thinker".into(),
                        icl_examples: vec![],
                    },
                },
            ],
            6,
        );
        let a = run_battery_experiment(&baseline_only, None).unwrap();
        let b = run_battery_experiment(&with_poison, None).unwrap();
        let AggregateSeries::Battery { groups: ga, .. } = &a.series else {
            panic!()
        };
        let AggregateSeries::Battery { groups: gb, .. } = &b.series else {
            panic!()
        };
        assert_eq!(ga[0].days, gb[0].days);
    }

    #[test]
    fn aggregation_is_linear_in_run_sets() {
        // means over 2n runs equal the average of two disjoint n-run means
        let first = BatteryExperiment {
            master_seed: 5,
            ..battery_experiment(vec![hold_spec("hold")], 4)
        };
        let doubled = BatteryExperiment {
            runs: 8,
            ..first.clone()
        };
        let a = run_battery_experiment(&first, None).unwrap();
        let b = run_battery_experiment(&doubled, None).unwrap();
        let AggregateSeries::Battery { groups: ga, .. } = &a.series else {
            panic!()
        };
        let AggregateSeries::Battery { groups: gb, .. } = &b.series else {
            panic!()
        };
        // hold trajectories are constant, so every subset has the same mean
        assert_eq!(ga[0].days[0].mean_soc, gb[0].days[0].mean_soc);
    }

    fn table1_auction_experiment(runs: u32) -> AuctionExperiment {
        AuctionExperiment {
            auction: AuctionConfig {
                items: vec![
                    auction::Item {
                        name: "Product A".into(),
                        start_price: Money::ZERO,
                        increment: Money(100),
                    },
                    auction::Item {
                        name: "Product B".into(),
                        start_price: Money::ZERO,
                        increment: Money(100),
                    },
                ],
                bidders: vec![],
                max_rounds: 100,
                seed: 0,
            },
            valuations: crate::bidding::table1_valuations(),
            agents: vec![
                AuctionAgentSpec {
                    name: "Bidder 1".into(),
                    agent_type: "straightforward".into(),
                    strategy: AuctionStrategySpec::Straightforward,
                },
                AuctionAgentSpec {
                    name: "Bidder 2".into(),
                    agent_type: "straightforward".into(),
                    strategy: AuctionStrategySpec::Straightforward,
                },
            ],
            runs,
            master_seed: 21,
            backend: BackendConfig::default(),
            parallelism: 1,
        }
    }

    #[test]
    fn table1_straightforward_experiment_allocates_efficiently() {
        let config = table1_auction_experiment(30);
        let result = run_auction_experiment(&config, None).unwrap();
        let AggregateSeries::Auction { terminal, metadata, .. } = &result.series else {
            panic!("auction series expected")
        };
        assert_eq!(metadata.runs, 30);
        let a = terminal.iter().find(|t| t.item == "Product A").unwrap();
        let b = terminal.iter().find(|t| t.item == "Product B").unwrap();
        assert_eq!(a.allocation_frequencies["Bidder 2"], 30);
        assert_eq!(b.allocation_frequencies["Bidder 1"], 30);
        assert!(a.mean_price >= 4.0 && a.mean_price <= 5.0, "{}", a.mean_price);
        assert!(b.mean_price >= 4.0 && b.mean_price <= 5.0, "{}", b.mean_price);
    }

    #[test]
    fn auction_experiment_is_deterministic_across_parallelism() {
        let mut config = table1_auction_experiment(10);
        let a = run_auction_experiment(&config, None).unwrap();
        config.parallelism = 8;
        let b = run_auction_experiment(&config, None).unwrap();
        assert_eq!(a.series, b.series);
    }

    #[test]
    fn single_agent_auction_flattens_after_round_one() {
        let mut config = table1_auction_experiment(5);
        config.agents.truncate(1);
        let result = run_auction_experiment(&config, None).unwrap();
        let AggregateSeries::Auction { rows, .. } = &result.series else {
            panic!()
        };
        // round 1 establishes the standing bids; round 2 repeats nothing
        // new, so the only bid samples are in round 1
        for row in rows {
            if row.round > 1 {
                assert_eq!(row.samples, 0);
                assert!(row.mean_bid.is_none());
            }
        }
    }

    #[test]
    fn export_round_trips_and_is_byte_stable() {
        let config = battery_experiment(vec![hold_spec("hold")], 3);
        let result = run_battery_experiment(&config, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("agg.csv");
        let json_path = dir.path().join("agg.json");
        export(&result.series, ExportFormat::Csv, &csv_path).unwrap();
        export(&result.series, ExportFormat::Json, &json_path).unwrap();
        let csv1 = std::fs::read(&csv_path).unwrap();
        let json1 = std::fs::read(&json_path).unwrap();
        export(&result.series, ExportFormat::Csv, &csv_path).unwrap();
        export(&result.series, ExportFormat::Json, &json_path).unwrap();
        assert_eq!(csv1, std::fs::read(&csv_path).unwrap());
        assert_eq!(json1, std::fs::read(&json_path).unwrap());

        let text = String::from_utf8(csv1).unwrap();
        assert!(text.starts_with("day,persona,condition,mean_soc,sd_soc,mean_reward"));
        assert_eq!(text.lines().count(), 1 + 20);

        let parsed: AggregateSeries =
            serde_json::from_str(&String::from_utf8(json1).unwrap()).unwrap();
        assert_eq!(parsed, result.series);
    }

    #[test]
    fn export_refuses_empty_series() {
        let series = AggregateSeries::Battery {
            metadata: SeriesMetadata {
                config_hash: "x".into(),
                master_seed: 0,
                runs: 0,
                defaulted_runs: 0,
                failed_runs: 0,
                git_revision: None,
            },
            groups: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            export(&series, ExportFormat::Csv, &dir.path().join("x.csv")),
            Err(HarnessError::EmptySeries)
        ));
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut config = battery_experiment(vec![hold_spec("hold")], 0);
        assert!(config.validate().is_err());
        config.runs = 1;
        config.agents.clear();
        assert!(config.validate().is_err());
        config.agents = vec![BatteryAgentSpec {
            label: "x".into(),
            condition: "c".into(),
            policy: BatteryPolicySpec::Llm {
                persona: "nobody".into(),
                icl_examples: vec![],
            },
        }];
        assert!(config.validate().is_err());

        let mut auction = table1_auction_experiment(5);
        auction.agents[0].name = "Unknown Bidder".into();
        assert!(auction.validate().is_err());
    }

    #[test]
    fn output_directory_layout_is_written() {
        let config = battery_experiment(vec![hold_spec("hold")], 2);
        let dir = tempfile::tempdir().unwrap();
        run_battery_experiment(&config, Some(dir.path())).unwrap();
        assert!(dir.path().join("runs/0/trajectory.jsonl").exists());
        assert!(dir.path().join("runs/1/transcript.jsonl").exists());
        assert!(dir.path().join("aggregate.csv").exists());
        assert!(dir.path().join("aggregate.json").exists());
        assert!(dir.path().join("manifest.json").exists());
    }
}
