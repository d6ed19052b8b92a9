//! `m2`: mine intent-trajectory trees against synthetic GUI environments,
//! recycle and export them, and reproduce the metric and cost tables.
//!
//! Every run writes a manifest (inputs, outputs, config hash, seeds) into
//! its output directory; rerunning a command with the same inputs and seeds
//! reproduces the output files byte for byte. Exit codes: 0 success, 1
//! validation or usage error, 2 runtime failure.

mod logging;
mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use m2_core::agents::HttpChatConfig;
use m2_core::dataset::{
    self, compute_dqa, cost_table_csv, estimate_cost, export_trajectories, metric_table_csv,
    tree_trajectories, ComputePhase, CostLine, CostParams, CostPipeline, DataChannel,
    DatasetError, MetricLine, MinedTrajectory,
};
use m2_core::engine::{ablate, ablation_csv, AblationSpec, EngineError};
use m2_core::recycle::{recycle_backends, RecycleError};
use m2_core::stages::{LoopPlan, LoopReport, StageError};
use m2_core::tree::Stage;
use m2_core::util::canonical_json_pretty;
use m2_core::{
    mine, run_loop, run_recycle, BackendProfile, IntentRecord, IntentTree, MiningConfig,
    NavOracle, RecycleOptions, ScreenGraph, SearchMode,
};

use manifest::RunContext;

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, unreadable or malformed inputs: exit 1.
    Validation(String),
    /// The run itself failed: exit 2.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn invalid(e: impl fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn engine_err(e: EngineError) -> CliError {
    match e {
        EngineError::Validation(m) => CliError::Validation(m),
        other => CliError::Runtime(other.to_string()),
    }
}

fn stage_err(e: StageError) -> CliError {
    match e {
        StageError::Validation(m) => CliError::Validation(m),
        StageError::Json(e) => CliError::Validation(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn recycle_err(e: RecycleError) -> CliError {
    match e {
        RecycleError::Validation(m) => CliError::Validation(m),
        other => CliError::Runtime(other.to_string()),
    }
}

fn dataset_err(e: DatasetError) -> CliError {
    match e {
        DatasetError::Validation(m) | DatasetError::Schema(m) => CliError::Validation(m),
        other => CliError::Runtime(other.to_string()),
    }
}

/// Prints an artifact to stdout. A closed pipe (`m2 ... | head`) is not an
/// error: everything already lives on disk by the time this runs.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let result = out.write_all(text.as_bytes()).and_then(|()| {
        if text.ends_with('\n') {
            Ok(())
        } else {
            out.write_all(b"\n")
        }
    });
    if let Err(e) = result {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            log::warn!("stdout write failed: {e}");
        }
    }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "m2",
    version,
    about = "Mine GUI-agent trajectory trees against synthetic environments"
)]
struct Cli {
    /// Log verbosity on stderr: off | error | warn | info | debug | trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonOpts {
    /// Output directory for artifacts and the run manifest.
    #[arg(long, default_value = "m2-out")]
    out: PathBuf,
    /// JSON config file; flags override it, it overrides built-ins.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit without running.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug, Clone)]
struct MiningFlags {
    /// Search mode: accelerated | vanilla | infer_only.
    #[arg(long)]
    mode: Option<SearchMode>,
    /// Base seed for the engine (and oracle agents, when set).
    #[arg(long)]
    seed: Option<u64>,
    /// Iteration budget per mining run.
    #[arg(long)]
    iterations: Option<u32>,
    /// Candidate actions requested per expansion.
    #[arg(long)]
    k: Option<usize>,
    /// Maximum tree depth.
    #[arg(long)]
    depth: Option<u32>,
    /// Rollout budget for vanilla search.
    #[arg(long)]
    rollout_steps: Option<u32>,
    /// Extra attempts per agent call.
    #[arg(long)]
    agent_retries: Option<u32>,
    /// UCT exploration constant.
    #[arg(long)]
    exploration: Option<f64>,
}

impl MiningFlags {
    fn apply(&self, cfg: &mut MiningConfig) {
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.iterations {
            cfg.max_iterations = v;
        }
        if let Some(v) = self.k {
            cfg.k_candidates = v;
        }
        if let Some(v) = self.depth {
            cfg.max_depth = v;
        }
        if let Some(v) = self.rollout_steps {
            cfg.max_rollout_steps = v;
        }
        if let Some(v) = self.agent_retries {
            cfg.agent_retries = v;
        }
        if let Some(v) = self.exploration {
            cfg.exploration_c = v;
        }
    }
}

#[derive(Args, Debug, Clone)]
struct BackendFlags {
    /// Agent backend: oracle | http.
    #[arg(long)]
    backend: Option<String>,
    /// Oracle noise rate in [0, 1].
    #[arg(long)]
    epsilon: Option<f64>,
    /// Chat-completions URL; implies the http backend.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the http backend.
    #[arg(long)]
    model: Option<String>,
}

impl BackendFlags {
    fn apply(&self, cfg: &mut RunConfig, seed_was_set: bool) -> Result<(), CliError> {
        let kind = match (self.backend.as_deref(), &self.endpoint) {
            (Some(k), _) => Some(k.to_string()),
            (None, Some(_)) => Some("http".to_string()),
            (None, None) => None,
        };
        if let Some(kind) = kind {
            cfg.backend = match kind.as_str() {
                "oracle" => {
                    let epsilon = match cfg.backend {
                        BackendProfile::Oracle { epsilon, .. } => epsilon,
                        _ => 0.0,
                    };
                    BackendProfile::Oracle { epsilon, seed: cfg.mining.seed }
                }
                "http" => {
                    let base_url = match (&self.endpoint, &cfg.backend) {
                        (Some(url), _) => url.clone(),
                        (None, BackendProfile::Http(http)) => http.base_url.clone(),
                        (None, _) => {
                            return Err(CliError::Validation(
                                "the http backend needs --endpoint".into(),
                            ))
                        }
                    };
                    BackendProfile::Http(HttpChatConfig {
                        base_url,
                        model: self.model.clone().unwrap_or_else(|| "m2-miner".into()),
                        api_key: None, // read from M2_API_KEY at request time
                        temperature: 0.0,
                        timeout_ms: 10_000,
                        max_retries: 2,
                        templates: None,
                    })
                }
                other => {
                    return Err(CliError::Validation(format!(
                        "unknown backend {other:?} (expected oracle or http)"
                    )))
                }
            };
        }
        if let Some(eps) = self.epsilon {
            match &mut cfg.backend {
                BackendProfile::Oracle { epsilon, .. } => *epsilon = eps,
                BackendProfile::Http(_) => {
                    return Err(CliError::Validation(
                        "--epsilon only applies to the oracle backend".into(),
                    ))
                }
            }
        }
        if seed_was_set {
            if let BackendProfile::Oracle { seed, .. } = &mut cfg.backend {
                *seed = cfg.mining.seed;
            }
        }
        Ok(())
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check an environment file: schema, reachability, goal coverage.
    ValidateEnv {
        /// Environment definition (JSON).
        env: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Mine one intent into a trajectory tree.
    Mine {
        #[arg(long)]
        env: PathBuf,
        /// The user intent to mine, in plain language.
        #[arg(long)]
        intent: String,
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        mining: MiningFlags,
        #[command(flatten)]
        backend: BackendFlags,
    },
    /// Run the search-mode × task-length grid, averaged over seeds.
    Ablate {
        #[arg(long)]
        env: PathBuf,
        /// Search modes to compare.
        #[arg(long, value_delimiter = ',', default_values_t = vec![SearchMode::Accelerated, SearchMode::Vanilla])]
        modes: Vec<SearchMode>,
        /// Optimal task lengths; each must match a declared intent.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u32, 3, 5, 7, 9])]
        lengths: Vec<u32>,
        /// How many seeds to average over.
        #[arg(long, default_value_t = 10)]
        seeds: u32,
        /// First seed of the range.
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        mining: MiningFlags,
        #[command(flatten)]
        backend: BackendFlags,
    },
    /// Harvest extra intents out of a mined tree.
    Recycle {
        #[arg(long)]
        env: PathBuf,
        /// Tree file produced by `mine` or `loop`.
        #[arg(long)]
        tree: PathBuf,
        /// Filter score needed to keep a candidate (default 0.5).
        #[arg(long)]
        threshold: Option<f64>,
        /// Stage stamped on recycled intents (default stage3).
        #[arg(long)]
        stage: Option<Stage>,
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        backend: BackendFlags,
    },
    /// Run a staged mining plan.
    Loop {
        #[arg(long)]
        env: PathBuf,
        /// Plan file (JSON, schema "m2plan/1").
        #[arg(long)]
        plan: PathBuf,
        /// Parallel mining workers within a stage.
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Export mined trees as training channels (JSONL + manifest).
    Export {
        /// Tree files to export.
        #[arg(long, required = true, num_args = 1..)]
        trees: Vec<PathBuf>,
        /// Channels to write: act, des, pref.
        #[arg(long, value_delimiter = ',', default_values_t = vec!["act".to_string(), "des".to_string(), "pref".to_string()])]
        channels: Vec<String>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Score stored trees: mining success and replay quality.
    Metrics {
        #[arg(long)]
        env: PathBuf,
        /// Tree files to score.
        #[arg(long, required = true, num_args = 1..)]
        trees: Vec<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Estimate dataset costs; without --images, emit the reference table.
    Cost {
        /// Number of screenshots in the dataset.
        #[arg(long)]
        images: Option<u64>,
        /// Pipeline: manual | mined.
        #[arg(long)]
        pipeline: Option<String>,
        /// Cost parameters (JSON); defaults to the published rates.
        #[arg(long)]
        params: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
}

// ---------------------------------------------------------------------------
// Effective configuration
// ---------------------------------------------------------------------------

/// Everything a run needs beyond its command-specific arguments. Built-in
/// defaults, overlaid by the config file, overlaid by flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    mining: MiningConfig,
    backend: BackendProfile,
    workers: usize,
    recycle_threshold: f64,
    /// Stage stamped on intents minted by `mine`.
    stage: Stage,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mining: MiningConfig::default(),
            backend: BackendProfile::Oracle { epsilon: 0.0, seed: 0 },
            workers: 1,
            recycle_threshold: m2_core::recycle::DEFAULT_FILTER_THRESHOLD,
            stage: Stage::Stage1,
        }
    }
}

fn load_run_config(common: &CommonOpts) -> Result<RunConfig, CliError> {
    match &common.config {
        None => Ok(RunConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Validation(format!("cannot read {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::Validation(format!("bad config {}: {e}", path.display()))
            })
        }
    }
}

/// Handles --print-config: emit the effective settings and skip the run.
fn print_config(value: &impl Serialize) -> Result<(), CliError> {
    emit(&canonical_json_pretty(value).map_err(runtime)?);
    Ok(())
}

fn load_graph(ctx: &mut RunContext, path: &Path) -> Result<ScreenGraph, CliError> {
    let text = ctx.read_input(path)?;
    ScreenGraph::from_json_str(&text)
        .map_err(|e| CliError::Validation(format!("bad environment {}: {e}", path.display())))
}

fn load_tree(ctx: &mut RunContext, path: &Path) -> Result<IntentTree, CliError> {
    let text = ctx.read_input(path)?;
    IntentTree::from_json_str(&text)
        .map_err(|e| CliError::Validation(format!("bad tree {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_validate_env(env: &Path, common: &CommonOpts) -> Result<(), CliError> {
    let cfg = load_run_config(common)?;
    if common.print_config {
        return print_config(&cfg);
    }
    let mut ctx = RunContext::new("validate-env", &common.out, &cfg)?;
    let graph = load_graph(&mut ctx, env)?;
    let nav = NavOracle::build(&graph).map_err(invalid)?;
    let initial = graph.initial_state();
    let mut unreachable = Vec::new();
    for intent in graph.intents() {
        if nav.distance(&intent.text, &initial).map_err(invalid)?.is_none() {
            unreachable.push(intent.text.clone());
        }
    }
    if !unreachable.is_empty() {
        return Err(CliError::Validation(format!(
            "declared intents are unreachable from the initial state: {unreachable:?}"
        )));
    }
    for latent in graph.latent_intents() {
        if nav.distance(&latent.text, &initial).map_err(invalid)?.is_none() {
            log::warn!("latent goal {:?} is unreachable", latent.text);
        }
    }
    let summary = serde_json::json!({
        "screens": graph.screens().len(),
        "reachable_states": nav.reachable_states(),
        "intents": graph.intents().len(),
        "latent_intents": graph.latent_intents().len(),
    });
    let text = canonical_json_pretty(&summary).map_err(runtime)?;
    ctx.write_output("env-summary.json", text.as_bytes())?;
    emit(&text);
    ctx.finish()?;
    Ok(())
}

fn cmd_mine(
    env: &Path,
    intent: &str,
    common: &CommonOpts,
    mining: &MiningFlags,
    backend: &BackendFlags,
) -> Result<(), CliError> {
    let mut cfg = load_run_config(common)?;
    mining.apply(&mut cfg.mining);
    backend.apply(&mut cfg, mining.seed.is_some())?;
    cfg.mining.validate().map_err(engine_err)?;
    if common.print_config {
        return print_config(&cfg);
    }
    let intent = intent.trim();
    if intent.is_empty() {
        return Err(CliError::Validation("--intent must not be empty".into()));
    }
    let mut ctx = RunContext::new("mine", &common.out, &cfg)?;
    if let Some(path) = &common.config {
        ctx.read_input(path)?;
    }
    ctx.record_seeds([cfg.mining.seed]);
    let graph = Arc::new(load_graph(&mut ctx, env)?);
    let agents = cfg.backend.build(&graph).map_err(invalid)?;
    let record = IntentRecord::seed(intent, cfg.stage);
    let result = mine(&graph, &record, &agents, &cfg.mining).map_err(engine_err)?;
    let tree_json = result.tree.to_json_string().map_err(runtime)?;
    ctx.write_output("tree.json", tree_json.as_bytes())?;
    let summary = canonical_json_pretty(&result.summary().map_err(runtime)?).map_err(runtime)?;
    ctx.write_output("summary.json", summary.as_bytes())?;
    emit(&summary);
    ctx.finish()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    env: &Path,
    modes: &[SearchMode],
    lengths: &[u32],
    seeds: u32,
    seed_base: u64,
    common: &CommonOpts,
    mining: &MiningFlags,
    backend: &BackendFlags,
) -> Result<(), CliError> {
    let mut cfg = load_run_config(common)?;
    mining.apply(&mut cfg.mining);
    backend.apply(&mut cfg, mining.seed.is_some())?;
    cfg.mining.validate().map_err(engine_err)?;
    let seeds: Vec<u64> = (0..u64::from(seeds)).map(|i| seed_base + i).collect();
    let spec = AblationSpec {
        modes: modes.to_vec(),
        lengths: lengths.to_vec(),
        seeds: seeds.clone(),
        base: cfg.mining.clone(),
    };
    if common.print_config {
        return print_config(&serde_json::json!({ "run": cfg, "spec": spec }));
    }
    let mut ctx = RunContext::new("ablate", &common.out, &cfg)?;
    if let Some(path) = &common.config {
        ctx.read_input(path)?;
    }
    ctx.record_seeds(seeds);
    let graph = Arc::new(load_graph(&mut ctx, env)?);
    let rows = ablate(&graph, &spec, &cfg.backend).map_err(engine_err)?;
    let csv = ablation_csv(&rows);
    ctx.write_output("ablation.csv", csv.as_bytes())?;
    let json = canonical_json_pretty(&rows).map_err(runtime)?;
    ctx.write_output("ablation.json", json.as_bytes())?;
    emit(&csv);
    ctx.finish()?;
    Ok(())
}

fn cmd_recycle(
    env: &Path,
    tree_path: &Path,
    threshold: Option<f64>,
    stage: Option<Stage>,
    common: &CommonOpts,
    backend: &BackendFlags,
) -> Result<(), CliError> {
    let mut cfg = load_run_config(common)?;
    backend.apply(&mut cfg, false)?;
    if let Some(t) = threshold {
        cfg.recycle_threshold = t;
    }
    if common.print_config {
        return print_config(&cfg);
    }
    let mut ctx = RunContext::new("recycle", &common.out, &cfg)?;
    if let Some(path) = &common.config {
        ctx.read_input(path)?;
    }
    let graph = Arc::new(load_graph(&mut ctx, env)?);
    let mut tree = load_tree(&mut ctx, tree_path)?;
    let agents = cfg.backend.build(&graph).map_err(invalid)?;
    let (filter, generator) = recycle_backends(&cfg.backend, &graph).map_err(recycle_err)?;
    let options = RecycleOptions {
        threshold: cfg.recycle_threshold,
        stage: stage.unwrap_or(RecycleOptions::default().stage),
    };
    let (report, _) = run_recycle(
        &mut tree,
        &graph,
        filter.as_ref(),
        generator.as_ref(),
        agents.judge.as_ref(),
        &options,
    )
    .map_err(recycle_err)?;
    ctx.write_output("tree.json", tree.to_json_string().map_err(runtime)?.as_bytes())?;
    let report_json = canonical_json_pretty(&report).map_err(runtime)?;
    ctx.write_output("recycle-report.json", report_json.as_bytes())?;
    emit(&report_json);
    ctx.finish()?;
    Ok(())
}

fn stage_csv(report: &LoopReport) -> String {
    let mut out = String::from("stage,intents,requeued,msr,dqa,recycled\n");
    for s in &report.stages {
        let dqa = s.dqa.map(|d| format!("{d:.4}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{:.4},{},{}\n",
            s.stage, s.intents, s.requeued, s.msr, dqa, s.recycled
        ));
    }
    out
}

fn cmd_loop(
    env: &Path,
    plan_path: &Path,
    workers: Option<usize>,
    common: &CommonOpts,
) -> Result<(), CliError> {
    let mut cfg = load_run_config(common)?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if cfg.workers == 0 {
        return Err(CliError::Validation("--workers must be at least 1".into()));
    }
    if common.print_config {
        return print_config(&cfg);
    }
    let mut ctx = RunContext::new("loop", &common.out, &cfg)?;
    if let Some(path) = &common.config {
        ctx.read_input(path)?;
    }
    let graph = Arc::new(load_graph(&mut ctx, env)?);
    let plan_text = ctx.read_input(plan_path)?;
    let plan = LoopPlan::from_json_str(&plan_text)
        .map_err(|e| CliError::Validation(format!("bad plan {}: {e}", plan_path.display())))?;
    ctx.record_seeds(plan.stages.iter().map(|s| s.mining_config.seed));
    let run = run_loop(&graph, &plan, cfg.workers).map_err(stage_err)?;
    let report_json = canonical_json_pretty(&run.report).map_err(runtime)?;
    ctx.write_output("loop-report.json", report_json.as_bytes())?;
    ctx.write_output("loop-report.csv", stage_csv(&run.report).as_bytes())?;
    for tree in &run.trees {
        let name = format!("trees/{}.json", tree.tree_id);
        ctx.write_output(&name, tree.to_json_string().map_err(runtime)?.as_bytes())?;
    }
    emit(&report_json);
    ctx.finish()?;
    Ok(())
}

fn parse_channels(names: &[String]) -> Result<Vec<DataChannel>, CliError> {
    names
        .iter()
        .map(|n| match n.to_ascii_lowercase().as_str() {
            "act" => Ok(DataChannel::Act),
            "des" => Ok(DataChannel::Des),
            "pref" => Ok(DataChannel::Pref),
            other => Err(CliError::Validation(format!(
                "unknown channel {other:?} (expected act, des, or pref)"
            ))),
        })
        .collect()
}

fn cmd_export(trees: &[PathBuf], channels: &[String], common: &CommonOpts) -> Result<(), CliError> {
    let cfg = load_run_config(common)?;
    let channels = parse_channels(channels)?;
    if common.print_config {
        return print_config(&cfg);
    }
    let mut ctx = RunContext::new("export", &common.out, &cfg)?;
    let mut loaded = Vec::with_capacity(trees.len());
    for path in trees {
        loaded.push(load_tree(&mut ctx, path)?);
    }
    let data_dir = ctx.out_dir().join("data");
    let export = export_trajectories(&loaded, &data_dir, &channels).map_err(dataset_err)?;
    for file in export.files.values() {
        ctx.record_output_file(&data_dir.join(file))?;
    }
    ctx.record_output_file(&data_dir.join("manifest.json"))?;
    let text = canonical_json_pretty(&export).map_err(runtime)?;
    emit(&text);
    ctx.finish()?;
    Ok(())
}

fn cmd_metrics(env: &Path, trees: &[PathBuf], common: &CommonOpts) -> Result<(), CliError> {
    let cfg = load_run_config(common)?;
    if common.print_config {
        return print_config(&cfg);
    }
    let mut ctx = RunContext::new("metrics", &common.out, &cfg)?;
    let graph = load_graph(&mut ctx, env)?;

    let mut successes = Vec::new();
    let mut all_trajectories: Vec<MinedTrajectory> = Vec::new();
    let mut lines = Vec::new();
    let mut per_tree = Vec::new();
    for path in trees {
        let tree = load_tree(&mut ctx, path)?;
        tree.check_invariants().map_err(invalid)?;
        let trajectories = tree_trajectories(&tree).map_err(dataset_err)?;
        // A stored tree counts as a mining success when it holds a verified
        // trajectory for the intent it was mined for.
        let success = tree
            .attachments()
            .iter()
            .any(|a| a.intent.text == tree.original_intent.text);
        successes.push(success);
        let dqa = if trajectories.is_empty() {
            None
        } else {
            Some(compute_dqa(&trajectories, &graph).map_err(dataset_err)?)
        };
        if let Some(dqa) = dqa {
            lines.push(MetricLine {
                label: tree.tree_id.clone(),
                msr: if success { 1.0 } else { 0.0 },
                dqa,
            });
        }
        per_tree.push(serde_json::json!({
            "tree_id": tree.tree_id,
            "success": success,
            "trajectories": trajectories.len(),
            "dqa": dqa,
        }));
        all_trajectories.extend(trajectories);
    }
    let msr = dataset::compute_msr(&successes).map_err(dataset_err)?;
    let dqa = if all_trajectories.is_empty() {
        None
    } else {
        Some(compute_dqa(&all_trajectories, &graph).map_err(dataset_err)?)
    };
    if let Some(dqa) = dqa {
        lines.push(MetricLine { label: "overall".into(), msr, dqa });
    }
    let csv = metric_table_csv(&lines);
    ctx.write_output("metrics.csv", csv.as_bytes())?;
    let summary = serde_json::json!({
        "trees": trees.len(),
        "msr": msr,
        "dqa": dqa,
        "trajectories": all_trajectories.len(),
        "per_tree": per_tree,
    });
    let text = canonical_json_pretty(&summary).map_err(runtime)?;
    ctx.write_output("metrics.json", text.as_bytes())?;
    emit(&text);
    ctx.finish()?;
    Ok(())
}

/// Compute phases behind the reference mined-pipeline row.
fn reference_mined_params() -> CostParams {
    CostParams {
        train: ComputePhase { hours: 24.0, gpus: 8.0, price_per_gpu_hour: 0.924 },
        mine: ComputePhase { hours: 26.7, gpus: 8.0, price_per_gpu_hour: 0.433 },
        ..CostParams::default()
    }
}

fn cmd_cost(
    images: Option<u64>,
    pipeline: Option<&str>,
    params_path: Option<&Path>,
    common: &CommonOpts,
) -> Result<(), CliError> {
    let cfg = load_run_config(common)?;
    let params = match params_path {
        None => None,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Validation(format!("cannot read {}: {e}", path.display()))
            })?;
            Some(serde_json::from_str::<CostParams>(&text).map_err(|e| {
                CliError::Validation(format!("bad params {}: {e}", path.display()))
            })?)
        }
    };
    if common.print_config {
        return print_config(&serde_json::json!({
            "run": cfg,
            "params": params.clone().unwrap_or_default(),
        }));
    }
    let mut ctx = RunContext::new("cost", &common.out, &cfg)?;
    if let Some(path) = params_path {
        ctx.read_input(path)?;
    }
    match images {
        Some(n) => {
            let pipeline = match pipeline.unwrap_or("manual") {
                "manual" => CostPipeline::Manual,
                "mined" => CostPipeline::Mined,
                other => {
                    return Err(CliError::Validation(format!(
                        "unknown pipeline {other:?} (expected manual or mined)"
                    )))
                }
            };
            let params = params.unwrap_or_else(|| match pipeline {
                CostPipeline::Manual => CostParams::default(),
                CostPipeline::Mined => reference_mined_params(),
            });
            let breakdown = estimate_cost(&params, n, pipeline).map_err(dataset_err)?;
            let out = serde_json::json!({
                "images": n,
                "pipeline": pipeline.to_string(),
                "params": params,
                "breakdown": breakdown,
                "rounded_total": breakdown.rounded_total(),
            });
            let text = canonical_json_pretty(&out).map_err(runtime)?;
            ctx.write_output("cost.json", text.as_bytes())?;
            emit(&text);
        }
        None => {
            // The reference table: three manually annotated datasets plus
            // the mined pipeline at its published scale.
            let manual = params.clone().unwrap_or_default();
            let mined = params.unwrap_or_else(reference_mined_params);
            let mut table = Vec::new();
            for (label, n) in
                [("ac", 88_000u64), ("aitz", 18_000), ("gui-odyssey", 119_000)]
            {
                table.push(CostLine {
                    label: label.into(),
                    images: n,
                    pipeline: CostPipeline::Manual,
                    breakdown: estimate_cost(&manual, n, CostPipeline::Manual)
                        .map_err(dataset_err)?,
                });
            }
            table.push(CostLine {
                label: "mined".into(),
                images: 20_000,
                pipeline: CostPipeline::Mined,
                breakdown: estimate_cost(&mined, 20_000, CostPipeline::Mined)
                    .map_err(dataset_err)?,
            });
            let csv = cost_table_csv(&table);
            ctx.write_output("cost-table.csv", csv.as_bytes())?;
            emit(&csv);
        }
    }
    ctx.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::ValidateEnv { env, common } => cmd_validate_env(env, common),
        Command::Mine { env, intent, common, mining, backend } => {
            cmd_mine(env, intent, common, mining, backend)
        }
        Command::Ablate { env, modes, lengths, seeds, seed_base, common, mining, backend } => {
            cmd_ablate(env, modes, lengths, *seeds, *seed_base, common, mining, backend)
        }
        Command::Recycle { env, tree, threshold, stage, common, backend } => {
            cmd_recycle(env, tree, *threshold, *stage, common, backend)
        }
        Command::Loop { env, plan, workers, common } => cmd_loop(env, plan, *workers, common),
        Command::Export { trees, channels, common } => cmd_export(trees, channels, common),
        Command::Metrics { env, trees, common } => cmd_metrics(env, trees, common),
        Command::Cost { images, pipeline, params, common } => {
            cmd_cost(*images, pipeline.as_deref(), params.as_deref(), common)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version print and succeed; anything else is a
            // usage error. clap's message already includes the usage text.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    logging::init(&cli.log_level);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            logging::error_line(&e.to_string());
            ExitCode::from(e.exit_code())
        }
    }
}
