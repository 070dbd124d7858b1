//! Command-line front end.
//!
//! Every command reads its inputs, writes results only under the
//! configured output directory, and returns 0 on success, 1 on a usage or
//! configuration problem, and 2 on a runtime failure. Errors go to
//! standard error as `ERROR <code>: <message>`.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use config::{Backend, ConfigLayer, RunConfig};

use crate::debug::{
    analyze_critical, best_of_n, binary_search_localize, brute_force_localize, debug_loop,
    detect_all, direct_prompt_localize, self_refine_loop, tot_search, Corrector, DebugError,
    DebugResult, ErrorProfile,
};
use crate::env::{load_env, EnvError, EnvFactory};
use crate::eval::{
    load_benchmark, propagation_matrix, render_table, EvalError, MetricsReport, Prediction,
};
use crate::model::{HaltReason, Outcome, TokenUsage, Trajectory};
use crate::rollout::{run_rollout, trajectory_file_name};

#[derive(Debug)]
pub enum CliError {
    Config { code: String, message: String },
    Runtime { code: String, message: String },
}

impl CliError {
    pub fn config(code: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn runtime(code: &str, message: impl Into<String>) -> Self {
        CliError::Runtime {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 1,
            CliError::Runtime { .. } => 2,
        }
    }

    pub fn render(&self) -> String {
        let (CliError::Config { code, message } | CliError::Runtime { code, message }) = self;
        format!("ERROR {code}: {message}")
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::config(e.code(), e.to_string())
    }
}

fn debug_code(e: &DebugError) -> &'static str {
    match e {
        DebugError::JudgeParseFailure(_) => "JudgeParseFailure",
        DebugError::UnknownErrorType(_) => "UnknownErrorType",
        DebugError::InvalidDiagnosis(_) => "InvalidDiagnosis",
        DebugError::LineFormatParseFailure(_) => "LineFormatParseFailure",
        DebugError::NotFound => "NotFound",
        DebugError::Precondition(_) => "Precondition",
        DebugError::ScoreParseFailure(_) => "ScoreParseFailure",
        DebugError::Llm(_) => "Llm",
        DebugError::Rollout(_) => "Rollout",
        DebugError::Env(_) => "Env",
    }
}

fn debug_error(task: &str, e: DebugError) -> CliError {
    CliError::runtime(debug_code(&e), format!("{task}: {e}"))
}

#[derive(Debug, Parser)]
#[command(name = "trajdebug", version, about = "Find and fix the critical error in failed agent trajectories")]
pub struct Cli {
    /// TOML file with run settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: ConfigLayer,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DebugMethod {
    Agentdebug,
    SelfRefine,
    BestOfN,
    Tot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMethod {
    Agentdebug,
    Direct,
    BruteForce,
    BinarySearch,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the agent on each environment spec and record trajectories.
    Rollout {
        /// Environment spec files or directories of them; defaults to
        /// every spec in --world-dir.
        specs: Vec<PathBuf>,
    },
    /// Debug failed trajectories and re-roll them.
    Debug {
        trajectories: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "agentdebug")]
        method: DebugMethod,
        /// Samples for best-of-n; defaults to budget + 1.
        #[arg(long)]
        samples: Option<u32>,
        /// Proposals per step for tot.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Beam width for tot.
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Per-step, per-module error detection.
    Detect { trajectories: Vec<PathBuf> },
    /// Localize the critical step of failed trajectories.
    Analyze {
        trajectories: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "agentdebug")]
        method: AnalyzeMethod,
        /// Directory of `<task_id>.json` profiles from `detect`; missing
        /// profiles are computed.
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
    /// Score predictions against a gold benchmark.
    EvalDetection {
        #[arg(long)]
        benchmark: PathBuf,
        /// Prediction files or directories.
        #[arg(long, required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        /// Pool all items instead of averaging per dataset.
        #[arg(long)]
        micro: bool,
    },
    /// Export the error-propagation matrix as CSV.
    Propagation {
        /// Profile files or directories.
        profiles: Vec<PathBuf>,
        /// Diagnosis files or directories.
        #[arg(long, num_args = 0..)]
        diagnoses: Vec<PathBuf>,
    },
    /// Check a benchmark file against the schema.
    BenchValidate { benchmark: PathBuf },
}

/// Parses `args`, runs the command, reports errors, and returns the exit
/// code. `env` stands in for the process environment.
pub fn run_with_env<I, T>(args: I, env: impl Fn(&str) -> Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERROR Usage: {first}");
            return 1;
        }
    };
    match execute(cli, env) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.render());
            e.exit_code()
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_env(args, |k| std::env::var(k).ok())
}

fn execute(cli: Cli, env: impl Fn(&str) -> Option<String>) -> Result<i32, CliError> {
    let file = match &cli.config {
        Some(p) => ConfigLayer::from_toml_file(p)?,
        None => ConfigLayer::default(),
    };
    let layer = cli.settings.over(file).over(ConfigLayer::from_env(env));
    match cli.command {
        Command::EvalDetection {
            benchmark,
            predictions,
            micro,
        } => cmd_eval_detection(&layer, &benchmark, &predictions, micro),
        Command::Propagation { profiles, diagnoses } => cmd_propagation(&layer, &profiles, &diagnoses),
        Command::BenchValidate { benchmark } => cmd_bench_validate(&benchmark),
        command => {
            let cfg = RunConfig::resolve(layer)?;
            match command {
                Command::Rollout { specs } => cmd_rollout(&cfg, &specs),
                Command::Debug {
                    trajectories,
                    method,
                    samples,
                    k,
                    beam,
                } => cmd_debug(&cfg, &trajectories, method, samples, k, beam),
                Command::Detect { trajectories } => cmd_detect(&cfg, &trajectories),
                Command::Analyze {
                    trajectories,
                    method,
                    profiles,
                } => cmd_analyze(&cfg, &trajectories, method, profiles.as_deref()),
                _ => unreachable!("handled above"),
            }
        }
    }
}

/// Files named directly plus every `*.json` inside named directories,
/// each directory's entries in name order.
pub fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CliError::config("Io", format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            entries.sort();
            out.extend(entries);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(CliError::config("Io", format!("{}: no such file", p.display())));
        }
    }
    if out.is_empty() {
        return Err(CliError::config("EmptyInput", "no input files"));
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::config("Io", format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::runtime("Io", format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::runtime("Io", format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

fn load_trajectories(paths: &[PathBuf]) -> Result<Vec<Trajectory>, CliError> {
    expand_inputs(paths)?
        .iter()
        .map(|p| {
            Trajectory::from_json(&read(p)?)
                .map_err(|e| CliError::config("SchemaViolation", format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Reads files holding either one `T` or an array of them.
fn load_many<T: serde::de::DeserializeOwned>(paths: &[PathBuf]) -> Result<Vec<T>, CliError> {
    let mut out = Vec::new();
    for p in expand_inputs(paths)? {
        let value: serde_json::Value = serde_json::from_str(&read(&p)?)
            .map_err(|e| CliError::config("SchemaViolation", format!("{}: {e}", p.display())))?;
        let items = match value {
            serde_json::Value::Array(items) => items,
            one => vec![one],
        };
        for item in items {
            out.push(
                serde_path_to_error::deserialize(item)
                    .map_err(|e| CliError::config("SchemaViolation", format!("{}: {e}", p.display())))?,
            );
        }
    }
    Ok(out)
}

/// Applies `f` to every item on up to `jobs` threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                *slots[i].lock().expect("slot") = Some(f(item));
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot").expect("every slot filled"))
        .collect()
}

struct SpecFactory {
    env_name: String,
    path: PathBuf,
}

impl EnvFactory for SpecFactory {
    fn make(&self) -> Result<Box<dyn crate::env::Environment>, EnvError> {
        load_env(&self.env_name, &self.path)
    }
}

fn factory_for(cfg: &RunConfig, task_id: &str) -> Result<SpecFactory, CliError> {
    let dir = cfg
        .world_dir
        .as_ref()
        .ok_or_else(|| CliError::config("Config", "this command needs --world-dir"))?;
    let path = dir.join(format!("{task_id}.json"));
    if !path.is_file() {
        return Err(CliError::config("Io", format!("{}: no environment spec for {task_id}", path.display())));
    }
    Ok(SpecFactory {
        env_name: cfg.env_name.clone(),
        path,
    })
}

fn is_env_halt(outcome: &Outcome) -> bool {
    matches!(
        outcome,
        Outcome::SystemHalt {
            reason: HaltReason::EnvironmentError
        }
    )
}

fn outcome_text(o: &Outcome) -> String {
    serde_json::to_value(o)
        .ok()
        .map(|v| match v {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        })
        .unwrap_or_default()
}

fn cmd_rollout(cfg: &RunConfig, specs: &[PathBuf]) -> Result<i32, CliError> {
    let specs = match (specs.is_empty(), &cfg.world_dir) {
        (true, Some(dir)) => expand_inputs(std::slice::from_ref(dir))?,
        _ => expand_inputs(specs)?,
    };
    // Load every spec up front so a bad file fails before any model call.
    for s in &specs {
        load_env(&cfg.env_name, s).map_err(|e| CliError::config("Io", e.to_string()))?;
    }
    let agent = cfg.agent_client()?;
    let rollout = cfg.rollout_config();
    let results = par_map(&specs, cfg.jobs, |path| {
        let mut env = load_env(&cfg.env_name, path).map_err(|e| CliError::runtime("Env", e.to_string()))?;
        run_rollout(&rollout, env.as_mut(), &agent.child(), None, None)
            .map_err(|e| CliError::runtime("Rollout", format!("{}: {e}", path.display())))
    });
    let mut env_failures = 0;
    for r in results {
        let t = r?;
        write_json(&cfg.out.join("trajectories").join(trajectory_file_name(&t.task_id, 0)), &t)?;
        println!("{}\t{}\t{} steps", t.task_id, outcome_text(&t.outcome), t.len());
        if is_env_halt(&t.outcome) {
            env_failures += 1;
        }
    }
    if env_failures > 0 {
        eprintln!("ERROR EnvironmentError: {env_failures} task(s) halted on an environment error");
        return Ok(2);
    }
    Ok(0)
}

#[derive(Debug, Serialize)]
pub struct DebugSummary {
    pub method: String,
    pub tasks: usize,
    pub initial_successes: usize,
    pub final_successes: usize,
    /// Index k holds the number of tasks that used k attempts.
    pub attempts_histogram: Vec<usize>,
    pub usage: TokenUsage,
}

impl DebugSummary {
    pub fn from_results(method: &str, results: &[DebugResult]) -> Self {
        let max = results.iter().map(|r| r.attempts.len()).max().unwrap_or(0);
        let mut hist = vec![0; max + 1];
        for r in results {
            hist[r.attempts.len()] += 1;
        }
        DebugSummary {
            method: method.into(),
            tasks: results.len(),
            initial_successes: results.iter().filter(|r| r.initial.outcome.is_success()).count(),
            final_successes: results.iter().filter(|r| r.succeeded()).count(),
            attempts_histogram: hist,
            usage: results.iter().map(|r| r.total_usage).sum(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "method: {}\ntasks: {}\ninitial successes: {}/{}\nfinal successes: {}/{}\n",
            self.method, self.tasks, self.initial_successes, self.tasks, self.final_successes, self.tasks
        );
        out.push_str("attempts  tasks\n");
        for (k, n) in self.attempts_histogram.iter().enumerate() {
            out.push_str(&format!("{k:>8}  {n:>5}\n"));
        }
        out.push_str(&format!(
            "tokens: prompt {} completion {} total {}\n",
            self.usage.prompt_tokens,
            self.usage.completion_tokens,
            self.usage.total()
        ));
        out
    }
}

fn method_name(m: DebugMethod) -> &'static str {
    match m {
        DebugMethod::Agentdebug => "agentdebug",
        DebugMethod::SelfRefine => "self_refine",
        DebugMethod::BestOfN => "best_of_n",
        DebugMethod::Tot => "tot",
    }
}

fn cmd_debug(
    cfg: &RunConfig,
    inputs: &[PathBuf],
    method: DebugMethod,
    samples: Option<u32>,
    k: usize,
    beam: usize,
) -> Result<i32, CliError> {
    let trajectories = load_trajectories(inputs)?;
    let factories = trajectories
        .iter()
        .map(|t| factory_for(cfg, &t.task_id))
        .collect::<Result<Vec<_>, _>>()?;
    let (agent, judge) = (cfg.agent_client()?, cfg.judge_client()?);
    let dcfg = cfg.debug_config();
    let jobs: Vec<(&Trajectory, &SpecFactory)> = trajectories.iter().zip(&factories).collect();
    let results = par_map(&jobs, cfg.jobs, |(t, factory)| {
        let mut rollout = dcfg.rollout_for(t);
        rollout.seed = cfg.seed.or(Some(t.seed));
        let r = match method {
            DebugMethod::Agentdebug => debug_loop(t, *factory, &dcfg, &judge, &agent),
            DebugMethod::SelfRefine => self_refine_loop(t, *factory, &dcfg, &agent, cfg.budget, cfg.token_budget),
            DebugMethod::BestOfN => best_of_n(*factory, &rollout, &agent, samples.unwrap_or(cfg.budget + 1), cfg.token_budget),
            DebugMethod::Tot => tot_search(*factory, &rollout, &agent, k, beam, cfg.token_budget),
        };
        r.map_err(|e| debug_error(&t.task_id, e))
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let dir = cfg.out.join("debug");
    for r in &results {
        write_json(&dir.join(format!("{}.json", r.initial.task_id)), r)?;
    }
    let summary = DebugSummary::from_results(method_name(method), &results);
    write_json(&dir.join("summary.json"), &summary)?;
    let text = summary.render();
    write_text(&dir.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(0)
}

fn cmd_detect(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<i32, CliError> {
    let trajectories = load_trajectories(inputs)?;
    let judge = cfg.judge_client()?;
    let dcfg = cfg.debug_config();
    let profiles = par_map(&trajectories, cfg.jobs, |t| {
        detect_all(t, &dcfg, &judge).map_err(|e| debug_error(&t.task_id, e))
    });
    for p in profiles {
        let p = p?;
        write_json(&cfg.out.join("profiles").join(format!("{}.json", p.trajectory_id)), &p)?;
        println!("{}\t{} detections\t{} error steps", p.trajectory_id, p.detections.len(), p.error_steps().len());
    }
    Ok(0)
}

fn cmd_analyze(
    cfg: &RunConfig,
    inputs: &[PathBuf],
    method: AnalyzeMethod,
    profile_dir: Option<&Path>,
) -> Result<i32, CliError> {
    let trajectories = load_trajectories(inputs)?;
    let needs_env = matches!(method, AnalyzeMethod::BruteForce | AnalyzeMethod::BinarySearch);
    let factories = if needs_env {
        trajectories
            .iter()
            .map(|t| factory_for(cfg, &t.task_id).map(Some))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        trajectories.iter().map(|_| None).collect()
    };
    let (agent, judge) = (cfg.agent_client()?, cfg.judge_client()?);
    let dcfg = cfg.debug_config();
    let jobs: Vec<(&Trajectory, &Option<SpecFactory>)> = trajectories.iter().zip(&factories).collect();
    let results = par_map(&jobs, cfg.jobs, |(t, factory)| -> Result<Option<Prediction>, CliError> {
        let diagnosis = match method {
            AnalyzeMethod::Agentdebug => {
                let stored = profile_dir.map(|d| d.join(format!("{}.json", t.task_id))).filter(|p| p.is_file());
                let profile: ErrorProfile = match stored {
                    Some(p) => serde_json::from_str(&read(&p)?)
                        .map_err(|e| CliError::config("SchemaViolation", format!("{}: {e}", p.display())))?,
                    None => detect_all(t, &dcfg, &judge).map_err(|e| debug_error(&t.task_id, e))?,
                };
                analyze_critical(t, &profile, 1, &[], &dcfg, &judge)
            }
            AnalyzeMethod::Direct => direct_prompt_localize(t, &dcfg, &judge),
            AnalyzeMethod::BruteForce | AnalyzeMethod::BinarySearch => {
                let factory = factory.as_ref().expect("factories built for env methods");
                let corrector = Corrector::new(&judge, &dcfg.judge_model);
                let found = if method == AnalyzeMethod::BruteForce {
                    brute_force_localize(t, factory, &corrector, &dcfg, &agent)
                } else {
                    binary_search_localize(t, factory, &corrector, &dcfg, &agent)
                };
                found.map(|l| l.to_diagnosis(t))
            }
        };
        match diagnosis {
            Ok(diagnosis) => Ok(Some(Prediction {
                trajectory_id: t.task_id.clone(),
                diagnosis,
            })),
            Err(DebugError::NotFound) => Ok(None),
            Err(e) => Err(debug_error(&t.task_id, e)),
        }
    });
    for (t, r) in trajectories.iter().zip(results) {
        match r? {
            Some(p) => {
                write_json(&cfg.out.join("diagnoses").join(format!("{}.json", p.trajectory_id)), &p)?;
                println!("{}\tstep {}\t{}", p.trajectory_id, p.diagnosis.critical_step, p.diagnosis.error_label);
            }
            None => println!("{}\tno critical error found", t.task_id),
        }
    }
    Ok(0)
}

fn out_dir(layer: &ConfigLayer) -> Option<PathBuf> {
    layer.out.clone()
}

fn cmd_eval_detection(
    layer: &ConfigLayer,
    benchmark: &Path,
    predictions: &[PathBuf],
    micro: bool,
) -> Result<i32, CliError> {
    let gold = load_benchmark(benchmark)?;
    let preds: Vec<Prediction> = load_many(predictions)?;
    let report = MetricsReport::build(&gold, &preds, micro)?;
    let table = render_table(&report);
    if let Some(dir) = out_dir(layer) {
        write_json(&dir.join("metrics.json"), &report)?;
        write_text(&dir.join("metrics.txt"), &table)?;
    }
    print!("{table}");
    Ok(0)
}

fn cmd_propagation(layer: &ConfigLayer, profiles: &[PathBuf], diagnoses: &[PathBuf]) -> Result<i32, CliError> {
    let profiles: Vec<ErrorProfile> = load_many(profiles)?;
    let diagnoses: Vec<Prediction> = if diagnoses.is_empty() { Vec::new() } else { load_many(diagnoses)? };
    let m = propagation_matrix(&profiles, &diagnoses)?;
    let csv = m.to_csv();
    match out_dir(layer) {
        Some(dir) => write_text(&dir.join("propagation.csv"), &csv)?,
        None => {
            let _ = std::io::stdout().write_all(csv.as_bytes());
        }
    }
    println!("rows: {} columns: {}", m.rows.len(), m.columns());
    Ok(0)
}

fn cmd_bench_validate(path: &Path) -> Result<i32, CliError> {
    let items = load_benchmark(path)?;
    let datasets: Vec<&str> = items
        .iter()
        .map(|i| i.dataset.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    println!("ok: {} items in {} dataset(s): {}", items.len(), datasets.len(), datasets.join(", "));
    Ok(0)
}
