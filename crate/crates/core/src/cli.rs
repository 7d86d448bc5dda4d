//! Command-line surface: configuration loading and the `run`, `batch`,
//! `export`, `stats`, `replay` and `serve-builtin` commands.

use std::io::Write as _;
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::policy::{Action, PolicyKind, RemotePolicy, RemoteSettings, ScriptedPolicy};
use crate::sandbox::{Backend, SandboxConfig, Session};
use crate::search::{BranchConfig, Engine, Mode};
use crate::trajectory::{self, export_transcript, filter_deag, retry_stats, shorten_direct_execution, Trajectory};

pub const EXIT_SUCCESS: u8 = 0;
pub const EXIT_OPERATIONAL: u8 = 1;
pub const EXIT_FAILED_TERMINAL: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;

/// Where actions come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicySpec {
    Scripted(PathBuf),
    Remote(String),
}

impl std::str::FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("scripted:") {
            Ok(PolicySpec::Scripted(PathBuf::from(path)))
        } else if let Some(url) = s.strip_prefix("remote:") {
            Ok(PolicySpec::Remote(url.to_string()))
        } else {
            Err(format!("policy must be scripted:PATH or remote:URL, got '{s}'"))
        }
    }
}

fn default_backend() -> Backend {
    Backend::Builtin
}

/// Everything a run needs. Loaded from TOML; command-line flags override.
///
/// ```toml
/// seed = 7
/// backend = "builtin"
/// policy = "scripted:script.json"
///
/// [search]
/// mode = "bvs"
/// tau = 0.1
///
/// [sandbox]
/// timeout_ms = 5000
/// worker_command = ["python3", "worker.py"]
///
/// [remote]
/// model = "my-model"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_backend")]
    pub backend: Backend,
    pub policy: Option<String>,
    pub out: Option<PathBuf>,
    pub jobs: usize,
    pub search: BranchConfig,
    pub sandbox: SandboxConfig,
    pub remote: RemoteSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backend: Backend::Builtin,
            policy: None,
            out: None,
            jobs: 1,
            search: BranchConfig::default(),
            sandbox: SandboxConfig::default(),
            remote: RemoteSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        if self.backend == Backend::Worker && self.sandbox.worker_command.is_empty() {
            bail!("backend 'worker' needs sandbox.worker_command");
        }
        if self.sandbox.timeout_ms == 0 {
            bail!("sandbox.timeout_ms must be positive");
        }
        if let Some(PolicySpec::Scripted(path)) = self.policy_spec()? {
            if !path.exists() {
                bail!("policy script {} does not exist", path.display());
            }
        }
        Ok(())
    }

    pub fn policy_spec(&self) -> Result<Option<PolicySpec>> {
        self.policy.as_deref().map(|s| s.parse().map_err(|e: String| anyhow!(e))).transpose()
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<Backend>,
    /// scripted:PATH or remote:URL
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Horizon in committed steps.
    #[arg(long)]
    pub max_steps: Option<u32>,
    #[arg(long)]
    pub token_budget: Option<u64>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse()
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = self.mode {
            cfg.search.mode = mode;
        }
        if let Some(backend) = self.backend {
            cfg.backend = backend;
        }
        if let Some(policy) = &self.policy {
            cfg.policy = Some(policy.clone());
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if let Some(n) = self.max_steps {
            cfg.search.horizon_t = n;
        }
        if let Some(n) = self.token_budget {
            cfg.search.token_budget = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    /// Successful runs as recorded.
    Deag,
    /// Successful runs with every retry group reduced to its final success.
    Direct,
}

#[derive(Debug, Parser)]
#[command(name = "feedloop", version, about = "Execute-feedback-replan reasoning runs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one problem file.
    Run {
        problem: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Solve every *.txt problem in a directory and write a CSV report.
    Batch {
        dir: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Export trajectories as JSONL transcripts.
    Export {
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "deag")]
        subset: Subset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        include_abandoned: bool,
    },
    /// Print retry statistics for a directory of trajectories.
    Stats { dir: PathBuf },
    /// Re-execute a trajectory's code and report feedback divergences.
    Replay {
        trace: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Serve the worker protocol on stdio with the builtin evaluator.
    ServeBuiltin,
}

/// A problem file: free text, plus optional `expected: ...` lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub name: String,
    pub text: String,
    pub expected: Option<String>,
}

impl Problem {
    pub fn parse(name: &str, raw: &str) -> Self {
        let mut expected = None;
        let mut lines = Vec::new();
        for line in raw.lines() {
            match line.trim_start().strip_prefix("expected:") {
                Some(rest) => expected = Some(rest.trim().to_string()),
                None => lines.push(line),
            }
        }
        let text = lines.join("\n").trim().to_string();
        Self { name: name.to_string(), text, expected }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self::parse(&file_stem(path), &raw))
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "problem".into())
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Exact match after whitespace normalization.
pub fn grade(answer: &str, expected: &str) -> bool {
    normalize_ws(answer) == normalize_ws(expected)
}

fn host_port(url: &str) -> Result<(String, u16)> {
    let (scheme, rest) = url.split_once("://").unwrap_or(("http", url));
    let authority = rest.split(['/', '?', '#']).next().unwrap_or("");
    let authority = authority.rsplit('@').next().unwrap_or(authority);
    let default_port = if scheme == "https" { 443 } else { 80 };
    if authority.is_empty() {
        bail!("endpoint '{url}' has no host");
    }
    if let Some(end) = authority.strip_prefix('[').and_then(|a| a.find(']')) {
        let host = &authority[1..=end];
        let port = authority[end + 2..].strip_prefix(':').map(str::parse).transpose()?.unwrap_or(default_port);
        return Ok((host.to_string(), port));
    }
    match authority.rsplit_once(':') {
        Some((host, port)) => Ok((host.to_string(), port.parse().with_context(|| format!("bad port in '{url}'"))?)),
        None => Ok((authority.to_string(), default_port)),
    }
}

/// Fails fast when nothing listens at the endpoint.
pub fn probe_endpoint(url: &str, timeout: Duration) -> Result<()> {
    let (host, port) = host_port(url)?;
    let addrs: Vec<_> = (host.as_str(), port)
        .to_socket_addrs()
        .with_context(|| format!("resolving {host}:{port}"))?
        .collect();
    for addr in &addrs {
        if TcpStream::connect_timeout(addr, timeout).is_ok() {
            return Ok(());
        }
    }
    bail!("remote endpoint {url} is unreachable")
}

fn build_policy(cfg: &RunConfig, problem_path: Option<&Path>) -> Result<PolicyKind> {
    if let Some(script) = problem_path.map(|p| p.with_extension("script.json")).filter(|p| p.exists()) {
        return Ok(PolicyKind::Scripted(ScriptedPolicy::load(&script)?));
    }
    match cfg.policy_spec()? {
        Some(PolicySpec::Scripted(path)) => Ok(PolicyKind::Scripted(ScriptedPolicy::load(&path)?)),
        Some(PolicySpec::Remote(url)) => {
            probe_endpoint(&url, Duration::from_secs(3))?;
            Ok(PolicyKind::Remote(RemotePolicy::new(RemoteSettings { endpoint: url, ..cfg.remote.clone() })))
        }
        None => bail!("no policy configured (use --policy scripted:PATH or remote:URL)"),
    }
}

fn solve(problem: &Problem, policy: &PolicyKind, cfg: &RunConfig) -> Result<Trajectory> {
    let engine = Engine::new(policy, &cfg.search, cfg.seed);
    let factory = || Session::open(cfg.backend, &cfg.sandbox);
    Ok(engine.run(&problem.text, &factory)?)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub trace_path: PathBuf,
    pub transcript_path: PathBuf,
}

impl RunOutcome {
    pub fn exit_code(&self) -> u8 {
        if self.trajectory.success() {
            EXIT_SUCCESS
        } else {
            EXIT_FAILED_TERMINAL
        }
    }
}

/// Solves one problem file and writes `<stem>.json` and `<stem>.transcript.txt`
/// into the output directory.
pub fn cmd_run(problem_path: &Path, cfg: &RunConfig) -> Result<RunOutcome> {
    let problem = Problem::load(problem_path)?;
    let policy = build_policy(cfg, Some(problem_path))?;
    let run = solve(&problem, &policy, cfg)?;
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let trace_path = dir.join(format!("{}.json", problem.name));
    let transcript_path = dir.join(format!("{}.transcript.txt", problem.name));
    trajectory::persist(&run, &trace_path)?;
    std::fs::write(&transcript_path, export_transcript(&run, false))?;
    Ok(RunOutcome { trajectory: run, trace_path, transcript_path })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchRow {
    pub problem: String,
    pub success: bool,
    /// Empty when the problem carries no expected answer.
    pub graded_correct: Option<bool>,
    pub steps: usize,
    pub retries: usize,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub rows: Vec<BatchRow>,
    pub csv_path: PathBuf,
}

impl BatchReport {
    /// Share of graded problems answered correctly.
    pub fn pass_at_1(&self) -> Option<f64> {
        let graded: Vec<bool> = self.rows.iter().filter_map(|r| r.graded_correct).collect();
        (!graded.is_empty()).then(|| graded.iter().filter(|c| **c).count() as f64 / graded.len() as f64)
    }

    pub fn graded(&self) -> usize {
        self.rows.iter().filter(|r| r.graded_correct.is_some()).count()
    }
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn batch_row(path: &Path, cfg: &RunConfig, traces: &Path) -> Result<BatchRow> {
    let problem = Problem::load(path)?;
    let policy = build_policy(cfg, Some(path))?;
    let run = solve(&problem, &policy, cfg)?;
    trajectory::persist(&run, &traces.join(format!("{}.json", problem.name)))?;
    let graded_correct = problem.expected.as_deref().map(|exp| run.answer().is_some_and(|a| grade(&a, exp)));
    Ok(BatchRow {
        problem: problem.name,
        success: run.success(),
        graded_correct,
        steps: run.steps.len(),
        retries: run.steps.iter().filter(|s| s.retry_index > 0).count(),
        tokens: run.tokens_used,
    })
}

/// Runs every problem in `dir`. Per-problem failures become failed rows.
pub fn cmd_batch(dir: &Path, cfg: &RunConfig) -> Result<BatchReport> {
    let problems = sorted_files(dir, "txt")?;
    let out = cfg.out_dir();
    let traces = out.join("traces");
    std::fs::create_dir_all(&traces).with_context(|| format!("creating {}", traces.display()))?;
    let slots: Mutex<Vec<Option<BatchRow>>> = Mutex::new(vec![None; problems.len()]);
    let next = AtomicUsize::new(0);
    let jobs = cfg.jobs.clamp(1, problems.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(path) = problems.get(i) else { break };
                let row = batch_row(path, cfg, &traces).unwrap_or_else(|e| {
                    eprintln!("warning: {}: {e:#}", path.display());
                    let expected = Problem::load(path).ok().and_then(|p| p.expected);
                    BatchRow {
                        problem: file_stem(path),
                        success: false,
                        graded_correct: expected.map(|_| false),
                        steps: 0,
                        retries: 0,
                        tokens: 0,
                    }
                });
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(row);
            });
        }
    });
    let rows: Vec<BatchRow> = slots.into_inner().expect("lock is released").into_iter().flatten().collect();
    let csv_path = out.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    w.write_record(["problem", "success", "graded_correct", "steps", "retries", "tokens"])?;
    for r in &rows {
        let graded = r.graded_correct.map(|g| g.to_string()).unwrap_or_default();
        w.write_record([
            r.problem.clone(),
            r.success.to_string(),
            graded,
            r.steps.to_string(),
            r.retries.to_string(),
            r.tokens.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(BatchReport { rows, csv_path })
}

fn load_dir(dir: &Path) -> Result<Vec<Trajectory>> {
    let mut runs = Vec::new();
    for path in sorted_files(dir, "json")? {
        match trajectory::load(&path) {
            Ok(run) => runs.push(run),
            Err(e) => eprintln!("warning: skipping {}: {e}", path.display()),
        }
    }
    Ok(runs)
}

#[derive(Serialize)]
struct ExportLine<'a> {
    problem: &'a str,
    text: String,
}

/// Writes one JSONL line per exported run; returns the count.
pub fn cmd_export(dir: &Path, subset: Subset, out: &Path, include_abandoned: bool) -> Result<usize> {
    let runs = filter_deag(load_dir(dir)?);
    let mut buf = Vec::new();
    for run in &runs {
        let text = match subset {
            Subset::Deag => export_transcript(run, include_abandoned),
            Subset::Direct => export_transcript(&shorten_direct_execution(run)?, false),
        };
        serde_json::to_writer(&mut buf, &ExportLine { problem: &run.problem, text })?;
        buf.push(b'\n');
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, buf).with_context(|| format!("writing {}", out.display()))?;
    Ok(runs.len())
}

pub fn cmd_stats(dir: &Path) -> Result<trajectory::RetryStats> {
    Ok(retry_stats(&load_dir(dir)?))
}

/// One field that came out differently on re-execution.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub field: &'static str,
    pub recorded: String,
    pub replayed: String,
}

/// Re-executes every code step of `trace` in log order in a fresh session.
pub fn cmd_replay(trace: &Path, cfg: &RunConfig) -> Result<Vec<Divergence>> {
    let run = trajectory::load(trace)?;
    let mut session = Session::open(cfg.backend, &cfg.sandbox)?;
    let mut out = Vec::new();
    for (i, step) in run.steps.iter().enumerate() {
        let Ok(action) = Action::new(step.action_text.as_str()) else { continue };
        let Some(code) = action.code().filter(|_| !action.is_answer()) else { continue };
        let got = session.run(code)?;
        let want = &step.feedback;
        let mut diff = |field, recorded: String, replayed: String| {
            if recorded != replayed {
                out.push(Divergence { step: i, field, recorded, replayed });
            }
        };
        diff("v", format!("{:?}", want.v), format!("{:?}", got.v));
        diff("sigma", want.sigma.clone(), got.sigma.clone());
        diff("delta", want.delta.clone(), got.delta.clone());
        diff("status", format!("{:?}", want.status), format!("{:?}", got.status));
    }
    Ok(out)
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run { problem, common } => {
            let cfg = common.resolve()?;
            let outcome = cmd_run(&problem, &cfg)?;
            let t = &outcome.trajectory;
            println!(
                "terminal: {:?} success={} steps={} tokens={} (approximate)",
                t.terminal.kind,
                t.terminal.success,
                t.steps.len(),
                t.tokens_used
            );
            println!("trace: {} sha256={}", outcome.trace_path.display(), t.hash());
            println!("transcript: {}", outcome.transcript_path.display());
            Ok(outcome.exit_code())
        }
        Command::Batch { dir, common, jobs } => {
            let mut cfg = common.resolve()?;
            if let Some(jobs) = jobs {
                cfg.jobs = jobs;
            }
            let report = cmd_batch(&dir, &cfg)?;
            let solved = report.rows.iter().filter(|r| r.success).count();
            println!("problems: {} solved: {}", report.rows.len(), solved);
            match report.pass_at_1() {
                Some(p) => println!("pass@1: {:.1}% over {} graded", p * 100.0, report.graded()),
                None => println!("pass@1: n/a (no graded problems)"),
            }
            println!("report: {}", report.csv_path.display());
            Ok(EXIT_SUCCESS)
        }
        Command::Export { dir, subset, out, include_abandoned } => {
            let n = cmd_export(&dir, subset, &out, include_abandoned)?;
            println!("exported {n} transcripts to {}", out.display());
            Ok(EXIT_SUCCESS)
        }
        Command::Stats { dir } => {
            print!("{}", cmd_stats(&dir)?);
            Ok(EXIT_SUCCESS)
        }
        Command::Replay { trace, common } => {
            let cfg = common.resolve()?;
            let divergences = cmd_replay(&trace, &cfg)?;
            for d in &divergences {
                println!("step {} {}: recorded {:?}, replayed {:?}", d.step, d.field, d.recorded, d.replayed);
            }
            if divergences.is_empty() {
                println!("replay matched");
                Ok(EXIT_SUCCESS)
            } else {
                println!("{} divergences", divergences.len());
                Ok(EXIT_DIVERGENCE)
            }
        }
        Command::ServeBuiltin => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            crate::sandbox::worker::serve_builtin(stdin.lock(), stdout.lock())?;
            Ok(EXIT_SUCCESS)
        }
    }
}

/// Entry point shared by the binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            ExitCode::from(EXIT_OPERATIONAL)
        }
    }
}
