//! Recorded runs and the dataset views derived from them.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::feedback::Feedback;
use crate::policy::Action;
use crate::search::TerminalStatus;
use crate::transcript;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("run did not end in a successful terminal state")]
    NotSuccessful,
}

/// One attempted action, whether or not it stayed in the model-visible context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action_text: String,
    pub feedback: Feedback,
    pub abandoned: bool,
    /// 0 for a first attempt, r for the r-th repair of it.
    pub retry_index: u32,
    pub tokens: u64,
}

impl StepRecord {
    fn has_code(&self) -> bool {
        Action::new(self.action_text.as_str()).is_ok_and(|a| a.code().is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub version: u32,
    pub problem: String,
    pub seed: u64,
    pub config_digest: String,
    pub terminal: TerminalStatus,
    pub tokens_used: u64,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn new(
        problem: &str,
        seed: u64,
        config_digest: String,
        terminal: TerminalStatus,
        tokens_used: u64,
        steps: Vec<StepRecord>,
    ) -> Self {
        Self { version: SCHEMA_VERSION, problem: problem.to_string(), seed, config_digest, terminal, tokens_used, steps }
    }

    pub fn success(&self) -> bool {
        self.terminal.success
    }

    /// Highest retry index reached by any attempt.
    pub fn max_retry(&self) -> u32 {
        self.steps.iter().map(|s| s.retry_index).max().unwrap_or(0)
    }

    /// Text after the answer marker in the final step, if the run answered.
    pub fn answer(&self) -> Option<String> {
        let last = self.steps.last()?;
        Action::new(last.action_text.as_str()).ok()?.answer_text().map(str::to_owned)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trajectories serialize");
        s.push('\n');
        s
    }

    pub fn from_json(json: &str) -> Result<Self, TrajectoryError> {
        let value: serde_json::Value =
            serde_json::from_str(json).map_err(|e| TrajectoryError::SchemaMismatch(e.to_string()))?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => return Err(TrajectoryError::SchemaMismatch(format!("unsupported version {v}"))),
            None => return Err(TrajectoryError::SchemaMismatch("missing version field".into())),
        }
        serde_json::from_value(value).map_err(|e| TrajectoryError::SchemaMismatch(e.to_string()))
    }

    /// Hex SHA-256 of the persisted form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

pub fn persist(run: &Trajectory, path: &Path) -> Result<(), TrajectoryError> {
    std::fs::write(path, run.to_json())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trajectory, TrajectoryError> {
    Trajectory::from_json(&std::fs::read_to_string(path)?)
}

/// Successful runs only, in input order.
pub fn filter_deag(runs: impl IntoIterator<Item = Trajectory>) -> Vec<Trajectory> {
    runs.into_iter().filter(Trajectory::success).collect()
}

/// Renders a run in the dataset transcript format.
pub fn export_transcript(run: &Trajectory, include_abandoned: bool) -> String {
    let mut out = transcript::header(&run.problem);
    for step in run.steps.iter().filter(|s| include_abandoned || !s.abandoned) {
        transcript::push_step(&mut out, &step.action_text, step.has_code(), &step.feedback);
    }
    out
}

/// Keeps, for every attempt group, only its final successful attempt and
/// drops abandoned attempts.
pub fn shorten_direct_execution(run: &Trajectory) -> Result<Trajectory, TrajectoryError> {
    if !run.success() {
        return Err(TrajectoryError::NotSuccessful);
    }
    let live: Vec<&StepRecord> = run.steps.iter().filter(|s| !s.abandoned).collect();
    let mut kept = Vec::new();
    let mut i = 0;
    while i < live.len() {
        let mut end = i + 1;
        while end < live.len() && live[end].retry_index > 0 {
            end += 1;
        }
        let last = live[end - 1];
        if last.feedback.is_success() {
            kept.push(StepRecord { retry_index: 0, ..last.clone() });
        }
        i = end;
    }
    let tokens_used = kept.iter().map(|s| s.tokens).sum();
    Ok(Trajectory { steps: kept, tokens_used, ..run.clone() })
}

pub const BUCKET_LABELS: [&str; 4] = ["Initial", "Retry@1", "Retry@2", "Retry@3+"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketStats {
    pub runs: usize,
    /// Mean tokens over runs in this bucket.
    pub avg_tokens: Option<f64>,
    /// Share of all runs that succeeded within this many retries.
    pub success_rate: Option<f64>,
}

/// Iterative-refinement statistics, bucketed by the deepest retry of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryStats {
    pub total: usize,
    pub buckets: [BucketStats; 4],
}

pub fn retry_stats<'a>(runs: impl IntoIterator<Item = &'a Trajectory>) -> RetryStats {
    let mut count = [0usize; 4];
    let mut tokens = [0u64; 4];
    let mut successes = [0usize; 4];
    let mut total = 0;
    for run in runs {
        let b = run.max_retry().min(3) as usize;
        total += 1;
        count[b] += 1;
        tokens[b] += run.tokens_used;
        successes[b] += usize::from(run.success());
    }
    let mut cumulative = 0;
    let buckets = std::array::from_fn(|b| {
        cumulative += successes[b];
        BucketStats {
            runs: count[b],
            avg_tokens: (count[b] > 0).then(|| tokens[b] as f64 / count[b] as f64),
            success_rate: (total > 0).then(|| cumulative as f64 / total as f64),
        }
    });
    RetryStats { total, buckets }
}

fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for RetryStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<26}", "Metric")?;
        for label in BUCKET_LABELS {
            write!(f, "{label:>10}")?;
        }
        writeln!(f)?;
        write!(f, "{:<26}", "Avg. Tokens (approximate)")?;
        for b in &self.buckets {
            let cell = b.avg_tokens.map_or_else(|| "-".to_string(), |t| thousands(t.round() as u64));
            write!(f, "{cell:>10}")?;
        }
        writeln!(f)?;
        write!(f, "{:<26}", "Success Rate")?;
        for b in &self.buckets {
            let cell = b.success_rate.map_or_else(|| "-".to_string(), |r| format!("{:.0}%", r * 100.0));
            write!(f, "{cell:>10}")?;
        }
        writeln!(f)?;
        write!(f, "{:<26}", "Runs")?;
        for b in &self.buckets {
            write!(f, "{:>10}", b.runs)?;
        }
        writeln!(f)
    }
}
