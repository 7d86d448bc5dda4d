//! Action generation and feedback-guided reranking.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feedback::Feedback;
use crate::protocol::{self, SegmentKind, ANSWER, EXECUTE_END};
use crate::search::State;

/// Prefix of the engine-inserted note that replaces an abandoned attempt.
pub const ADVISORY_PREFIX: &str = "previous attempt failed: ";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("remote generator unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("script has no entry for state '{0}'")]
    ScriptExhausted(String),
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("invalid script: {0}")]
    InvalidScript(String),
}

impl PolicyError {
    /// Exception-style name used when the error is surfaced as feedback.
    pub fn name(&self) -> &'static str {
        match self {
            PolicyError::RemoteUnavailable(_) => "RemoteUnavailable",
            PolicyError::ScriptExhausted(_) => "ScriptExhausted",
            PolicyError::MalformedAction(_) => "MalformedAction",
            PolicyError::InvalidScript(_) => "InvalidScript",
        }
    }
}

/// One reasoning step: free text with at most one execute block before the
/// answer marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Action {
    text: String,
    code: Option<String>,
    answer_at: Option<usize>,
}

impl Action {
    pub fn new(text: impl Into<String>) -> Result<Self, PolicyError> {
        let text = text.into();
        let segments = protocol::parse(&text).map_err(|e| PolicyError::MalformedAction(e.to_string()))?;
        let mut code = None;
        for seg in &segments {
            match seg.kind {
                SegmentKind::AnswerStart => break,
                SegmentKind::ExecuteBlock if code.is_some() => {
                    return Err(PolicyError::MalformedAction("more than one execute block".into()))
                }
                SegmentKind::ExecuteBlock => code = Some(seg.body.clone()),
                SegmentKind::FeedbackBlock => {
                    return Err(PolicyError::MalformedAction("actions may not contain feedback blocks".into()))
                }
                _ => {}
            }
        }
        let answer_at = segments
            .iter()
            .any(|s| s.kind == SegmentKind::AnswerStart)
            .then(|| text.find(ANSWER))
            .flatten();
        Ok(Self { text, code, answer_at })
    }

    /// Text-only note recorded in place of an abandoned attempt.
    pub fn advisory(failed: &Feedback) -> Self {
        let first = failed.delta.lines().next().unwrap_or("");
        let text = format!("{ADVISORY_PREFIX}{}: {}", failed.sigma, first);
        // A delta may in principle contain delimiter text; fall back to a bare note.
        Self::new(text).unwrap_or_else(|_| Self::new(format!("{ADVISORY_PREFIX}{}", failed.sigma)).expect("plain"))
    }

    /// Placeholder for a generation that produced nothing usable.
    pub fn empty() -> Self {
        Self { text: String::new(), code: None, answer_at: None }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Body of the execute block, if any.
    pub fn code(&self) -> Option<&str> {
        self.code.as_deref()
    }

    pub fn is_answer(&self) -> bool {
        self.answer_at.is_some()
    }

    /// Text following the answer marker.
    pub fn answer_text(&self) -> Option<&str> {
        self.answer_at.map(|i| &self.text[i + ANSWER.len()..])
    }

    pub fn is_advisory(&self) -> bool {
        self.code.is_none() && self.text.starts_with(ADVISORY_PREFIX)
    }
}

impl TryFrom<String> for Action {
    type Error = PolicyError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Action::new(value)
    }
}

impl From<Action> for String {
    fn from(a: Action) -> Self {
        a.text
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub action: Action,
    /// Log-probability or surrogate; higher is better.
    pub lm_score: f64,
}

pub trait Policy: Send + Sync {
    fn generate(&self, state: &State, n: usize, seed: u64) -> Result<Vec<Candidate>, PolicyError>;
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ActionSpec {
    Text(String),
    Scored { text: String, #[serde(default)] score: f64 },
}

#[derive(Debug, Clone, Deserialize)]
struct ScriptFile {
    actions: BTreeMap<String, ActionSpec>,
    states: BTreeMap<String, Vec<String>>,
}

/// Label used for engine-inserted advisory notes in state keys.
pub const REPLAN_LABEL: &str = "replan";
/// Label for committed actions the script does not know.
pub const UNKNOWN_LABEL: &str = "?";

/// Deterministic generator driven by a table from state keys to candidate lists.
///
/// Script files are JSON:
///
/// ```json
/// { "actions": { "sieve": "<|execute|>\nprint(2)\n<|execute_end|>",
///                "done":  { "text": "<|im_start|>answer\n128", "score": -0.5 } },
///   "states":  { "": ["sieve"], "sieve": ["done"] } }
/// ```
///
/// A state's key is the `/`-joined labels of its committed actions (the root
/// is `""`); advisory notes appear as `replan`, unknown text as `?`.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    actions: BTreeMap<String, Candidate>,
    by_text: HashMap<String, String>,
    states: BTreeMap<String, Vec<String>>,
}

impl ScriptedPolicy {
    pub fn from_json(json: &str) -> Result<Self, PolicyError> {
        let file: ScriptFile = serde_json::from_str(json).map_err(|e| PolicyError::InvalidScript(e.to_string()))?;
        let mut actions = BTreeMap::new();
        let mut by_text = HashMap::new();
        for (label, spec) in file.actions {
            if label.is_empty() || label.contains('/') || label == REPLAN_LABEL || label == UNKNOWN_LABEL {
                return Err(PolicyError::InvalidScript(format!("invalid action label '{label}'")));
            }
            let (text, score) = match spec {
                ActionSpec::Text(t) => (t, 0.0),
                ActionSpec::Scored { text, score } => (text, score),
            };
            let action = Action::new(text.clone())
                .map_err(|e| PolicyError::InvalidScript(format!("action '{label}': {e}")))?;
            if let Some(other) = by_text.insert(text, label.clone()) {
                return Err(PolicyError::InvalidScript(format!("actions '{other}' and '{label}' share the same text")));
            }
            actions.insert(label, Candidate { action, lm_score: score });
        }
        for (key, labels) in &file.states {
            if let Some(missing) = labels.iter().find(|l| !actions.contains_key(*l)) {
                return Err(PolicyError::InvalidScript(format!("state '{key}' references unknown action '{missing}'")));
            }
        }
        Ok(Self { actions, by_text, states: file.states })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| PolicyError::InvalidScript(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
    }

    /// Key under which `state` is looked up.
    pub fn state_key(&self, state: &State) -> String {
        let labels: Vec<&str> = state
            .committed()
            .iter()
            .map(|step| {
                if step.action.is_advisory() {
                    REPLAN_LABEL
                } else {
                    self.by_text.get(step.action.text()).map_or(UNKNOWN_LABEL, String::as_str)
                }
            })
            .collect();
        labels.join("/")
    }
}

impl Policy for ScriptedPolicy {
    fn generate(&self, state: &State, n: usize, _seed: u64) -> Result<Vec<Candidate>, PolicyError> {
        let key = self.state_key(state);
        let labels = self.states.get(&key).ok_or_else(|| PolicyError::ScriptExhausted(key.clone()))?;
        if labels.is_empty() {
            return Err(PolicyError::ScriptExhausted(key));
        }
        Ok(labels.iter().take(n.max(1)).map(|l| self.actions[l].clone()).collect())
    }
}

/// Settings for an HTTP completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteSettings {
    pub endpoint: String,
    pub model: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub headers: BTreeMap<String, String>,
    pub timeout_ms: u64,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "default".into(),
            max_tokens: 2048,
            temperature: 0.7,
            headers: BTreeMap::new(),
            timeout_ms: 120_000,
        }
    }
}

/// Environment variable holding a bearer token for the completion endpoint.
pub const API_KEY_ENV: &str = "FEEDLOOP_API_KEY";

/// Stop sequences every remote request carries.
pub const STOP_SEQUENCES: [&str; 2] = [EXECUTE_END, ANSWER];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: u64,
    pub stop: [&'static str; 2],
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct CompletionChoice {
    pub text: String,
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default)]
    pub finish_reason: Option<String>,
    /// The stop string that ended generation, when the server reports it.
    #[serde(default)]
    pub stop: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct CompletionResponse {
    #[serde(default)]
    pub choices: Vec<CompletionChoice>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub score: Option<f64>,
}

impl CompletionResponse {
    /// The first completion, accepting both the `choices` list and a bare `text`.
    pub fn first(self) -> Option<CompletionChoice> {
        match self.text {
            Some(text) if self.choices.is_empty() => Some(CompletionChoice { text, score: self.score, ..Default::default() }),
            _ => self.choices.into_iter().next(),
        }
    }
}

/// Restores the stop delimiter the server consumed so that an execute block
/// is never left open.
pub fn restore_stop(choice: &CompletionChoice) -> String {
    let mut text = choice.text.clone();
    let open = text.rfind(protocol::EXECUTE).is_some_and(|o| !text[o..].contains(EXECUTE_END));
    match choice.stop.as_deref() {
        Some(s) if STOP_SEQUENCES.contains(&s) => text.push_str(s),
        _ if open => text.push_str(EXECUTE_END),
        _ if choice.finish_reason.as_deref() == Some("stop") => text.push_str(ANSWER),
        _ => {}
    }
    text
}

#[derive(Debug, Clone)]
pub struct RemotePolicy {
    settings: RemoteSettings,
}

impl RemotePolicy {
    pub fn new(settings: RemoteSettings) -> Self {
        Self { settings }
    }

    pub fn settings(&self) -> &RemoteSettings {
        &self.settings
    }

    #[cfg(feature = "remote")]
    fn complete(&self, prompt: &str, seed: u64) -> Result<CompletionChoice, PolicyError> {
        let body = CompletionRequest {
            model: &self.settings.model,
            prompt,
            max_tokens: self.settings.max_tokens,
            temperature: self.settings.temperature,
            seed,
            stop: STOP_SEQUENCES,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_millis(self.settings.timeout_ms)))
            .build()
            .into();
        let mut req = agent.post(&self.settings.endpoint);
        for (k, v) in &self.settings.headers {
            req = req.header(k, v);
        }
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| PolicyError::RemoteUnavailable(e.to_string()))?;
        let parsed: CompletionResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| PolicyError::RemoteUnavailable(format!("bad response body: {e}")))?;
        parsed.first().ok_or_else(|| PolicyError::RemoteUnavailable("response carried no completion".into()))
    }

    #[cfg(not(feature = "remote"))]
    fn complete(&self, _prompt: &str, _seed: u64) -> Result<CompletionChoice, PolicyError> {
        Err(PolicyError::RemoteUnavailable("built without the `remote` feature".into()))
    }
}

impl Policy for RemotePolicy {
    fn generate(&self, state: &State, n: usize, seed: u64) -> Result<Vec<Candidate>, PolicyError> {
        let prompt = state.render_prompt();
        let mut out = Vec::with_capacity(n);
        for i in 0..n.max(1) {
            let choice = self.complete(&prompt, seed.wrapping_add(i as u64))?;
            let score = choice.score.unwrap_or(0.0);
            match Action::new(restore_stop(&choice)) {
                Ok(action) => out.push(Candidate { action, lm_score: score }),
                Err(e) if n == 1 => return Err(e),
                Err(_) => {}
            }
        }
        if out.is_empty() {
            return Err(PolicyError::MalformedAction("no well-formed candidate".into()));
        }
        Ok(out)
    }
}

/// The two generator flavours selectable from configuration.
#[derive(Debug, Clone)]
pub enum PolicyKind {
    Scripted(ScriptedPolicy),
    Remote(RemotePolicy),
}

impl Policy for PolicyKind {
    fn generate(&self, state: &State, n: usize, seed: u64) -> Result<Vec<Candidate>, PolicyError> {
        match self {
            PolicyKind::Scripted(p) => p.generate(state, n, seed),
            PolicyKind::Remote(p) => p.generate(state, n, seed),
        }
    }
}

/// How well a candidate responds to recent feedback: 0 for re-running a block
/// that already failed with one of the recent error codes, 1 for naming the
/// most recent error, 0.5 otherwise.
pub fn feedback_fit(candidate: &Candidate, state: &State, recent_feedback: &[Feedback]) -> f64 {
    let recent_errors: HashSet<&str> =
        recent_feedback.iter().filter(|f| !f.is_success()).map(|f| f.sigma.as_str()).collect();
    if let Some(code) = candidate.action.code() {
        let repeats_failure = state.committed().iter().any(|step| {
            !step.feedback.is_success()
                && recent_errors.contains(step.feedback.sigma.as_str())
                && step.action.code() == Some(code)
        });
        if repeats_failure {
            return 0.0;
        }
    }
    let last_error = recent_feedback.iter().rev().find(|f| !f.is_success()).and_then(Feedback::error_name);
    match last_error {
        Some(name) if candidate.action.text().contains(name) => 1.0,
        _ => 0.5,
    }
}

/// Reorders candidates by `alpha * softmax(lm_score) + (1 - alpha) * feedback_fit`,
/// stable for ties.
pub fn rerank_hybrid(candidates: Vec<Candidate>, state: &State, recent_feedback: &[Feedback], alpha: f64) -> Vec<Candidate> {
    if candidates.len() <= 1 {
        return candidates;
    }
    let max = candidates.iter().map(|c| c.lm_score).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = candidates.iter().map(|c| (c.lm_score - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut scored: Vec<(f64, Candidate)> = candidates
        .into_iter()
        .zip(exps)
        .map(|(c, e)| {
            let fit = if alpha < 1.0 { feedback_fit(&c, state, recent_feedback) } else { 0.0 };
            (alpha * (e / z) + (1.0 - alpha) * fit, c)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    scored.into_iter().map(|(_, c)| c).collect()
}
