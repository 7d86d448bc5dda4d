//! Browser bindings: transcript parsing, branch scoring and scripted runs on
//! the builtin evaluator. Every export takes and returns JSON strings.
//!
//! The `*_json` functions carry the logic and are callable from native code;
//! the `#[wasm_bindgen]` wrappers only convert errors.

use feedloop::feedback::Feedback;
use feedloop::policy::{Action, ScriptedPolicy};
use feedloop::protocol;
use feedloop::sandbox::Session;
use feedloop::search::{branch_value as score, BranchConfig, Engine, State};
use feedloop::trajectory::export_transcript;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Parsed {
    segments: Vec<protocol::Segment>,
    /// Rendering the segments reproduces the input exactly.
    round_trip: bool,
}

pub fn parse_transcript_json(text: &str) -> Result<String, String> {
    let segments = protocol::parse(text).map_err(|e| e.to_string())?;
    let round_trip = protocol::render(&segments).is_ok_and(|r| r == text);
    Ok(serde_json::to_string(&Parsed { segments, round_trip }).expect("segments serialize"))
}

#[derive(Deserialize)]
struct ValueRequest {
    #[serde(default)]
    problem: String,
    /// Feedback already committed on the branch, oldest first.
    #[serde(default)]
    history: Vec<Feedback>,
    action: String,
    feedback: Feedback,
    #[serde(default)]
    config: Option<BranchConfig>,
}

fn config_or_default(cfg: Option<BranchConfig>) -> Result<BranchConfig, String> {
    let cfg = cfg.unwrap_or_default();
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn branch_value_json(request: &str) -> Result<String, String> {
    let req: ValueRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let cfg = config_or_default(req.config)?;
    let action = Action::new(req.action.as_str()).map_err(|e| e.to_string())?;
    // History is replayed with no horizon so long branches are not cut short.
    let unbounded = BranchConfig { horizon_t: u32::MAX, token_budget: u64::MAX, ..cfg.clone() };
    let mut state = State::new(req.problem);
    for f in req.history {
        state = state.transition(Action::empty(), f, 0, &unbounded);
    }
    let m = score(&state, &action, &req.feedback, &cfg);
    Ok(serde_json::json!({ "g": m.g, "p": m.p, "c": m.c, "v_b": m.v_b }).to_string())
}

#[derive(Deserialize)]
struct RunRequest {
    problem: String,
    script: serde_json::Value,
    #[serde(default)]
    config: Option<BranchConfig>,
    #[serde(default)]
    seed: u64,
}

pub fn run_scripted_json(request: &str) -> Result<String, String> {
    let req: RunRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let cfg = config_or_default(req.config)?;
    let policy = ScriptedPolicy::from_json(&req.script.to_string()).map_err(|e| e.to_string())?;
    let factory = || Ok(Session::builtin());
    let run = Engine::new(&policy, &cfg, req.seed).run(&req.problem, &factory).map_err(|e| e.to_string())?;
    let trajectory: serde_json::Value = serde_json::from_str(&run.to_json()).expect("trajectory is JSON");
    Ok(serde_json::json!({
        "trajectory": trajectory,
        "transcript": export_transcript(&run, false),
        "transcript_with_abandoned": export_transcript(&run, true),
        "hash": run.hash(),
    })
    .to_string())
}

#[wasm_bindgen]
pub fn parse_transcript(text: &str) -> Result<String, JsError> {
    parse_transcript_json(text).map_err(|e| JsError::new(&e))
}

/// `{problem?, history?, action, feedback, config?}` to `{g, p, c, v_b}`.
#[wasm_bindgen]
pub fn branch_value(request: &str) -> Result<String, JsError> {
    branch_value_json(request).map_err(|e| JsError::new(&e))
}

/// `{problem, script, config?, seed?}` to `{trajectory, transcript, transcript_with_abandoned, hash}`.
#[wasm_bindgen]
pub fn run_scripted(request: &str) -> Result<String, JsError> {
    run_scripted_json(request).map_err(|e| JsError::new(&e))
}
