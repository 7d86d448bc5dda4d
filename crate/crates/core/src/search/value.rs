use serde::{Deserialize, Serialize};

use super::config::{BranchConfig, Gain};
use super::state::State;
use crate::feedback::{estimate_prior, Feedback, FeedbackDistribution, Status};
use crate::policy::Action;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchMetrics {
    /// Information gain.
    pub g: f64,
    /// Path progress in [0, 1].
    pub p: f64,
    /// Error indicator, 0 or 1.
    pub c: f64,
    pub v_b: f64,
}

/// The frontier of a search round.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSet {
    pub active: Vec<(State, BranchMetrics)>,
    pub depth: usize,
}

/// `KL(posterior || prior)` in nats. Terms with zero posterior mass vanish;
/// `prior` must have full support wherever `posterior` has mass.
pub fn info_gain(posterior: &FeedbackDistribution, prior: &FeedbackDistribution) -> f64 {
    let kl: f64 = posterior
        .weights()
        .iter()
        .zip(prior.weights())
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q).ln())
        .sum();
    kl.max(0.0)
}

/// Weights for the value, error and progress components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainWeights {
    pub w_v: f64,
    pub w_e: f64,
    pub w_p: f64,
}

impl From<&BranchConfig> for GainWeights {
    fn from(cfg: &BranchConfig) -> Self {
        Self { w_v: cfg.w_v, w_e: cfg.w_e, w_p: cfg.w_p }
    }
}

/// `w_v * V + w_e * E + w_p * P`: a fresh value, an informative error, and
/// visible progress each count as information.
pub fn info_gain_decomposed(state: &State, _action: &Action, f: &Feedback, weights: GainWeights) -> f64 {
    let fresh = match f.v {
        Some(v) => !state.committed().iter().any(|s| s.feedback.v == Some(v)),
        None => false,
    };
    let e = match f.status {
        Status::Success => 0.0,
        Status::RecoverableError if !f.delta.is_empty() => 1.0,
        _ => 0.5,
    };
    let p = if f.is_success() && !f.delta.is_empty() { 1.0 } else { 0.0 };
    weights.w_v * f64::from(u8::from(fresh)) + weights.w_e * e + weights.w_p * p
}

/// Posterior over the last `window` feedbacks on the branch, `f` included.
pub fn branch_posterior(state: &State, f: &Feedback, window: usize, smoothing: f64) -> FeedbackDistribution {
    let history = state.committed();
    let keep = window.saturating_sub(1).min(history.len());
    let recent = history[history.len() - keep..].iter().map(|s| &s.feedback);
    estimate_prior(recent.chain(std::iter::once(f)), smoothing)
}

pub fn combine(cfg: &BranchConfig, g: f64, p: f64, c: f64) -> f64 {
    cfg.lambda_i * g + cfg.lambda_p * p + cfg.lambda_c * c
}

/// Scores the feedback `f` obtained by acting from `state`, whose step index
/// supplies the progress term.
pub fn branch_value(state: &State, action: &Action, f: &Feedback, cfg: &BranchConfig) -> BranchMetrics {
    let g = match cfg.gain {
        Gain::Decomposed => info_gain_decomposed(state, action, f, cfg.into()),
        Gain::Kl => info_gain(
            &branch_posterior(state, f, cfg.kl_window, cfg.prior_smoothing),
            &cfg.prior_distribution(),
        ),
    };
    let p = if f.is_success() { state.t() as f64 / f64::from(cfg.horizon_t) } else { 0.0 };
    let c = if f.is_success() { 0.0 } else { 1.0 };
    BranchMetrics { g, p, c, v_b: combine(cfg, g, p, c) }
}
