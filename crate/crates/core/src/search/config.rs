use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::feedback::FeedbackDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Linear,
    Bvs,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Mode::Linear),
            "bvs" => Ok(Mode::Bvs),
            other => Err(format!("unknown mode '{other}' (expected linear|bvs)")),
        }
    }
}

/// Rule deciding whether a failed attempt is repaired in place or abandoned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    /// Repair when the branch value clears `tau`.
    BranchValue,
    /// Repair any error until the retry limit.
    ErrorIndicator,
}

/// How the information-gain term is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    Decomposed,
    Kl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchConfig {
    pub lambda_i: f64,
    pub lambda_p: f64,
    pub lambda_c: f64,
    pub tau: f64,
    pub w_v: f64,
    pub w_e: f64,
    pub w_p: f64,
    pub alpha: f64,
    /// Retry limit per step; also the deepest chain of consecutive repairs.
    pub d_max: u32,
    /// Executed actions allowed on one branch (search mode only).
    pub c_max: u32,
    pub r_max: u32,
    pub horizon_t: u32,
    pub mode: Mode,
    /// Defaults to 1 in linear mode and 3 in search mode.
    pub n_candidates: Option<usize>,
    pub token_budget: u64,
    pub gate: Gate,
    /// Frontier cap per round; unbounded when absent.
    pub beam_width: Option<usize>,
    pub gain: Gain,
    /// Number of recent feedbacks forming the posterior in KL mode.
    pub kl_window: usize,
    pub prior_smoothing: f64,
    /// Category weights of the feedback prior; uniform when absent.
    pub prior: Option<[f64; 5]>,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            lambda_i: 1.0,
            lambda_p: 0.5,
            lambda_c: -0.5,
            tau: 0.1,
            w_v: 0.4,
            w_e: 0.3,
            w_p: 0.3,
            alpha: 0.7,
            d_max: 3,
            c_max: 16,
            r_max: 4,
            horizon_t: 32,
            mode: Mode::Linear,
            n_candidates: None,
            token_budget: 32_768,
            gate: Gate::BranchValue,
            beam_width: None,
            gain: Gain::Decomposed,
            kl_window: 8,
            prior_smoothing: 1.0,
            prior: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

impl BranchConfig {
    pub fn bvs() -> Self {
        Self { mode: Mode::Bvs, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError(msg));
        if !(self.lambda_i >= 0.0 && self.lambda_i.is_finite()) {
            return fail(format!("lambda_i must be a nonnegative real, got {}", self.lambda_i));
        }
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return fail(format!("lambda_p must be a nonnegative real, got {}", self.lambda_p));
        }
        if !(self.lambda_c <= 0.0 && self.lambda_c.is_finite()) {
            return fail(format!("lambda_c must be a nonpositive real, got {}", self.lambda_c));
        }
        if self.tau.is_nan() {
            return fail("tau must not be NaN".into());
        }
        let ws = [self.w_v, self.w_e, self.w_p];
        if ws.iter().any(|w| w.is_nan() || *w < 0.0) || (ws.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail(format!("w_v, w_e, w_p must be nonnegative and sum to 1, got {ws:?}"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        for (name, v) in [("d_max", self.d_max), ("c_max", self.c_max), ("r_max", self.r_max), ("horizon_t", self.horizon_t)] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.horizon_t < self.d_max {
            return fail(format!("horizon_t ({}) must be at least d_max ({})", self.horizon_t, self.d_max));
        }
        if self.n_candidates == Some(0) || self.beam_width == Some(0) {
            return fail("n_candidates and beam_width must be positive".into());
        }
        if self.token_budget == 0 || self.kl_window == 0 {
            return fail("token_budget and kl_window must be positive".into());
        }
        if !(self.prior_smoothing > 0.0 && self.prior_smoothing.is_finite()) {
            return fail(format!("prior_smoothing must be positive, got {}", self.prior_smoothing));
        }
        if let Some(p) = self.prior {
            if FeedbackDistribution::new(p).is_err() || p.iter().any(|w| *w <= 0.0) {
                return fail("prior must be a full-support distribution over 5 categories".into());
            }
        }
        Ok(())
    }

    pub fn candidates(&self) -> usize {
        self.n_candidates.unwrap_or(match self.mode {
            Mode::Linear => 1,
            Mode::Bvs => 3,
        })
    }

    pub fn prior_distribution(&self) -> FeedbackDistribution {
        self.prior.and_then(|p| FeedbackDistribution::new(p).ok()).unwrap_or_else(FeedbackDistribution::uniform)
    }

    /// The configuration the engine actually runs. Linear mode is the
    /// single-branch, error-gated, one-candidate case of search.
    pub fn effective(&self) -> BranchConfig {
        let mut cfg = self.clone();
        cfg.n_candidates = Some(self.candidates());
        if self.mode == Mode::Linear {
            cfg.gate = Gate::ErrorIndicator;
            cfg.beam_width = Some(1);
            cfg.n_candidates = Some(1);
        }
        cfg
    }

    /// Stable text form of the effective configuration. Mode is omitted since
    /// the other fields fully determine the search.
    pub fn canonical(&self) -> String {
        let c = self.effective();
        let mut s = String::new();
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
        let _ = write!(
            s,
            "lambda_i={:?};lambda_p={:?};lambda_c={:?};tau={:?};w_v={:?};w_e={:?};w_p={:?};alpha={:?};\
             d_max={};c_max={};r_max={};horizon_t={};n_candidates={};token_budget={};gate={:?};\
             beam_width={};gain={:?};kl_window={};prior_smoothing={:?};prior={:?}",
            c.lambda_i,
            c.lambda_p,
            c.lambda_c,
            c.tau,
            c.w_v,
            c.w_e,
            c.w_p,
            c.alpha,
            c.d_max,
            c.c_max,
            c.r_max,
            c.horizon_t,
            opt(c.n_candidates),
            c.token_budget,
            c.gate,
            opt(c.beam_width),
            c.gain,
            c.kl_window,
            c.prior_smoothing,
            c.prior_distribution().weights(),
        );
        s
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}
