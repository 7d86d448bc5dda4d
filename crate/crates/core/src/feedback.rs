//! Structured feedback `(v, sigma, delta)` plus a coarse status.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::sandbox::ExecutionResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Success,
    RecoverableError,
    FatalError,
    Timeout,
}

/// What the environment reported for one executed action.
///
/// `v` is the value channel (absent for failures and for runs that produced
/// nothing numeric), `sigma` the semantic type tag, `delta` the descriptive
/// text: captured output on success, the error message otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub v: Option<f64>,
    pub sigma: String,
    pub delta: String,
    pub status: Status,
}

pub const ERROR_PREFIX: &str = "error:";

/// Exception names whose runs are worth repairing in place.
pub const RECOVERABLE: &[&str] = &[
    "NameError",
    "UnboundLocalError",
    "TypeError",
    "ZeroDivisionError",
    "IndexError",
    "KeyError",
    "AssertionError",
    "ImportError",
    "ModuleNotFoundError",
];

impl Feedback {
    /// Feedback for actions that carry no execute block (plain reasoning text,
    /// advisory notes, answers).
    pub fn text_only() -> Self {
        Self { v: None, sigma: "none".into(), delta: String::new(), status: Status::Success }
    }

    pub fn error(name: &str, message: impl Into<String>, status: Status) -> Self {
        debug_assert!(status != Status::Success);
        Self { v: None, sigma: format!("{ERROR_PREFIX}{name}"), delta: message.into(), status }
    }

    pub fn is_success(&self) -> bool {
        self.status == Status::Success
    }

    /// Exception name for failures, e.g. `ZeroDivisionError`.
    pub fn error_name(&self) -> Option<&str> {
        self.sigma.strip_prefix(ERROR_PREFIX)
    }

    /// Body placed between the feedback delimiters in a transcript.
    pub fn transcript_body(&self) -> String {
        match self.error_name() {
            Some(name) if !self.is_success() => {
                let mut s = if self.delta.is_empty() { name.to_string() } else { format!("{name}: {}", self.delta) };
                if !s.ends_with('\n') {
                    s.push('\n');
                }
                s
            }
            _ => {
                let mut s = self.delta.clone();
                if !s.is_empty() && !s.ends_with('\n') {
                    s.push('\n');
                }
                s
            }
        }
    }

    pub fn category(&self) -> Category {
        match self.status {
            Status::Success if self.v.is_some() => Category::SuccessWithValue,
            Status::Success => Category::SuccessNoValue,
            Status::RecoverableError => Category::RecoverableError,
            Status::FatalError => Category::FatalError,
            Status::Timeout => Category::Timeout,
        }
    }
}

/// Parses a numeric literal in the forms the sandboxes print: integers,
/// decimals/exponent floats, `True`/`False`, and `n/d` rationals.
fn parse_number(s: &str) -> Option<(f64, &'static str)> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    match s {
        "True" => return Some((1.0, "bool")),
        "False" => return Some((0.0, "bool")),
        _ => {}
    }
    let digits = s.strip_prefix('-').unwrap_or(s);
    if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
        return s.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| (v, "int"));
    }
    if let Some((n, d)) = s.split_once('/') {
        let n = n.trim().parse::<i128>().ok()?;
        let d = d.trim().parse::<i128>().ok()?;
        return (d != 0).then(|| (n as f64 / d as f64, "float"));
    }
    let looks_float = s.bytes().any(|b| b.is_ascii_digit())
        && s.bytes().all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E'));
    if looks_float {
        return s.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| (v, "float"));
    }
    None
}

fn type_of_repr(repr: &str) -> &'static str {
    let r = repr.trim();
    if r == "None" {
        "none"
    } else if r.starts_with('[') || r.starts_with('(') {
        "list"
    } else {
        "string"
    }
}

pub fn classify(raw: &ExecutionResult) -> Feedback {
    if raw.timed_out {
        let msg = raw.exception_message.clone().unwrap_or_else(|| "execution timed out".into());
        return Feedback::error("Timeout", msg, Status::Timeout);
    }
    if let Some(name) = raw.exception_name.as_deref() {
        let status = if RECOVERABLE.contains(&name) { Status::RecoverableError } else { Status::FatalError };
        return Feedback::error(name, raw.exception_message.clone().unwrap_or_default(), status);
    }
    let delta = raw.stdout.clone();
    // A bare `None` (e.g. a trailing print call) carries no value; fall back to stdout.
    if let Some(repr) = raw.value_repr.as_deref().filter(|r| r.trim() != "None") {
        return match parse_number(repr) {
            Some((v, sigma)) => Feedback { v: Some(v), sigma: sigma.into(), delta, status: Status::Success },
            None => Feedback { v: None, sigma: type_of_repr(repr).into(), delta, status: Status::Success },
        };
    }
    let last_line = raw.stdout.lines().rev().find(|l| !l.trim().is_empty());
    match last_line {
        Some(line) => match parse_number(line) {
            Some((v, sigma)) => Feedback { v: Some(v), sigma: sigma.into(), delta, status: Status::Success },
            None => Feedback { v: None, sigma: type_of_repr(line).into(), delta, status: Status::Success },
        },
        None => Feedback { v: None, sigma: "none".into(), delta, status: Status::Success },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    SuccessWithValue,
    SuccessNoValue,
    RecoverableError,
    FatalError,
    Timeout,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::SuccessWithValue,
        Category::SuccessNoValue,
        Category::RecoverableError,
        Category::FatalError,
        Category::Timeout,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::SuccessWithValue => "success-with-value",
            Category::SuccessNoValue => "success-no-value",
            Category::RecoverableError => "recoverable-error",
            Category::FatalError => "fatal-error",
            Category::Timeout => "timeout",
        };
        f.write_str(s)
    }
}

/// Categorical distribution over the five feedback categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackDistribution {
    weights: [f64; 5],
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("weights must be nonnegative and sum to 1 (got sum {sum})")]
pub struct NotADistribution {
    pub sum: f64,
}

impl FeedbackDistribution {
    pub fn uniform() -> Self {
        Self { weights: [0.2; 5] }
    }

    pub fn new(weights: [f64; 5]) -> Result<Self, NotADistribution> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(NotADistribution { sum });
        }
        Ok(Self { weights })
    }

    /// Normalizes arbitrary nonnegative mass.
    pub fn from_counts(counts: [f64; 5]) -> Result<Self, NotADistribution> {
        let sum: f64 = counts.iter().sum();
        if counts.iter().any(|c| c.is_nan() || *c < 0.0) || sum.is_nan() || sum <= 0.0 {
            return Err(NotADistribution { sum });
        }
        Ok(Self { weights: counts.map(|c| c / sum) })
    }

    pub fn point_mass(category: Category) -> Self {
        let mut weights = [0.0; 5];
        weights[category.index()] = 1.0;
        Self { weights }
    }

    pub fn weight(&self, category: Category) -> f64 {
        self.weights[category.index()]
    }

    pub fn weights(&self) -> &[f64; 5] {
        &self.weights
    }
}

/// Laplace-smoothed category frequencies. Empty history gives the uniform
/// distribution.
///
/// # Panics
/// If `smoothing` is not strictly positive.
pub fn estimate_prior<'a>(history: impl IntoIterator<Item = &'a Feedback>, smoothing: f64) -> FeedbackDistribution {
    assert!(smoothing > 0.0, "smoothing must be positive");
    let mut counts = [smoothing; 5];
    for f in history {
        counts[f.category().index()] += 1.0;
    }
    FeedbackDistribution::from_counts(counts).expect("smoothed counts are positive")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw() -> ExecutionResult {
        ExecutionResult::default()
    }

    fn success(v: f64) -> Feedback {
        Feedback { v: Some(v), sigma: "int".into(), delta: format!("{v}\n"), status: Status::Success }
    }

    #[test]
    fn zero_division_is_recoverable() {
        let r = ExecutionResult {
            exception_name: Some("ZeroDivisionError".into()),
            exception_message: Some("division by zero".into()),
            ..raw()
        };
        let f = classify(&r);
        assert_eq!(f, Feedback {
            v: None,
            sigma: "error:ZeroDivisionError".into(),
            delta: "division by zero".into(),
            status: Status::RecoverableError,
        });
        assert_eq!(f.transcript_body(), "ZeroDivisionError: division by zero\n");
    }

    #[test]
    fn printed_integer_becomes_the_value() {
        let f = classify(&ExecutionResult { stdout: "128\n".into(), ..raw() });
        assert_eq!(f, Feedback { v: Some(128.0), sigma: "int".into(), delta: "128\n".into(), status: Status::Success });
        assert_eq!(f.transcript_body(), "128\n");
    }

    #[test]
    fn vacuous_run() {
        let f = classify(&raw());
        assert_eq!(f, Feedback { v: None, sigma: "none".into(), delta: String::new(), status: Status::Success });
    }

    #[test]
    fn value_repr_wins_over_stdout() {
        let f = classify(&ExecutionResult { stdout: "7\n".into(), value_repr: Some("2".into()), ..raw() });
        assert_eq!(f.v, Some(2.0));
        let f = classify(&ExecutionResult { value_repr: Some("[2, 3, 5]".into()), ..raw() });
        assert_eq!((f.v, f.sigma.as_str()), (None, "list"));
        let f = classify(&ExecutionResult { value_repr: Some("True".into()), ..raw() });
        assert_eq!((f.v, f.sigma.as_str()), (Some(1.0), "bool"));
        let f = classify(&ExecutionResult { value_repr: Some("3/4".into()), ..raw() });
        assert_eq!((f.v, f.sigma.as_str()), (Some(0.75), "float"));
    }

    #[test]
    fn text_output_without_number() {
        let f = classify(&ExecutionResult { stdout: "[2, 3, 5, 7, 11, 13, 17, 19]\nNumber of distinct prime factors (k): 8\n".into(), ..raw() });
        assert_eq!((f.v, f.sigma.as_str(), f.status), (None, "string", Status::Success));
    }

    #[test]
    fn syntax_errors_and_crashes_are_fatal() {
        for name in ["SyntaxError", "WorkerCrash", "RecursionError"] {
            let f = classify(&ExecutionResult { exception_name: Some(name.into()), ..raw() });
            assert_eq!(f.status, Status::FatalError);
            assert!(f.sigma.starts_with(ERROR_PREFIX));
        }
    }

    #[test]
    fn timeout_status() {
        let f = classify(&ExecutionResult { timed_out: true, ..raw() });
        assert_eq!((f.status, f.sigma.as_str(), f.v), (Status::Timeout, "error:Timeout", None));
    }

    #[test]
    fn categories() {
        assert_eq!(success(128.0).category(), Category::SuccessWithValue);
        assert_eq!(Feedback::error("TypeError", "x", Status::RecoverableError).category(), Category::RecoverableError);
        assert_eq!(Feedback::error("Timeout", "", Status::Timeout).category(), Category::Timeout);
        assert_eq!(Feedback::text_only().category(), Category::SuccessNoValue);
    }

    #[test]
    fn prior_from_empty_history_is_uniform() {
        let d = estimate_prior(std::iter::empty(), 1.0);
        for c in Category::ALL {
            assert!((d.weight(c) - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn laplace_counts() {
        let err = Feedback::error("ZeroDivisionError", "division by zero", Status::RecoverableError);
        let hist = [success(1.0), success(2.0), success(3.0), err];
        let d = estimate_prior(&hist, 1.0);
        let expected = [4.0 / 9.0, 1.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0];
        for (w, e) in d.weights().iter().zip(expected) {
            assert!((w - e).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_smoothing_concentrates_on_observed() {
        let hist = [Feedback::error("Timeout", "", Status::Timeout)];
        let d = estimate_prior(&hist, 1e-12);
        assert!(d.weight(Category::Timeout) > 1.0 - 1e-10);
    }

    #[test]
    fn distribution_validation() {
        assert!(FeedbackDistribution::new([0.5, 0.5, 0.0, 0.0, 0.0]).is_ok());
        assert!(FeedbackDistribution::new([0.5, 0.6, 0.0, 0.0, 0.0]).is_err());
        assert!(FeedbackDistribution::new([1.5, -0.5, 0.0, 0.0, 0.0]).is_err());
    }
}
