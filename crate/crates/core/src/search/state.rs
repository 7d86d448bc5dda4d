use serde::{Deserialize, Serialize};

use super::config::BranchConfig;
use crate::feedback::Feedback;
use crate::policy::Action;
use crate::transcript;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerminalKind {
    AnswerEmitted,
    BudgetExhausted,
    ReplanLimit,
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TerminalStatus {
    pub kind: TerminalKind,
    pub success: bool,
}

impl TerminalStatus {
    pub fn new(kind: TerminalKind) -> Self {
        Self { kind, success: kind == TerminalKind::AnswerEmitted }
    }
}

/// One committed (action, feedback) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub action: Action,
    pub feedback: Feedback,
}

/// Problem text plus the model-visible history. Abandoned attempts never
/// appear here; they live only in the run log.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    problem: String,
    committed: Vec<Step>,
    replans_used: u32,
    terminal: Option<TerminalStatus>,
    tokens_used: u64,
    cost: u32,
}

impl State {
    pub fn new(problem: impl Into<String>) -> Self {
        Self { problem: problem.into(), committed: Vec::new(), replans_used: 0, terminal: None, tokens_used: 0, cost: 0 }
    }

    pub fn problem(&self) -> &str {
        &self.problem
    }

    pub fn committed(&self) -> &[Step] {
        &self.committed
    }

    /// Step index; always the number of committed pairs.
    pub fn t(&self) -> usize {
        self.committed.len()
    }

    pub fn replans_used(&self) -> u32 {
        self.replans_used
    }

    pub fn terminal(&self) -> Option<TerminalStatus> {
        self.terminal
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }

    /// Tokens spent reaching this state, abandoned attempts included.
    pub fn tokens_used(&self) -> u64 {
        self.tokens_used
    }

    /// Executed actions on this branch, abandoned attempts included.
    pub fn cost(&self) -> u32 {
        self.cost
    }

    /// The prompt a generator sees: problem, think marker, then history.
    pub fn render_prompt(&self) -> String {
        let mut out = transcript::header(&self.problem);
        for step in &self.committed {
            transcript::push_step(&mut out, step.action.text(), step.action.code().is_some(), &step.feedback);
        }
        out
    }

    fn over_budget(&self, cfg: &BranchConfig) -> bool {
        self.t() >= cfg.horizon_t as usize || self.tokens_used > cfg.token_budget
    }

    /// `s ⊕ (a, f)`. Spending `tokens` and, when the action carries code, one
    /// unit of cost. Terminal states are returned unchanged.
    pub fn transition(&self, action: Action, feedback: Feedback, tokens: u64, cfg: &BranchConfig) -> State {
        if self.is_terminal() {
            return self.clone();
        }
        let mut next = self.clone();
        if action.code().is_some() {
            next.cost = next.cost.saturating_add(1);
        }
        next.tokens_used += tokens;
        next.committed.push(Step { action, feedback });
        if next.over_budget(cfg) {
            next.terminal = Some(TerminalStatus::new(TerminalKind::BudgetExhausted));
        }
        next
    }

    /// Commits an answer action. Answers end the run regardless of budget.
    pub fn commit_answer(&self, action: Action, tokens: u64) -> State {
        if self.is_terminal() {
            return self.clone();
        }
        let mut next = self.clone();
        next.tokens_used += tokens;
        next.committed.push(Step { action, feedback: Feedback::text_only() });
        next.terminal = Some(TerminalStatus::new(TerminalKind::AnswerEmitted));
        next
    }

    /// Abandons a failed attempt: the failed pair is not part of `self`
    /// (callers pass the last stable state), an advisory note takes its place.
    pub fn replan(&self, failed: &Feedback, cfg: &BranchConfig) -> State {
        if self.is_terminal() {
            return self.clone();
        }
        let mut next = self.clone();
        next.committed.push(Step { action: Action::advisory(failed), feedback: Feedback::text_only() });
        next.replans_used += 1;
        if next.replans_used > cfg.r_max {
            next.terminal = Some(TerminalStatus::new(TerminalKind::ReplanLimit));
        } else if next.over_budget(cfg) {
            next.terminal = Some(TerminalStatus::new(TerminalKind::BudgetExhausted));
        }
        next
    }

    pub(crate) fn with_spend_of(mut self, other: &State) -> State {
        self.tokens_used = other.tokens_used;
        self.cost = other.cost;
        self
    }

    pub(crate) fn into_terminal(mut self, kind: TerminalKind) -> State {
        if self.terminal.is_none() {
            self.terminal = Some(TerminalStatus::new(kind));
        }
        self
    }
}
