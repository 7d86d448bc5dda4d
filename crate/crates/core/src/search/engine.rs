use super::config::{BranchConfig, Gate, Mode};
use super::state::{State, TerminalKind};
use super::value::{branch_value, BranchMetrics, BranchSet};
use crate::feedback::{Feedback, Status};
use crate::policy::{rerank_hybrid, Action, Policy, PolicyError};
use crate::sandbox::{SandboxError, Session};
use crate::trajectory::{StepRecord, Trajectory};

/// Approximate token measure used for budgets and statistics.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> u64;
}

/// Counts whitespace-delimited chunks.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> u64 {
        text.split_whitespace().count() as u64
    }
}

/// Opens a fresh session for a new branch or a replayed one.
pub type EnvFactory<'f> = dyn Fn() -> Result<Session, SandboxError> + 'f;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AttemptKind {
    Answer,
    Acted,
    Synthetic,
}

struct Attempt {
    action: Action,
    feedback: Feedback,
    tokens: u64,
    kind: AttemptKind,
}

impl Attempt {
    fn record(&self, retry_index: u32) -> StepRecord {
        StepRecord {
            action_text: self.action.text().to_string(),
            feedback: self.feedback.clone(),
            abandoned: false,
            retry_index,
            tokens: self.tokens,
        }
    }

    /// A generator failure surfaced as a failed attempt that never ran.
    fn synthetic(err: &PolicyError) -> Self {
        Attempt {
            action: Action::empty(),
            feedback: Feedback::error(err.name(), err.to_string(), Status::FatalError),
            tokens: 0,
            kind: AttemptKind::Synthetic,
        }
    }
}

/// Where a failed branch falls back to when it is abandoned.
#[derive(Debug, Clone)]
struct Fallback {
    state: State,
    failed: Feedback,
    /// First log entry that gets flagged abandoned.
    mark: usize,
}

struct Node {
    state: State,
    log: Vec<StepRecord>,
    env: Option<Session>,
    /// Executed code in log order, for rebuilding sessions that cannot fork.
    codes: Vec<String>,
    /// Consecutive failed attempts ending at this node.
    depth: u32,
    stable: Option<Fallback>,
    metrics: BranchMetrics,
}

struct Child {
    node: Node,
    fallback: Option<Fallback>,
}

/// Children of one expansion: (answers, kept, dropped).
type Expansion = (Vec<Child>, Vec<Child>, Vec<Child>);

fn best_index(children: &[Child]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in children.iter().enumerate() {
        if best.is_none_or(|b| c.node.metrics.v_b > children[b].node.metrics.v_b) {
            best = Some(i);
        }
    }
    best
}

fn mark_abandoned(log: &mut [StepRecord], from: usize) {
    for r in log.iter_mut().skip(from) {
        r.abandoned = true;
    }
}

/// Drives a policy against an environment. One engine serves any number of
/// runs; it holds no per-run state.
pub struct Engine<'a> {
    policy: &'a dyn Policy,
    cfg: BranchConfig,
    seed: u64,
    counter: &'a dyn TokenCounter,
}

impl<'a> Engine<'a> {
    /// `cfg` is normalized to its effective form; linear mode becomes the
    /// single-candidate, error-gated search.
    pub fn new(policy: &'a dyn Policy, cfg: &BranchConfig, seed: u64) -> Self {
        Self { policy, cfg: cfg.effective(), seed, counter: &WhitespaceCounter }
    }

    pub fn with_counter(mut self, counter: &'a dyn TokenCounter) -> Self {
        self.counter = counter;
        self
    }

    pub fn config(&self) -> &BranchConfig {
        &self.cfg
    }

    fn generation_seed(&self, state: &State) -> u64 {
        self.seed
            .wrapping_add((state.t() as u64).wrapping_mul(1_000_003))
            .wrapping_add(u64::from(state.replans_used()))
    }

    fn propose(&self, state: &State, log: &[StepRecord]) -> Result<Vec<Action>, PolicyError> {
        let n = self.cfg.candidates();
        let cands = self.policy.generate(state, n, self.generation_seed(state))?;
        let skip = log.len().saturating_sub(self.cfg.kl_window);
        let recent: Vec<Feedback> = log[skip..].iter().map(|r| r.feedback.clone()).collect();
        Ok(rerank_hybrid(cands, state, &recent, self.cfg.alpha).into_iter().take(n).map(|c| c.action).collect())
    }

    fn attempt(&self, action: Action, session: &mut Session) -> Attempt {
        if action.is_answer() {
            let tokens = self.counter.count(action.text());
            return Attempt { action, feedback: Feedback::text_only(), tokens, kind: AttemptKind::Answer };
        }
        let feedback = match action.code() {
            Some(code) => session
                .run(code)
                .unwrap_or_else(|e| Feedback::error("SessionClosed", e.to_string(), Status::FatalError)),
            None => Feedback::text_only(),
        };
        let mut tokens = self.counter.count(action.text());
        if action.code().is_some() {
            tokens += self.counter.count(&feedback.transcript_body());
        }
        Attempt { action, feedback, tokens, kind: AttemptKind::Acted }
    }

    /// Top-ranked attempt from `state`, or the malformed terminal.
    fn next_attempt(&self, state: &State, log: &[StepRecord], session: &mut Session) -> Result<Attempt, State> {
        match self.propose(state, log) {
            Ok(actions) => match actions.into_iter().next() {
                Some(a) => Ok(self.attempt(a, session)),
                None => Ok(Attempt::synthetic(&PolicyError::ScriptExhausted("no candidates".into()))),
            },
            Err(PolicyError::MalformedAction(_)) => Err(state.clone().into_terminal(TerminalKind::Malformed)),
            Err(e) => Ok(Attempt::synthetic(&e)),
        }
    }

    fn abandon(&self, stable: &State, spent: &State, failed: &Feedback, log: &mut [StepRecord], mark: usize) -> State {
        mark_abandoned(log, mark);
        stable.clone().with_spend_of(spent).replan(failed, &self.cfg)
    }

    /// One step of branch exploration. A success extends the state; a failure
    /// opens an exploration state that is repaired in place (up to one repair
    /// when gated by branch value, up to `d_max` when gated by error) or
    /// abandoned through a replan. Every attempt is appended to `log`.
    pub fn bex_step(&self, state: &State, log: &mut Vec<StepRecord>, session: &mut Session) -> State {
        if state.is_terminal() {
            return state.clone();
        }
        let first = match self.next_attempt(state, log, session) {
            Ok(a) => a,
            Err(terminal) => return terminal,
        };
        log.push(first.record(0));
        if first.kind == AttemptKind::Answer {
            return state.commit_answer(first.action, first.tokens);
        }
        let mark = log.len() - 1;
        let failed = first.feedback.clone();
        let explore = state.transition(first.action.clone(), first.feedback, first.tokens, &self.cfg);
        if failed.is_success() || explore.is_terminal() {
            return explore;
        }
        let max_repairs = match self.cfg.gate {
            Gate::BranchValue => {
                if branch_value(state, &first.action, &failed, &self.cfg).v_b <= self.cfg.tau {
                    return self.abandon(state, &explore, &failed, log, mark);
                }
                1
            }
            Gate::ErrorIndicator => self.cfg.d_max,
        };
        let mut cur = explore;
        for r in 1..=max_repairs {
            let att = match self.next_attempt(&cur, log, session) {
                Ok(a) => a,
                Err(terminal) => return terminal,
            };
            log.push(att.record(r));
            if att.kind == AttemptKind::Answer {
                return cur.commit_answer(att.action, att.tokens);
            }
            let ok = att.feedback.is_success();
            let next = cur.transition(att.action, att.feedback, att.tokens, &self.cfg);
            if ok || next.is_terminal() {
                return next;
            }
            cur = next;
        }
        self.abandon(state, &cur, &failed, log, mark)
    }

    fn finish(&self, state: &State, steps: Vec<StepRecord>) -> Trajectory {
        Trajectory::new(
            state.problem(),
            self.seed,
            self.cfg.digest(),
            state.terminal().expect("finished runs are terminal"),
            state.tokens_used(),
            steps,
        )
    }

    /// Repeats [`Engine::bex_step`] on one session until a terminal state.
    pub fn linear_retry(&self, problem: &str, session: &mut Session) -> Trajectory {
        let mut state = State::new(problem);
        let mut log = Vec::new();
        while !state.is_terminal() {
            state = self.bex_step(&state, &mut log, session);
        }
        self.finish(&state, log)
    }

    fn fork(&self, node: &Node, factory: &EnvFactory<'_>) -> Result<Session, SandboxError> {
        let env = node.env.as_ref().ok_or(SandboxError::SessionClosed)?;
        match env.try_clone() {
            Ok(s) => Ok(s),
            Err(SandboxError::EnvironmentCloneUnsupported) => {
                let mut s = factory()?;
                for code in &node.codes {
                    s.run(code)?;
                }
                Ok(s)
            }
            Err(e) => Err(e),
        }
    }

    fn expand(&self, node: &Node, factory: &EnvFactory<'_>) -> Result<Expansion, SandboxError> {
        let (mut answers, mut kept, mut dropped) = (Vec::new(), Vec::new(), Vec::new());
        let attempts: Vec<Result<Action, Attempt>> = match self.propose(&node.state, &node.log) {
            Ok(actions) if actions.is_empty() => {
                vec![Err(Attempt::synthetic(&PolicyError::ScriptExhausted("no candidates".into())))]
            }
            Ok(actions) => actions.into_iter().map(Ok).collect(),
            Err(PolicyError::MalformedAction(_)) => {
                let state = node.state.clone().into_terminal(TerminalKind::Malformed);
                let metrics = BranchMetrics { g: 0.0, p: 0.0, c: 1.0, v_b: f64::NEG_INFINITY };
                let child = Node { state, log: node.log.clone(), env: None, codes: Vec::new(), depth: node.depth, stable: None, metrics };
                dropped.push(Child { node: child, fallback: None });
                return Ok((answers, kept, dropped));
            }
            Err(e) => vec![Err(Attempt::synthetic(&e))],
        };
        for item in attempts {
            let mut env = self.fork(node, factory)?;
            let att = match item {
                Ok(action) => self.attempt(action, &mut env),
                Err(synthetic) => synthetic,
            };
            let mut log = node.log.clone();
            log.push(att.record(node.depth));
            let metrics = branch_value(&node.state, &att.action, &att.feedback, &self.cfg);
            let mut codes = node.codes.clone();
            if att.kind == AttemptKind::Acted {
                codes.extend(att.action.code().map(str::to_owned));
            }
            if att.kind == AttemptKind::Answer {
                let state = node.state.commit_answer(att.action, att.tokens);
                let child = Node { state, log, env: Some(env), codes, depth: node.depth, stable: None, metrics };
                answers.push(Child { node: child, fallback: None });
                continue;
            }
            let ok = att.feedback.is_success();
            let fallback = Fallback { state: node.state.clone(), failed: att.feedback.clone(), mark: node.log.len() };
            let state = node.state.transition(att.action, att.feedback, att.tokens, &self.cfg);
            let within_cost = state.cost() <= self.cfg.c_max;
            let clears_tau = metrics.v_b >= self.cfg.tau;
            let (depth, stable, keep) = if ok {
                let keep = within_cost && (self.cfg.gate == Gate::ErrorIndicator || clears_tau);
                (0, None, keep)
            } else {
                let r = node.depth;
                let stable = node.stable.clone().unwrap_or(fallback.clone());
                let keep = within_cost && r < self.cfg.d_max && (self.cfg.gate == Gate::ErrorIndicator || clears_tau);
                (r + 1, Some(stable), keep)
            };
            let keep = keep && !state.is_terminal();
            let fallback = if ok { fallback } else { stable.clone().expect("failed children carry a fallback") };
            let child = Node { state, log, env: Some(env), codes, depth, stable, metrics };
            if keep {
                kept.push(Child { node: child, fallback: Some(fallback) });
            } else {
                dropped.push(Child { node: child, fallback: Some(fallback) });
            }
        }
        Ok((answers, kept, dropped))
    }

    /// Multi-branch search. Each round expands every frontier branch with
    /// `n_candidates` actions in forked sessions, keeps children that pass the
    /// gate, the retry limit and the cost cap, and returns as soon as a round
    /// produces an answer. When nothing survives, the most valuable dropped
    /// branch is abandoned through a replan and the search continues from it.
    pub fn bvs_search(&self, problem: &str, factory: &EnvFactory<'_>) -> Result<Trajectory, SandboxError> {
        self.bvs_search_observed(problem, factory, &mut |_| {})
    }

    /// As [`Engine::bvs_search`], reporting each round's surviving branches.
    pub fn bvs_search_observed(
        &self,
        problem: &str,
        factory: &EnvFactory<'_>,
        observe: &mut dyn FnMut(&BranchSet),
    ) -> Result<Trajectory, SandboxError> {
        let root = Node {
            state: State::new(problem),
            log: Vec::new(),
            env: Some(factory()?),
            codes: Vec::new(),
            depth: 0,
            stable: None,
            metrics: BranchMetrics { g: 0.0, p: 0.0, c: 0.0, v_b: 0.0 },
        };
        let mut frontier = vec![root];
        let mut round = 0;
        loop {
            round += 1;
            let (mut answers, mut kept, mut dropped) = (Vec::new(), Vec::new(), Vec::new());
            for node in &frontier {
                let (a, k, d) = self.expand(node, factory)?;
                answers.extend(a);
                kept.extend(k);
                dropped.extend(d);
            }
            if let Some(i) = best_index(&answers) {
                let node = answers.swap_remove(i).node;
                return Ok(self.finish(&node.state, node.log));
            }
            if !kept.is_empty() {
                kept.sort_by(|a, b| b.node.metrics.v_b.partial_cmp(&a.node.metrics.v_b).unwrap_or(std::cmp::Ordering::Equal));
                if let Some(w) = self.cfg.beam_width {
                    kept.truncate(w);
                }
                let set = BranchSet {
                    active: kept.iter().map(|c| (c.node.state.clone(), c.node.metrics)).collect(),
                    depth: round,
                };
                observe(&set);
                frontier = kept.into_iter().map(|c| c.node).collect();
                continue;
            }
            let i = best_index(&dropped).expect("every expansion yields a child");
            let Child { node, fallback } = dropped.swap_remove(i);
            let fallback = match fallback {
                Some(fb) if !node.state.is_terminal() => fb,
                _ => return Ok(self.finish(&node.state, node.log)),
            };
            let mut log = node.log;
            mark_abandoned(&mut log, fallback.mark);
            let state = fallback.state.with_spend_of(&node.state).replan(&fallback.failed, &self.cfg);
            if state.is_terminal() {
                return Ok(self.finish(&state, log));
            }
            let metrics = node.metrics;
            frontier = vec![Node { state, log, env: node.env, codes: node.codes, depth: 0, stable: None, metrics }];
        }
    }

    /// Runs in the configured mode with sessions from `factory`.
    pub fn run(&self, problem: &str, factory: &EnvFactory<'_>) -> Result<Trajectory, SandboxError> {
        match self.cfg.mode {
            Mode::Linear => {
                let mut session = factory()?;
                Ok(self.linear_retry(problem, &mut session))
            }
            Mode::Bvs => self.bvs_search(problem, factory),
        }
    }
}

pub fn linear_retry(problem: &str, policy: &dyn Policy, session: &mut Session, cfg: &BranchConfig, seed: u64) -> Trajectory {
    let cfg = BranchConfig { mode: Mode::Linear, ..cfg.clone() };
    Engine::new(policy, &cfg, seed).linear_retry(problem, session)
}

pub fn bvs_search(
    problem: &str,
    policy: &dyn Policy,
    factory: &EnvFactory<'_>,
    cfg: &BranchConfig,
    seed: u64,
) -> Result<Trajectory, SandboxError> {
    Engine::new(policy, cfg, seed).bvs_search(problem, factory)
}
