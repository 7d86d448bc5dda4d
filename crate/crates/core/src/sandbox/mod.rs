//! Execution environments.
//!
//! A [`Session`] is one persistent namespace bound to one trajectory. Two
//! backends exist: the in-process [`builtin`] evaluator (deterministic,
//! snapshot-cloneable) and an out-of-process worker speaking newline-delimited
//! JSON over stdio (see [`worker`]). Isolation between sessions is process or
//! value separation only; nothing here is a security boundary.

pub mod builtin;
pub mod worker;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feedback::{classify, Feedback};
use builtin::BuiltinEnv;
use worker::WorkerProcess;

/// Wall-clock timer. `std::time::Instant` panics on wasm32-unknown-unknown,
/// where durations read as zero.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    started: std::time::Instant,
}

impl Stopwatch {
    pub(crate) fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            started: std::time::Instant::now(),
        }
    }

    pub(crate) fn elapsed_ms(&self) -> u64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.started.elapsed().as_millis() as u64;
        #[cfg(target_arch = "wasm32")]
        0
    }
}

/// Raw outcome of running one code block.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub stdout: String,
    pub stderr: String,
    pub exception_name: Option<String>,
    pub exception_message: Option<String>,
    pub value_repr: Option<String>,
    pub duration_ms: u64,
    pub timed_out: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Worker,
    Builtin,
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "worker" => Ok(Backend::Worker),
            "builtin" => Ok(Backend::Builtin),
            other => Err(format!("unknown backend '{other}' (expected worker|builtin)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub timeout_ms: u64,
    /// Slack on top of `timeout_ms` before the client gives up on a worker.
    pub grace_ms: u64,
    pub stdout_cap: usize,
    pub stderr_cap: usize,
    /// Program and arguments used to launch a worker.
    pub worker_command: Vec<String>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            timeout_ms: 10_000,
            grace_ms: 500,
            stdout_cap: 64 * 1024,
            stderr_cap: 16 * 1024,
            worker_command: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("failed to spawn worker: {0}")]
    WorkerSpawnFailure(String),
    #[error("session is closed")]
    SessionClosed,
    #[error("backend cannot fork sessions")]
    EnvironmentCloneUnsupported,
    #[error("operation requires the builtin backend")]
    NotBuiltin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(u64);

impl std::fmt::Display for SessionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "session-{}", self.0)
    }
}

fn next_session_id() -> SessionId {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    SessionId(NEXT.fetch_add(1, Ordering::Relaxed))
}

enum Inner {
    Builtin(BuiltinEnv),
    Worker(WorkerProcess),
    Closed,
}

pub struct Session {
    id: SessionId,
    backend: Backend,
    config: SandboxConfig,
    inner: Inner,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("backend", &self.backend)
            .field("alive", &self.is_alive())
            .finish()
    }
}

/// Cuts `s` to at most `cap` bytes on a char boundary. Returns whether it cut.
fn truncate_to(s: &mut String, cap: usize) -> bool {
    if s.len() <= cap {
        return false;
    }
    let mut end = cap;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    s.truncate(end);
    true
}

impl Session {
    pub fn open(backend: Backend, config: &SandboxConfig) -> Result<Self, SandboxError> {
        let inner = match backend {
            Backend::Builtin => Inner::Builtin(BuiltinEnv::new()),
            Backend::Worker => Inner::Worker(WorkerProcess::spawn(&config.worker_command)?),
        };
        Ok(Self { id: next_session_id(), backend, config: config.clone(), inner })
    }

    pub fn builtin() -> Self {
        Self::open(Backend::Builtin, &SandboxConfig::default()).expect("builtin sessions always open")
    }

    pub fn id(&self) -> SessionId {
        self.id
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    pub fn is_alive(&self) -> bool {
        match &self.inner {
            Inner::Builtin(_) => true,
            Inner::Worker(w) => w.is_alive(),
            Inner::Closed => false,
        }
    }

    /// Runs `code` and returns the uninterpreted result, with output caps applied.
    pub fn execute_raw(&mut self, code: &str, timeout_ms: u64) -> Result<ExecutionResult, SandboxError> {
        let started = Stopwatch::start();
        let mut result = match &mut self.inner {
            Inner::Builtin(env) => {
                let mut r = env.run(code);
                r.duration_ms = started.elapsed_ms();
                r
            }
            Inner::Worker(w) => w.exec(code, timeout_ms, self.config.grace_ms),
            Inner::Closed => return Err(SandboxError::SessionClosed),
        };
        let cut_out = truncate_to(&mut result.stdout, self.config.stdout_cap);
        let cut_err = truncate_to(&mut result.stderr, self.config.stderr_cap);
        result.truncated |= cut_out || cut_err;
        Ok(result)
    }

    pub fn execute(&mut self, code: &str, timeout_ms: u64) -> Result<Feedback, SandboxError> {
        self.execute_raw(code, timeout_ms).map(|r| classify(&r))
    }

    /// Runs with the configured default timeout.
    pub fn run(&mut self, code: &str) -> Result<Feedback, SandboxError> {
        let timeout = self.config.timeout_ms;
        self.execute(code, timeout)
    }

    pub fn builtin_eval(&mut self, code: &str) -> Result<ExecutionResult, SandboxError> {
        match &self.inner {
            Inner::Builtin(_) => self.execute_raw(code, self.config.timeout_ms),
            Inner::Closed => Err(SandboxError::SessionClosed),
            Inner::Worker(_) => Err(SandboxError::NotBuiltin),
        }
    }

    pub fn reset(&mut self) {
        match &mut self.inner {
            Inner::Builtin(env) => env.reset(),
            Inner::Worker(w) => w.reset(self.config.grace_ms),
            Inner::Closed => {}
        }
    }

    pub fn close(&mut self) {
        if let Inner::Worker(w) = &mut self.inner {
            w.shutdown(self.config.grace_ms);
        }
        self.inner = Inner::Closed;
    }

    /// Snapshot of this session under a fresh id. Only the builtin backend can
    /// fork; worker sessions must be rebuilt by replaying code.
    pub fn try_clone(&self) -> Result<Session, SandboxError> {
        match &self.inner {
            Inner::Builtin(env) => Ok(Session {
                id: next_session_id(),
                backend: self.backend,
                config: self.config.clone(),
                inner: Inner::Builtin(env.clone()),
            }),
            Inner::Worker(_) => Err(SandboxError::EnvironmentCloneUnsupported),
            Inner::Closed => Err(SandboxError::SessionClosed),
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.close();
    }
}
