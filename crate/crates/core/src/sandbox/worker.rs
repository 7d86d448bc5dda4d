//! Client side of the worker wire protocol, plus a reference server backed by
//! the builtin evaluator.
//!
//! One JSON object per line in each direction, UTF-8:
//!
//! ```text
//! -> {"id":"3","op":"exec","code":"print(1)","timeout_ms":500}
//! <- {"id":"3","ok":true,"stdout":"1\n","stderr":"","exc_type":null,"exc_msg":null,
//!     "value_repr":null,"duration_ms":0,"truncated":false}
//! ```
//!
//! `op` is one of `exec`, `reset`, `ping`, `shutdown`. Every request gets
//! exactly one response carrying the same id, in order.

use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::builtin::BuiltinEnv;
use super::{ExecutionResult, SandboxError, Stopwatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Exec,
    Reset,
    Ping,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: String,
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Response {
    pub id: String,
    pub ok: bool,
    pub stdout: String,
    pub stderr: String,
    pub exc_type: Option<String>,
    pub exc_msg: Option<String>,
    pub value_repr: Option<String>,
    pub duration_ms: u64,
    pub truncated: bool,
}

/// Exception names a worker may use to report its own timeout enforcement.
const TIMEOUT_NAMES: [&str; 2] = ["Timeout", "TimeoutError"];

impl Response {
    pub fn into_execution_result(self) -> ExecutionResult {
        let timed_out = self.exc_type.as_deref().is_some_and(|t| TIMEOUT_NAMES.contains(&t));
        ExecutionResult {
            stdout: self.stdout,
            stderr: self.stderr,
            exception_name: self.exc_type,
            exception_message: self.exc_msg,
            value_repr: self.value_repr,
            duration_ms: self.duration_ms,
            timed_out,
            truncated: self.truncated,
        }
    }
}

#[derive(Debug)]
enum Failure {
    Timeout,
    Crashed,
    Protocol(String),
}

struct Live {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

/// A supervised worker process. Restarted transparently after crashes and
/// client-side deadline expiry; each restart starts from an empty namespace.
pub struct WorkerProcess {
    command: Vec<String>,
    live: Option<Live>,
    next_id: u64,
}

fn spawn_live(command: &[String]) -> Result<Live, SandboxError> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| SandboxError::WorkerSpawnFailure("no worker command configured".into()))?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| SandboxError::WorkerSpawnFailure(format!("{program}: {e}")))?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    Ok(Live { child, stdin, lines: rx })
}

impl WorkerProcess {
    pub fn spawn(command: &[String]) -> Result<Self, SandboxError> {
        let live = spawn_live(command)?;
        Ok(Self { command: command.to_vec(), live: Some(live), next_id: 0 })
    }

    pub fn is_alive(&self) -> bool {
        self.live.is_some()
    }

    fn kill(&mut self) {
        if let Some(mut live) = self.live.take() {
            let _ = live.child.kill();
            let _ = live.child.wait();
        }
    }

    fn restart(&mut self) {
        self.kill();
        self.live = spawn_live(&self.command).ok();
    }

    fn request(&mut self, op: Op, code: Option<&str>, timeout_ms: Option<u64>, wait: Duration) -> Result<Response, Failure> {
        let live = self.live.as_mut().ok_or(Failure::Crashed)?;
        self.next_id += 1;
        let req = Request { id: self.next_id.to_string(), op, code: code.map(str::to_owned), timeout_ms };
        let mut line = serde_json::to_string(&req).expect("request serializes");
        line.push('\n');
        if live.stdin.write_all(line.as_bytes()).and_then(|_| live.stdin.flush()).is_err() {
            return Err(Failure::Crashed);
        }
        let reply = match live.lines.recv_timeout(wait) {
            Ok(reply) => reply,
            Err(RecvTimeoutError::Timeout) => return Err(Failure::Timeout),
            Err(RecvTimeoutError::Disconnected) => return Err(Failure::Crashed),
        };
        let resp: Response =
            serde_json::from_str(&reply).map_err(|e| Failure::Protocol(format!("unparseable response: {e}")))?;
        if resp.id != req.id {
            return Err(Failure::Protocol(format!("response id {} does not match request id {}", resp.id, req.id)));
        }
        Ok(resp)
    }

    pub fn exec(&mut self, code: &str, timeout_ms: u64, grace_ms: u64) -> ExecutionResult {
        let started = Stopwatch::start();
        let wait = Duration::from_millis(timeout_ms + grace_ms);
        let outcome = self.request(Op::Exec, Some(code), Some(timeout_ms), wait);
        let elapsed = started.elapsed_ms();
        let lost = |name: &str, message: String| ExecutionResult {
            exception_name: Some(name.to_string()),
            exception_message: Some(message),
            duration_ms: elapsed,
            ..ExecutionResult::default()
        };
        match outcome {
            Ok(resp) => resp.into_execution_result(),
            Err(Failure::Timeout) => {
                self.restart();
                ExecutionResult {
                    timed_out: true,
                    ..lost("Timeout", format!("execution exceeded {timeout_ms} ms; worker restarted, namespace state lost"))
                }
            }
            Err(Failure::Crashed) => {
                self.restart();
                lost("WorkerCrash", "worker exited unexpectedly; worker restarted, namespace state lost".into())
            }
            Err(Failure::Protocol(msg)) => {
                self.restart();
                lost("ProtocolError", format!("{msg}; worker restarted, namespace state lost"))
            }
        }
    }

    pub fn ping(&mut self, wait_ms: u64) -> bool {
        matches!(self.request(Op::Ping, None, None, Duration::from_millis(wait_ms)), Ok(r) if r.ok)
    }

    pub fn reset(&mut self, grace_ms: u64) {
        if self.request(Op::Reset, None, None, Duration::from_millis(grace_ms.max(1000))).is_err() {
            self.restart();
        }
    }

    pub fn shutdown(&mut self, grace_ms: u64) {
        if self.live.is_some() {
            let _ = self.request(Op::Shutdown, None, None, Duration::from_millis(grace_ms));
        }
        self.kill();
    }
}

impl Drop for WorkerProcess {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Best-effort id recovery from a line that failed to parse as a request.
fn salvage_id(line: &str) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| match v.get("id")? {
            serde_json::Value::String(s) => Some(s.clone()),
            other => Some(other.to_string()),
        })
        .unwrap_or_default()
}

/// Serves the wire protocol over the given streams using the builtin
/// evaluator as the interpreter. Returns after `shutdown` or end of input.
pub fn serve_builtin(input: impl BufRead, mut output: impl Write) -> io::Result<()> {
    let mut env = BuiltinEnv::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (resp, stop) = match serde_json::from_str::<Request>(&line) {
            Err(e) => (
                Response {
                    id: salvage_id(&line),
                    ok: false,
                    exc_type: Some("ProtocolError".into()),
                    exc_msg: Some(e.to_string()),
                    ..Response::default()
                },
                false,
            ),
            Ok(req) => match req.op {
                Op::Exec => {
                    let started = Stopwatch::start();
                    let r = env.run(req.code.as_deref().unwrap_or(""));
                    (
                        Response {
                            id: req.id,
                            ok: true,
                            stdout: r.stdout,
                            stderr: r.stderr,
                            exc_type: r.exception_name,
                            exc_msg: r.exception_message,
                            value_repr: r.value_repr,
                            duration_ms: started.elapsed_ms(),
                            truncated: false,
                        },
                        false,
                    )
                }
                Op::Reset => {
                    env.reset();
                    (Response { id: req.id, ok: true, ..Response::default() }, false)
                }
                Op::Ping => (Response { id: req.id, ok: true, ..Response::default() }, false),
                Op::Shutdown => (Response { id: req.id, ok: true, ..Response::default() }, true),
            },
        };
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
        if stop {
            break;
        }
    }
    Ok(())
}
