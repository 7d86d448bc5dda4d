use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

const EXE: &str = env!("CARGO_BIN_EXE_feedloop");

fn feedloop(args: &[&str]) -> Output {
    Command::new(EXE).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn solving_script() -> serde_json::Value {
    json!({
        "actions": {
            "set": "Set k.\n<|execute|>\nk = 8\n<|execute_end|>",
            "bad": "Divide.\n<|execute|>\nx = k / 0\n<|execute_end|>",
            "fix": "ZeroDivisionError, compute directly.\n<|execute|>\nprint(2**(k-1))\n<|execute_end|>",
            "ans": "So 128.\n<|im_start|>answer\n128"
        },
        "states": {"": ["set"], "set": ["bad"], "set/bad": ["fix"], "set/bad/fix": ["ans"]}
    })
}

fn failing_script() -> serde_json::Value {
    json!({
        "actions": {"bad": "Divide.\n<|execute|>\nx = 1 / 0\n<|execute_end|>"},
        "states": {"": ["bad"]}
    })
}

fn write_problem(dir: &Path, name: &str, text: &str, script: &serde_json::Value) {
    fs::write(dir.join(format!("{name}.txt")), text).unwrap();
    fs::write(dir.join(format!("{name}.script.json")), script.to_string()).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_success_writes_trace_and_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    write_problem(dir.path(), "pow", "What is 2**7?\nexpected: 128\n", &solving_script());
    let o = feedloop(&["run", s(&dir.path().join("pow.txt")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("AnswerEmitted"));
    let trace = feedloop::trajectory::load(&out.join("pow.json")).unwrap();
    assert_eq!(trace.answer().as_deref().map(str::trim), Some("128"));
    let transcript = fs::read_to_string(out.join("pow.transcript.txt")).unwrap();
    assert!(transcript.starts_with("What is 2**7?\n<|im_start|>think\n"));
    assert!(transcript.ends_with("<|im_start|>answer\n128\n"));
}

#[test]
fn run_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    write_problem(dir.path(), "hard", "Impossible.\n", &failing_script());
    let o = feedloop(&["run", s(&dir.path().join("hard.txt")), "--out", s(&dir.path().join("o")), "--max-steps", "4"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn operational_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.txt");
    assert_eq!(code(&feedloop(&["run", s(&missing), "--policy", "scripted:/nope.json"])), 1);
    fs::write(dir.path().join("q.txt"), "q").unwrap();
    let o = feedloop(&["run", s(&dir.path().join("q.txt")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no policy configured"));
    let o = feedloop(&["run", s(&dir.path().join("q.txt")), "--policy", "remote:http://127.0.0.1:9"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unreachable"));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[search]\ntau = 0.1\nunknown_key = 3\n").unwrap();
    assert_eq!(code(&feedloop(&["run", s(&dir.path().join("q.txt")), "--config", s(&bad)])), 1);
    fs::write(&bad, "backend = \"worker\"\n").unwrap();
    assert_eq!(code(&feedloop(&["run", s(&dir.path().join("q.txt")), "--config", s(&bad)])), 1);
}

#[test]
fn batch_grades_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let probs = dir.path().join("problems");
    fs::create_dir(&probs).unwrap();
    write_problem(&probs, "a_right", "What is 2**7?\nexpected: 128\n", &solving_script());
    write_problem(&probs, "b_wrong", "What is 2**8?\nexpected: 256\n", &solving_script());
    write_problem(&probs, "c_fails", "Impossible.\nexpected: 1\n", &failing_script());
    write_problem(&probs, "d_ungraded", "What is 2**7, roughly?\n", &solving_script());
    let out = dir.path().join("out");
    let o = feedloop(&["batch", s(&probs), "--out", s(&out), "--jobs", "3", "--max-steps", "6"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("pass@1: 33.3% over 3 graded"), "{}", stdout(&o));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "problem,success,graded_correct,steps,retries,tokens");
    assert!(lines[1].starts_with("a_right,true,true,"));
    assert!(lines[2].starts_with("b_wrong,true,false,"));
    assert!(lines[3].starts_with("c_fails,false,false,"));
    assert!(lines[4].starts_with("d_ungraded,true,,"));
    assert_eq!(fs::read_dir(out.join("traces")).unwrap().count(), 4);
}

#[test]
fn batch_on_empty_dir_reports_na() {
    let dir = tempfile::tempdir().unwrap();
    let o = feedloop(&["batch", s(dir.path()), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("pass@1: n/a"));
}

fn populated_traces(dir: &Path) -> std::path::PathBuf {
    write_problem(dir, "ok1", "What is 2**7?\n", &solving_script());
    write_problem(dir, "ok2", "What is 2**7 again?\n", &solving_script());
    write_problem(dir, "bad", "Impossible.\n", &failing_script());
    let out = dir.join("out");
    let o = feedloop(&["batch", s(dir), "--out", s(&out), "--max-steps", "6"]);
    assert_eq!(code(&o), 0);
    out.join("traces")
}

#[test]
fn export_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let traces = populated_traces(dir.path());
    let first = dir.path().join("deag.jsonl");
    let o = feedloop(&["export", s(&traces), "--out", s(&first)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("exported 2 transcripts"));
    let second = dir.path().join("again.jsonl");
    feedloop(&["export", s(&traces), "--out", s(&second)]);
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());

    let direct = dir.path().join("direct.jsonl");
    assert_eq!(code(&feedloop(&["export", s(&traces), "--subset", "direct", "--out", s(&direct)])), 0);
    let lines: Vec<serde_json::Value> =
        fs::read_to_string(&direct).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    let text = lines[0]["text"].as_str().unwrap();
    assert!(!text.contains("ZeroDivisionError: division"));
    assert!(text.contains("print(2**(k-1))"));
}

#[test]
fn stats_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let traces = populated_traces(dir.path());
    let o = feedloop(&["stats", s(&traces)]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    for label in ["Initial", "Retry@1", "Retry@2", "Retry@3+", "Avg. Tokens (approximate)", "Success Rate"] {
        assert!(out.contains(label), "{label} missing from\n{out}");
    }
}

#[test]
fn replay_matches_then_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let traces = populated_traces(dir.path());
    let trace = traces.join("ok1.json");
    let o = feedloop(&["replay", s(&trace)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let tampered = fs::read_to_string(&trace).unwrap().replace("\"delta\": \"128\\n\"", "\"delta\": \"127\\n\"");
    fs::write(&trace, tampered).unwrap();
    let o = feedloop(&["replay", s(&trace)]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("delta"));
}

#[test]
fn replay_against_worker_backend() {
    let dir = tempfile::tempdir().unwrap();
    let traces = populated_traces(dir.path());
    let cfg = dir.path().join("worker.toml");
    fs::write(&cfg, format!("backend = \"worker\"\n[sandbox]\nworker_command = [{:?}, \"serve-builtin\"]\n", EXE)).unwrap();
    let o = feedloop(&["replay", s(&traces.join("ok2.json")), "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    write_problem(dir.path(), "pow", "What is 2**7?\n", &solving_script());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        feedloop(&["run", s(&dir.path().join("pow.txt")), "--out", s(out), "--seed", "9", "--mode", "bvs"]);
    }
    assert_eq!(fs::read(a.join("pow.json")).unwrap(), fs::read(b.join("pow.json")).unwrap());
}

#[test]
fn bundled_demo_solves_everything() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo");
    let dir = tempfile::tempdir().unwrap();
    let o = feedloop(&[
        "batch",
        s(&root.join("problems")),
        "--config",
        s(&root.join("config.toml")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("pass@1: 100.0% over 2 graded"), "{}", stdout(&o));
}
