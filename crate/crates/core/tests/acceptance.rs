//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Every tolerance is a named constant below.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use feedloop::cli::{cmd_run, RunConfig};
use feedloop::feedback::{Category, Feedback, FeedbackDistribution, Status};
use feedloop::protocol::{events_for, parse, render, validate, Event, Segment, StreamParser};
use feedloop::sandbox::Session;
use feedloop::search::{
    bvs_search, combine, info_gain, linear_retry, BranchConfig, Gate, Mode, TerminalKind, TerminalStatus,
};
use feedloop::trajectory::{filter_deag, retry_stats, shorten_direct_execution, StepRecord, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const P1_GOLDEN: usize = 20;
const P1_GENERATED: usize = 500;
const P1_SPLITS: usize = 1_000;
const P1_LIMIT: Duration = Duration::from_secs(5);

const P2_INSTANCES: usize = 100;
const P2_MAX_ACTIONS: usize = 4;
const P2_MAX_DEPTH: usize = 5;
const P2_LIMIT: Duration = Duration::from_secs(10);

const P3_RUNS: u64 = 50;

const P4_PAIRS: usize = 1_000;
const P4_SELF_TOL: f64 = 1e-9;
const P4_LN5_TOL: f64 = 1e-9;

const P5_TRIPLES: usize = 100;
const P5_SLOPE_TOL: f64 = 1e-12;

const P6_RUNS: usize = 1_000;
const P6_ATTEMPT_SUCCESS: f64 = 0.6;
const P6_FLOOR: f64 = 0.95;
const P6_EXPECTED: f64 = 0.9744;
const P6_TOL: f64 = 0.02;

const P7_SEEDS: u64 = 10;

const P8_RUNS: u64 = 100;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, pass: String, fail: String) -> Outcome {
    if cond {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn fixtures() -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/transcripts");
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .map(|p| (p.display().to_string(), std::fs::read_to_string(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn stream(text: &str, cuts: &[usize]) -> Result<Vec<Event>, String> {
    let mut points: Vec<usize> = cuts.iter().copied().filter(|c| text.is_char_boundary(*c)).collect();
    points.extend([0, text.len()]);
    points.sort_unstable();
    points.dedup();
    let mut parser = StreamParser::new();
    let mut events = Vec::new();
    for w in points.windows(2) {
        events.extend(parser.feed(&text[w[0]..w[1]]).map_err(|e| e.to_string())?);
    }
    events.extend(parser.finish().map_err(|e| e.to_string())?);
    Ok(events)
}

const PIECES: &[&str] = &[
    "x", " ", "\n", "é", "<", "|", ">", "<|", "|>", "execute", "feedback", "_end", "im_start", "<|im_end|>",
    "<|im_start|>user", "print(2**7)",
];

fn random_body(rng: &mut ChaCha8Rng) -> String {
    (0..rng.gen_range(0..6)).map(|_| PIECES[rng.gen_range(0..PIECES.len())]).collect()
}

fn random_segments(rng: &mut ChaCha8Rng) -> Vec<Segment> {
    loop {
        let mut segs: Vec<Segment> = (0..rng.gen_range(0..10))
            .map(|_| match rng.gen_range(0..9) {
                0..=3 => Segment::text(random_body(rng)),
                4 | 5 => Segment::execute(random_body(rng)),
                6 | 7 => Segment::feedback(random_body(rng)),
                _ => Segment::think_start(),
            })
            .collect();
        if rng.gen_bool(0.3) {
            segs.push(Segment::answer_start());
            let tail = random_body(rng);
            if !tail.is_empty() {
                segs.push(Segment::text(tail));
            }
        }
        if validate(&segs).is_ok() {
            return segs;
        }
    }
}

fn p1() -> Outcome {
    let started = Instant::now();
    let golden = fixtures();
    if golden.len() != P1_GOLDEN {
        return Err(format!("expected {P1_GOLDEN} golden transcripts, found {}", golden.len()));
    }
    let mut failures = Vec::new();
    for (name, text) in &golden {
        match parse(text).map(|s| render(&s)) {
            Ok(Ok(back)) if back == *text => {}
            _ => failures.push(name.clone()),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    for i in 0..P1_GENERATED {
        let segs = random_segments(&mut rng);
        let text = render(&segs).unwrap();
        if parse(&text).as_ref() != Ok(&segs) {
            failures.push(format!("generated #{i}"));
        }
    }
    for i in 0..P1_SPLITS {
        let (name, text) = &golden[i % golden.len()];
        let cuts: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..=text.len())).collect();
        if stream(text, &cuts) != Ok(events_for(&parse(text).unwrap())) {
            failures.push(format!("split {i} of {name}"));
        }
    }
    let elapsed = started.elapsed();
    check(
        failures.is_empty() && elapsed < P1_LIMIT,
        format!("{P1_GOLDEN} golden, {P1_GENERATED} generated, {P1_SPLITS} splits, 0 failures in {elapsed:.2?}"),
        format!("{} failures ({:?}) in {elapsed:.2?}", failures.len(), failures.iter().take(3).collect::<Vec<_>>()),
    )
}

fn p2() -> Outcome {
    let started = Instant::now();
    let cfg = BranchConfig {
        mode: Mode::Bvs,
        gate: Gate::BranchValue,
        tau: f64::NEG_INFINITY,
        c_max: u32::MAX,
        d_max: P2_MAX_DEPTH as u32,
        horizon_t: P2_MAX_DEPTH as u32,
        n_candidates: Some(P2_MAX_ACTIONS),
        token_budget: u64::MAX,
        ..BranchConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut agree = 0;
    let mut reachable = 0;
    let mut mismatches = Vec::new();
    for i in 0..P2_INSTANCES {
        let tree = common::random_tree(&mut rng, P2_MAX_ACTIONS, P2_MAX_DEPTH, false);
        let oracle = common::bfs_answer_depth(&tree).is_some();
        let factory = || Ok(Session::builtin());
        let found = bvs_search("p", &tree.policy(), &factory, &cfg, i as u64).map(|t| t.success());
        reachable += usize::from(oracle);
        if found.is_ok_and(|f| f == oracle) {
            agree += 1;
        } else {
            mismatches.push(i);
        }
    }
    let elapsed = started.elapsed();
    check(
        agree == P2_INSTANCES && elapsed < P2_LIMIT,
        format!("{agree}/{P2_INSTANCES} agree with BFS ({reachable} reachable) in {elapsed:.2?}"),
        format!("{agree}/{P2_INSTANCES} agree, mismatches {mismatches:?}, {elapsed:.2?}"),
    )
}

fn p3() -> Outcome {
    let mut same = 0;
    let mut differing = Vec::new();
    for seed in 0..P3_RUNS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = common::random_tree(&mut rng, 3, 6, true);
        let policy = tree.policy();
        let base = BranchConfig { d_max: 2, r_max: 2, c_max: u32::MAX, ..BranchConfig::default() };
        let search = BranchConfig {
            mode: Mode::Bvs,
            gate: Gate::ErrorIndicator,
            beam_width: Some(1),
            n_candidates: Some(1),
            ..base.clone()
        };
        let a = linear_retry("p", &policy, &mut Session::builtin(), &base, seed).to_json();
        let factory = || Ok(Session::builtin());
        let b = bvs_search("p", &policy, &factory, &search, seed).map(|t| t.to_json());
        if b.is_ok_and(|b| b == a) {
            same += 1;
        } else {
            differing.push(seed);
        }
    }
    check(
        same == P3_RUNS,
        format!("{same}/{P3_RUNS} byte-identical"),
        format!("{same}/{P3_RUNS} byte-identical, differing seeds {differing:?}"),
    )
}

fn random_distribution(rng: &mut ChaCha8Rng) -> FeedbackDistribution {
    let counts: [f64; 5] = std::array::from_fn(|_| rng.gen_range(1e-6..1.0));
    FeedbackDistribution::from_counts(counts).unwrap()
}

fn p4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    let mut min_gain = f64::INFINITY;
    let mut max_self = 0.0f64;
    for _ in 0..P4_PAIRS {
        let (p, q) = (random_distribution(&mut rng), random_distribution(&mut rng));
        min_gain = min_gain.min(info_gain(&p, &q));
        max_self = max_self.max(info_gain(&p, &p));
    }
    let point = info_gain(&FeedbackDistribution::point_mass(Category::Timeout), &FeedbackDistribution::uniform());
    let ln5_err = (point - 5f64.ln()).abs();
    check(
        min_gain >= 0.0 && max_self < P4_SELF_TOL && ln5_err <= P4_LN5_TOL,
        format!("min KL {min_gain:.3e}, max self-KL {max_self:.1e}, |point-mass - ln 5| {ln5_err:.1e}"),
        format!("min KL {min_gain:e}, max self-KL {max_self:e}, |point-mass - ln 5| {ln5_err:e}"),
    )
}

fn p5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let mut worst = 0.0f64;
    for _ in 0..P5_TRIPLES {
        let (g, p, c) = (rng.gen_range(0.0..5.0), rng.gen_range(0.0..1.0), f64::from(rng.gen_range(0u8..2)));
        let base = BranchConfig {
            lambda_i: rng.gen_range(-2.0..2.0),
            lambda_p: rng.gen_range(-2.0..2.0),
            lambda_c: rng.gen_range(-2.0..2.0),
            ..BranchConfig::default()
        };
        let v0 = combine(&base, g, p, c);
        let slopes = [
            (combine(&BranchConfig { lambda_i: base.lambda_i + 1.0, ..base.clone() }, g, p, c) - v0, g),
            (combine(&BranchConfig { lambda_p: base.lambda_p + 1.0, ..base.clone() }, g, p, c) - v0, p),
            (combine(&BranchConfig { lambda_c: base.lambda_c + 1.0, ..base.clone() }, g, p, c) - v0, c),
        ];
        for (measured, want) in slopes {
            worst = worst.max((measured - want).abs());
        }
    }
    check(
        worst <= P5_SLOPE_TOL,
        format!("{P5_TRIPLES} triples, max slope error {worst:.1e}"),
        format!("max slope error {worst:e} exceeds {P5_SLOPE_TOL:e}"),
    )
}

fn synthetic_retry_run(rng: &mut ChaCha8Rng) -> Trajectory {
    let mut steps = Vec::new();
    let mut success = false;
    for r in 0..4u32 {
        let ok = rng.gen_bool(P6_ATTEMPT_SUCCESS);
        let feedback = if ok {
            Feedback { v: Some(1.0), sigma: "int".into(), delta: "1\n".into(), status: Status::Success }
        } else {
            Feedback::error("ValueError", "bad", Status::RecoverableError)
        };
        steps.push(StepRecord {
            action_text: "<|execute|>\nprint(1)\n<|execute_end|>".into(),
            feedback,
            abandoned: false,
            retry_index: r,
            tokens: 100,
        });
        if ok {
            success = true;
            break;
        }
    }
    let kind = if success { TerminalKind::AnswerEmitted } else { TerminalKind::ReplanLimit };
    let tokens = steps.iter().map(|s| s.tokens).sum();
    Trajectory::new("synthetic", 0, String::new(), TerminalStatus::new(kind), tokens, steps)
}

fn p6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0006);
    let runs: Vec<_> = (0..P6_RUNS).map(|_| synthetic_retry_run(&mut rng)).collect();
    let stats = retry_stats(&runs);
    let rates: Vec<f64> = stats.buckets.iter().map(|b| b.success_rate.unwrap_or(0.0)).collect();
    let monotone = rates.windows(2).all(|w| w[0] <= w[1]);
    let last = rates[3];
    check(
        monotone && last >= P6_FLOOR && (last - P6_EXPECTED).abs() <= P6_TOL,
        format!("success rates {rates:.4?}, nondecreasing, Retry@3+ {last:.4}"),
        format!("success rates {rates:.4?} (monotone={monotone})"),
    )
}

fn p7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0007);
    let tree = common::random_tree(&mut rng, 3, 5, true);
    let problem = dir.path().join("problem.txt");
    std::fs::write(&problem, "Find the answer.\n").unwrap();
    std::fs::write(dir.path().join("problem.script.json"), tree.to_json()).unwrap();
    let mut stable = 0;
    for seed in 0..P7_SEEDS {
        let mut hashes = Vec::new();
        for pass in 0..2 {
            let cfg = RunConfig {
                seed,
                out: Some(dir.path().join(format!("out-{seed}-{pass}"))),
                search: BranchConfig::bvs(),
                ..RunConfig::default()
            };
            match cmd_run(&problem, &cfg) {
                Ok(o) => hashes.push(o.trajectory.hash()),
                Err(e) => return Err(format!("seed {seed}: {e:#}")),
            }
        }
        stable += usize::from(hashes[0] == hashes[1]);
    }
    check(
        stable == P7_SEEDS as usize,
        format!("{stable}/{P7_SEEDS} seeds reproduce identical trace hashes"),
        format!("{stable}/{P7_SEEDS} seeds reproduce"),
    )
}

fn p8() -> Outcome {
    let runs: Vec<Trajectory> = (0..P8_RUNS)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tree = common::random_tree(&mut rng, 3, 6, true);
            let cfg = BranchConfig { d_max: 2, ..BranchConfig::default() };
            linear_retry("p", &tree.policy(), &mut Session::builtin(), &cfg, seed)
        })
        .collect();
    let with_abandoned = runs.iter().filter(|r| r.steps.iter().any(|s| s.abandoned)).count();
    let kept = filter_deag(runs.clone());
    let pure = kept.iter().all(|r| r.success() && r.terminal.kind == TerminalKind::AnswerEmitted);
    let mut shortening_ok = true;
    for run in &kept {
        let once = shorten_direct_execution(run).unwrap();
        let twice = shorten_direct_execution(&once).unwrap();
        shortening_ok &= once == twice && once.steps.iter().all(|s| !s.abandoned && s.retry_index == 0);
    }
    check(
        pure && shortening_ok && !kept.is_empty(),
        format!(
            "{}/{P8_RUNS} kept, all AnswerEmitted; shortening idempotent and abandon-free ({with_abandoned} inputs had abandoned steps)",
            kept.len()
        ),
        format!("pure={pure} shortening_ok={shortening_ok} kept={}", kept.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] =
        [("P1", p1), ("P2", p2), ("P3", p3), ("P4", p4), ("P5", p5), ("P6", p6), ("P7", p7), ("P8", p8)];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(msg) => println!("{name} PASS {msg}"),
            Err(msg) => {
                failed += 1;
                println!("{name} FAIL {msg}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
