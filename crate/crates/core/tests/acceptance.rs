//! Acceptance gate. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails. Tolerances are fixed here, next to the checks.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{oracle_correct, plan, scripted_model, task_instance, write_dataset, Pick};
use srlm::config::{RunConfig, SelectionRule};
use srlm::domain::{
    EqualityMode, ExecStatus, GoldAnswer, ScoringMode, TerminatedBy, Trajectory, TrajectoryStep,
};
use srlm::grading::{self, oolong_numeric_score, render_judge_prompt};
use srlm::llm::{ByteHeuristic, ChatRequest, ChatResponse, FnProvider, RecordingProvider, Usage};
use srlm::orchestrator::{build_root_prompt, run_trajectory, Timing, TrajectoryEnv, CONFIDENCE_SUFFIX};
use srlm::runner::{read_results, run_experiment, Method, RunEnv};
use srlm::sandbox::{ContextRef, ScriptedSandboxFactory};
use srlm::uncertainty::{score_trajectory, select, self_consistency, vc_from_confidences, verbalized_confidence};

const VC_TOL: f64 = 1e-9;
const OOLONG_TOL: f64 = 1e-12;
const SELECTION_MIN_INSTANCES: usize = 10_000;
const SELECTION_MAX_RUNTIME: Duration = Duration::from_secs(60);
const REPLAY_MAX_RUNTIME: Duration = Duration::from_secs(30);

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------------------
// selection oracle

#[derive(Debug, Clone)]
struct Cand {
    answer: Option<char>,
    confidences: Vec<Option<f64>>,
    len: u64,
}

/// Written from the definitions alone: mean-fill, log-sum, product, plurality
/// with score-based tie-break, argmax inside the winning group, lowest index last.
fn reference_select(cands: &[Cand], rule: SelectionRule) -> Option<(usize, char)> {
    let joint: Vec<f64> = cands
        .iter()
        .map(|c| {
            let stated: Vec<f64> = c.confidences.iter().flatten().copied().collect();
            let fill = if stated.is_empty() { 50.0 } else { stated.iter().sum::<f64>() / stated.len() as f64 };
            let vc: f64 = c.confidences.iter().map(|v| (v.unwrap_or(fill) / 100.0).ln()).sum();
            vc * c.len.max(1) as f64
        })
        .collect();
    let better = |a: usize, b: usize| {
        let (x, y) = (joint[a], joint[b]);
        let strictly = match rule {
            SelectionRule::ArgmaxJoint => x > y,
            SelectionRule::ArgminJoint => x < y,
        };
        strictly || (x == y && a < b)
    };
    let best_of = |members: &mut dyn Iterator<Item = usize>| {
        let mut best: Option<usize> = None;
        for i in members {
            if best.is_none_or(|b| better(i, b)) {
                best = Some(i);
            }
        }
        best
    };
    let mut counts: BTreeMap<char, usize> = BTreeMap::new();
    for c in cands {
        if let Some(a) = c.answer {
            *counts.entry(a).or_default() += 1;
        }
    }
    let top = *counts.values().max()?;
    let tied = |i: &usize| cands[*i].answer.is_some_and(|a| counts[&a] == top);
    let leader = best_of(&mut (0..cands.len()).filter(tied))?;
    let winner = cands[leader].answer?;
    let chosen = best_of(&mut (0..cands.len()).filter(|&i| cands[i].answer == Some(winner)))?;
    Some((chosen, winner))
}

fn to_trajectory(k: usize, c: &Cand) -> Trajectory {
    let n = c.confidences.len();
    let steps = c
        .confidences
        .iter()
        .enumerate()
        .map(|(i, conf)| TrajectoryStep {
            index: i as u32 + 1,
            model_text: String::new(),
            code_cells: vec![],
            exec_result: None,
            confidence_raw: *conf,
            confidence_imputed: conf.is_none(),
            token_count: if i + 1 == n { c.len } else { 0 },
            wall_clock_ms: 0,
            flags: vec![],
        })
        .collect();
    Trajectory {
        k: k as u32,
        steps,
        final_answer: c.answer.map(|a| a.to_string()),
        terminated_by: if c.answer.is_some() { TerminatedBy::FinalAnswer } else { TerminatedBy::StepLimit },
        error: None,
    }
}

fn engine_select(cands: &[Cand], rule: SelectionRule) -> Option<(usize, char)> {
    let trajectories: Vec<Trajectory> = cands.iter().enumerate().map(|(k, c)| to_trajectory(k, c)).collect();
    let scores: Vec<_> = trajectories.iter().map(|t| score_trajectory(t, 50.0)).collect();
    let set = self_consistency(trajectories, &scores, EqualityMode::Exact, None, rule).ok()?;
    let (i, answer) = select(&set, &scores, rule).ok()?;
    Some((i, answer.chars().next()?))
}

const CONFS: [Option<f64>; 5] = [Some(25.0), Some(50.0), Some(75.0), Some(100.0), None];
const LENS: [u64; 3] = [1, 10, 100];
const ANSWERS: [Option<char>; 4] = [None, Some('x'), Some('y'), Some('z')];

fn selection_oracle() -> Outcome {
    let started = Instant::now();
    let mut instances: Vec<Vec<Cand>> = Vec::new();
    // every one- and two-candidate set over the full grid with a single step
    let singles: Vec<Cand> = ANSWERS
        .iter()
        .flat_map(|&answer| {
            CONFS.iter().flat_map(move |&conf| {
                LENS.iter().map(move |&len| Cand { answer, confidences: vec![conf], len })
            })
        })
        .collect();
    for a in &singles {
        instances.push(vec![a.clone()]);
        for b in &singles {
            instances.push(vec![a.clone(), b.clone()]);
        }
    }
    // randomized sets up to five candidates, up to three steps, alphabet up to three
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1ec7);
    for _ in 0..12_000 {
        let k = rng.random_range(1..=5);
        let alphabet = rng.random_range(1..=3);
        let set = (0..k)
            .map(|_| {
                let answer = if rng.random_bool(0.15) { None } else { ANSWERS[rng.random_range(1..=alphabet)] };
                let steps = rng.random_range(1..=3);
                let confidences = (0..steps).map(|_| CONFS[rng.random_range(0..CONFS.len())]).collect();
                Cand { answer, confidences, len: LENS[rng.random_range(0..LENS.len())] }
            })
            .collect();
        instances.push(set);
    }
    let mut compared = 0usize;
    for set in &instances {
        for rule in [SelectionRule::ArgmaxJoint, SelectionRule::ArgminJoint] {
            let want = reference_select(set, rule);
            let got = engine_select(set, rule);
            if want != got {
                return Err(format!("disagreement under {rule:?} on {set:?}: reference {want:?}, engine {got:?}"));
            }
            compared += 1;
        }
    }
    let elapsed = started.elapsed();
    check(instances.len() >= SELECTION_MIN_INSTANCES, format!("only {} instances", instances.len()))?;
    check(elapsed < SELECTION_MAX_RUNTIME, format!("took {elapsed:?}"))?;
    Ok(format!("{} instances, {compared} comparisons, all agree, {:.1}s", instances.len(), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// verbalized confidence

fn vc_correctness() -> Outcome {
    let (hand, filled) = vc_from_confidences(&[Some(80.0), None, Some(60.0)], 50.0);
    check(filled == vec![1], format!("filled positions {filled:?}"))?;
    // the gap is filled with mean(80, 60) = 70
    let exact = 0.8f64.ln() + 0.7f64.ln() + 0.6f64.ln();
    check((hand - exact).abs() < VC_TOL, format!("[80, -, 60] gave {hand}, want {exact}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let mut imputed_cases = 0;
    for _ in 0..5_000 {
        let n = rng.random_range(1..=12);
        let conf: Vec<Option<f64>> = (0..n)
            .map(|_| (!rng.random_bool(0.25)).then(|| rng.random_range(0.001..=100.0)))
            .collect();
        let stated: Vec<f64> = conf.iter().flatten().copied().collect();
        let fill = if stated.is_empty() { 50.0 } else { stated.iter().sum::<f64>() / stated.len() as f64 };
        let want: f64 = conf.iter().map(|c| (c.unwrap_or(fill) / 100.0).ln()).sum();
        if conf.iter().any(Option::is_none) {
            imputed_cases += 1;
        }
        let (got, _) = vc_from_confidences(&conf, 50.0);
        let cand = Cand { answer: Some('x'), confidences: conf, len: 1 };
        let (via_trajectory, _) = verbalized_confidence(&to_trajectory(0, &cand), 50.0);
        worst = worst.max((got - want).abs()).max((via_trajectory - want).abs());
    }
    check(worst < VC_TOL, format!("max deviation {worst:e}"))?;
    Ok(format!("[80,-,60] = {hand:.9}; 5000 random vectors ({imputed_cases} with gaps), max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// numeric partial credit

fn oolong_scoring() -> Outcome {
    for (delta, want) in [(0u32, 1.0), (1, 0.75), (2, 0.5625), (5, 0.2373046875)] {
        let by_hand = (0..delta).fold(1.0f64, |acc, _| acc * 0.75);
        check((by_hand - want).abs() < OOLONG_TOL, format!("fixture arithmetic for Δ={delta}"))?;
        for gold in [0.0, 23.0, -4.0] {
            let got = oolong_numeric_score(gold, gold + f64::from(delta));
            check((got - want).abs() < OOLONG_TOL, format!("Δ={delta} at gold {gold}: {got}"))?;
        }
    }
    let mut task = task_instance(&plan()[0]);
    task.gold = GoldAnswer::Number(23.0);
    task.scoring_mode = ScoringMode::NumericPartialCredit;
    let graded = grading::grade(&task, Some("There are 25 of them."), None);
    check((graded.score - 0.5625).abs() < OOLONG_TOL, format!("graded 25 vs 23 as {}", graded.score))?;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20_000 {
        let y = f64::from(rng.random_range(-4000i32..4000)) / 8.0;
        let a = f64::from(rng.random_range(-4000i32..4000)) / 8.0;
        let b = f64::from(rng.random_range(-4000i32..4000)) / 8.0;
        let (sa, sb) = (oolong_numeric_score(y, a), oolong_numeric_score(y, b));
        check(sa == oolong_numeric_score(a, y), format!("asymmetric at ({y}, {a})"))?;
        check((0.0..=1.0).contains(&sa), format!("out of range at ({y}, {a})"))?;
        let (da, db) = ((y - a).abs(), (y - b).abs());
        if da < db {
            check(sa > sb || sb == 0.0, format!("not decreasing: |{da}| -> {sa}, |{db}| -> {sb}"))?;
        } else if da == db {
            check(sa == sb, format!("equal distances scored {sa} and {sb}"))?;
        }
    }
    Ok("Δ∈{0,1,2,5} exact, Δ=2 → 0.5625, 20000-pair symmetry/monotonicity sweep".into())
}

// ---------------------------------------------------------------------------
// prompt bytes

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn prompt_bytes() -> Outcome {
    let suffix = golden("confidence_suffix.golden");
    check(CONFIDENCE_SUFFIX == suffix, "confidence suffix differs from golden")?;
    let messages = build_root_prompt(&task_instance(&plan()[3]), &RunConfig::default());
    let last = &messages.last().expect("prompt has messages").content;
    check(last.ends_with(&format!("\n\n{suffix}")), "root prompt does not end with the suffix block")?;

    let template = golden("judge_prompt.golden");
    let (q, r, g) = ("How many moons does Mars have?", "Two: Phobos and Deimos.", "2");
    let want = template.replace("{QUESTION}", q).replace("{RESPONSE}", r).replace("{CORRECT_ANSWER}", g);
    let got = render_judge_prompt(q, r, g).map_err(|e| e.to_string())?;
    check(got == want, "rendered judge prompt differs from golden")?;
    Ok(format!("suffix {} bytes, judge prompt {} bytes, byte-identical", suffix.len(), got.len()))
}

// ---------------------------------------------------------------------------
// budgets

fn budget_enforcement() -> Outcome {
    let task = task_instance(&plan()[0]);
    let context = ContextRef::Inline { text: common::context_text(&task.id) };
    let sandboxes = ScriptedSandboxFactory { truncation_chars: 10_000 };

    let runaway = FnProvider(|_: &ChatRequest| {
        Ok(ChatResponse {
            text: "```python\nwhile True: pass\n```\n{\"confidence\": 40}".into(),
            usage: Some(Usage { prompt_tokens: 0, completion_tokens: 10 }),
            latency_ms: 1,
        })
    });
    let config = RunConfig { step_time_budget_ms: 2_000, max_steps: 3, ..RunConfig::default() };
    let env = TrajectoryEnv { provider: &runaway, sandboxes: &sandboxes, counter: &ByteHeuristic, timing: Timing::Wall, deadline_ms: None };
    let started = Instant::now();
    let t = run_trajectory(&task, &context, &config, 0, env);
    let elapsed = started.elapsed();
    check(t.steps.len() == 3, format!("{} steps", t.steps.len()))?;
    for s in &t.steps {
        let status = s.exec_result.as_ref().map(|r| r.status);
        check(status == Some(ExecStatus::Timeout), format!("step {} status {status:?}", s.index))?;
        check(s.wall_clock_ms < 2_000 + 1_500, format!("step {} took {} ms", s.index, s.wall_clock_ms))?;
    }
    check(t.terminated_by == TerminatedBy::StepLimit, format!("terminated by {}", t.terminated_by))?;

    let chatty = FnProvider(|_: &ChatRequest| {
        Ok(ChatResponse {
            text: "```python\nprint(1)\n```\n{\"confidence\": 40}".into(),
            usage: Some(Usage { prompt_tokens: 0, completion_tokens: 30 }),
            latency_ms: 1,
        })
    });
    let capped = RunConfig { generation_token_cap: 50, ..RunConfig::default() };
    let env = TrajectoryEnv { provider: &chatty, ..env };
    let c = run_trajectory(&task, &context, &capped, 0, env);
    check(c.terminated_by == TerminatedBy::GenerationCap, format!("cap run terminated by {}", c.terminated_by))?;
    check(c.steps.len() == 2, format!("cap run took {} steps", c.steps.len()))?;
    Ok(format!(
        "3 x timeout then step-limit in {:.1}s; cap 50 stops after {} tokens with generation-cap",
        elapsed.as_secs_f64(),
        c.total_tokens()
    ))
}

// ---------------------------------------------------------------------------
// scripted end-to-end runs through the CLI

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// Dataset files plus a cassette recorded from the scripted model.
    fn build() -> Fixture {
        let dir = tempfile::tempdir().expect("tempdir");
        let tasks = plan();
        write_dataset(&dir.path().join("all.jsonl"), &tasks);
        let five: Vec<_> = [0, 11, 14, 18, 19].iter().map(|&i| tasks[i].clone()).collect();
        write_dataset(&dir.path().join("five.jsonl"), &five);

        let cassette = dir.path().join("model.cassette.jsonl");
        let recorder = RecordingProvider::create(scripted_model(&tasks), &cassette).expect("cassette");
        let sandboxes = ScriptedSandboxFactory { truncation_chars: RunConfig::default().output_truncation_chars };
        let env = RunEnv { provider: &recorder, sandboxes: &sandboxes, counter: &ByteHeuristic, timing: Timing::Virtual };
        let instances: Vec<_> = tasks.iter().map(task_instance).collect();
        run_experiment(&instances, Method::Srlm, &RunConfig::default(), env, &dir.path().join("recording.jsonl"))
            .expect("recording run");
        Fixture { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn srlm(&self, args: &[&str]) -> Result<std::process::Output, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_srlm"))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("srlm {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        Ok(out)
    }

    fn replay_run(&self, dataset: &str, out: &str) -> Result<(), String> {
        let ds = format!("native:{}", self.path(dataset).display());
        let cassette = self.path("model.cassette.jsonl").display().to_string();
        let out = self.path(out).display().to_string();
        self.srlm(&[
            "run", "--dataset", &ds, "--method", "srlm", "--replay", &cassette, "--seed", "0", "--sandbox", "scripted",
            "--out", &out,
        ])?;
        Ok(())
    }
}

fn replay_determinism(fx: &Fixture) -> Outcome {
    let started = Instant::now();
    fx.replay_run("five.jsonl", "five-a.jsonl")?;
    fx.replay_run("five.jsonl", "five-b.jsonl")?;
    let elapsed = started.elapsed();
    let a = std::fs::read(fx.path("five-a.jsonl")).map_err(|e| e.to_string())?;
    let b = std::fs::read(fx.path("five-b.jsonl")).map_err(|e| e.to_string())?;
    let tasks = read_results(&fx.path("five-a.jsonl")).map_err(|e| e.to_string())?;
    check(tasks.len() == 5, format!("{} task records", tasks.len()))?;
    check(tasks.iter().all(|t| t.candidates.len() == 8), "expected 8 candidates per task")?;
    check(!a.is_empty() && a == b, "results files differ between runs")?;
    check(elapsed < REPLAY_MAX_RUNTIME, format!("took {elapsed:?}"))?;
    Ok(format!("5 tasks x 8 samples, {} bytes identical across runs, {:.1}s", a.len(), elapsed.as_secs_f64()))
}

fn report_json(fx: &Fixture, results: &str) -> Result<serde_json::Value, String> {
    let path = fx.path(results).display().to_string();
    let out = fx.srlm(&["report", "--in", &path, "--ablations", "--json"])?;
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn policy_correct(report: &serde_json::Value, policy: &str) -> Option<(u64, u64)> {
    let row = report["ablations"]["srlm"].as_array()?.iter().find(|r| r["policy"] == policy)?;
    let n = row["cell"]["n"].as_u64()?;
    let correct = (row["cell"]["accuracy"].as_f64()? * n as f64 / 100.0).round() as u64;
    Some((correct, n))
}

fn end_to_end(fx: &Fixture) -> Outcome {
    let tasks = plan();
    let by_oracle = (oracle_correct(&tasks, Pick::Joint), oracle_correct(&tasks, Pick::Majority), oracle_correct(&tasks, Pick::First));
    check(by_oracle == (20, 18, 14), format!("fixture plan gives {by_oracle:?}, authored for (20, 18, 14)"))?;

    fx.replay_run("all.jsonl", "all.jsonl.results")?;
    let results = read_results(&fx.path("all.jsonl.results")).map_err(|e| e.to_string())?;
    check(results.len() == 20, format!("{} task records", results.len()))?;
    let live = results.iter().filter(|r| r.task.grade.correct).count();
    let report = report_json(fx, "all.jsonl.results")?;
    let (majority, _) = policy_correct(&report, "consistency-only").ok_or("no consistency-only column")?;
    let (single, _) = policy_correct(&report, "single-sample").ok_or("no single-sample column")?;
    let got = (live, majority as usize, single as usize);
    check(got == by_oracle, format!("srlm/majority/single = {got:?}, oracle {by_oracle:?}"))?;
    check(got.0 >= got.1 && got.1 >= got.2, format!("ordering violated: {got:?}"))?;
    Ok(format!("srlm {}/20 >= majority {}/20 >= single {}/20", got.0, got.1, got.2))
}

fn ablation_equivalence(fx: &Fixture) -> Outcome {
    let report = report_json(fx, "all.jsonl.results")?;
    let full = report["ablations"]["srlm"]
        .as_array()
        .and_then(|rows| rows.iter().find(|r| r["policy"] == "full"))
        .ok_or("no full column")?;
    let n = full["cell"]["n"].as_u64().unwrap_or(0);
    let agree = full["agrees_with_live"].as_u64().unwrap_or(0);
    check(n == 20 && agree == n, format!("offline full selection matches live on {agree}/{n}"))?;
    let live = report["methods"][0]["overall"]["accuracy"].as_f64();
    check(live == full["cell"]["accuracy"].as_f64(), "offline full accuracy differs from live")?;
    Ok(format!("offline recomputation reproduces {agree}/{n} live selections byte-for-byte"))
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS  {name:<28} {detail}"),
        Err(why) => {
            failed += 1;
            println!("FAIL  {name:<28} {why}");
        }
    };
    report("selection-oracle", selection_oracle());
    report("verbalized-confidence", vc_correctness());
    report("oolong-partial-credit", oolong_scoring());
    report("prompt-bytes", prompt_bytes());
    report("budget-enforcement", budget_enforcement());
    let fx = Fixture::build();
    report("replay-determinism", replay_determinism(&fx));
    report("end-to-end-scripted", end_to_end(&fx));
    report("offline-ablation-equivalence", ablation_equivalence(&fx));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
