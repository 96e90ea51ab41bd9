//! Experiment driver: runs a method over a task list and persists results.

pub mod report;
pub mod results;

use std::collections::BTreeMap;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use thiserror::Error;

use crate::config::{RunConfig, SelectionRule};
use crate::domain::{ContextPayload, EqualityMode, EquivalenceJudge, GradeResult, TaskInstance, Trajectory};
use crate::grading::{self, Judge};
use crate::llm::{ChatProvider, LlmError, TokenCounter};
use crate::orchestrator::{self, build_base_prompt, extract_final_answer, root_request, Timing, TrajectoryEnv};
use crate::sandbox::{ContextFormat, ContextRef, SandboxFactory};
use crate::uncertainty::{score_trajectory, select, self_consistency};

pub use results::{read_results, CandidateRecord, ResultsError, ResultsWriter, TaskRecord, TaskResult, SCHEMA_VERSION};

pub const FLAG_CONTEXT_OVERFLOW: &str = "context-overflow";
pub const FLAG_NO_MARKER: &str = "no-final-answer-marker";
pub const FLAG_PROVIDER_ERROR: &str = "provider-error";
pub const FLAG_INTERNAL_ERROR: &str = "internal-error";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Base,
    Rlm,
    RlmNosub,
    Srlm,
    SrlmNosub,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Base, Method::Rlm, Method::RlmNosub, Method::Srlm, Method::SrlmNosub];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Rlm => "rlm",
            Method::RlmNosub => "rlm-nosub",
            Method::Srlm => "srlm",
            Method::SrlmNosub => "srlm-nosub",
        }
    }

    /// Trajectories per task; `None` for the single-call base method.
    pub fn samples(self, config: &RunConfig) -> Option<u32> {
        match self {
            Method::Base => None,
            Method::Rlm | Method::RlmNosub => Some(1),
            Method::Srlm | Method::SrlmNosub => Some(config.k_samples),
        }
    }

    pub fn recursion(self) -> bool {
        matches!(self, Method::Rlm | Method::Srlm)
    }

    /// The config a method actually runs with.
    pub fn effective_config(self, config: &RunConfig) -> RunConfig {
        RunConfig {
            k_samples: self.samples(config).unwrap_or(1),
            recursion_enabled: self.recursion(),
            ..config.clone()
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?} (expected base, rlm, rlm-nosub, srlm or srlm-nosub)"))
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Results(#[from] ResultsError),
    #[error("fatal provider condition: {0}")]
    Provider(LlmError),
    #[error("duplicate task id {0}")]
    DuplicateId(String),
}

/// External services a run talks to.
#[derive(Clone, Copy)]
pub struct RunEnv<'a> {
    pub provider: &'a dyn ChatProvider,
    pub sandboxes: &'a dyn SandboxFactory,
    pub counter: &'a dyn TokenCounter,
    pub timing: Timing,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub written: usize,
    pub skipped_existing: usize,
}

fn rule_name(rule: SelectionRule) -> &'static str {
    match rule {
        SelectionRule::ArgmaxJoint => "argmax-joint",
        SelectionRule::ArgminJoint => "argmin-joint",
    }
}

/// Writes the task's context where a worker can read it.
fn stage_context(task: &TaskInstance, dir: &Path) -> std::io::Result<ContextRef> {
    match &task.context.payload {
        ContextPayload::Text(t) => {
            let path = dir.join("context.txt");
            std::fs::write(&path, t)?;
            Ok(ContextRef::Path { path, format: ContextFormat::Text })
        }
        ContextPayload::Documents(d) => {
            let path = dir.join("context.json");
            std::fs::write(&path, serde_json::to_vec(d).expect("documents serialize"))?;
            Ok(ContextRef::Path { path, format: ContextFormat::DocumentsJson })
        }
    }
}

fn task_record(task: &TaskInstance, method: Method, config: &RunConfig, grade: GradeResult) -> TaskRecord {
    TaskRecord {
        schema: SCHEMA_VERSION,
        task_id: task.id.clone(),
        method: method.name().to_string(),
        source: task.meta.source.clone(),
        domain: task.meta.domain.clone(),
        token_count: task.context.token_count,
        window_limit: task.context.window_limit,
        scoring_mode: task.scoring_mode,
        k_samples: method.samples(config).unwrap_or(1),
        selection_rule: rule_name(config.selection_rule).to_string(),
        prediction: None,
        chosen: None,
        plurality: None,
        prob: BTreeMap::new(),
        consistent: vec![],
        unanswered: vec![],
        selection_error: None,
        grade,
        wall_clock_ms: 0,
        compute_ms: 0,
        flags: vec![],
        response: None,
    }
}

fn failed_result(task: &TaskInstance, method: Method, config: &RunConfig, flag: &str, message: String) -> TaskResult {
    let mut record = task_record(task, method, config, GradeResult::binary(false, "").with_flag(flag));
    record.selection_error = Some(message);
    record.flags.push(flag.to_string());
    TaskResult { task: record, candidates: vec![] }
}

/// Single call with the whole context inlined.
fn run_base(task: &TaskInstance, config: &RunConfig, env: RunEnv<'_>) -> TaskResult {
    let judge = Judge { seed: config.seed, ..Judge::new(env.provider, config.judge_model.clone()) };
    let mut record = task_record(task, Method::Base, config, GradeResult::binary(false, ""));
    if task.context.token_count > task.context.window_limit {
        record.flags.push(FLAG_CONTEXT_OVERFLOW.into());
    }
    let started = std::time::Instant::now();
    match env.provider.chat(&root_request(config, build_base_prompt(task), 0)) {
        Ok(resp) => {
            let prediction = match extract_final_answer(&resp.text) {
                Some(a) => Some(a.text),
                None => {
                    record.flags.push(FLAG_NO_MARKER.into());
                    Some(resp.text.trim().to_string()).filter(|t| !t.is_empty())
                }
            };
            record.grade = grading::grade(task, prediction.as_deref(), Some(&judge));
            record.prediction = prediction;
            record.wall_clock_ms = match env.timing {
                Timing::Virtual => resp.latency_ms,
                Timing::Wall => started.elapsed().as_millis() as u64,
            };
            record.compute_ms = record.wall_clock_ms;
            record.response = Some(resp.text);
        }
        Err(e) => {
            record.flags.push(FLAG_PROVIDER_ERROR.into());
            record.selection_error = Some(e.to_string());
            record.grade = record.grade.with_flag(FLAG_PROVIDER_ERROR);
        }
    }
    TaskResult { task: record, candidates: vec![] }
}

/// K trajectories side by side, then selection and grading.
fn run_search(task: &TaskInstance, method: Method, config: &RunConfig, env: RunEnv<'_>) -> TaskResult {
    let staging = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return failed_result(task, method, config, FLAG_INTERNAL_ERROR, format!("staging context: {e}")),
    };
    let context = match stage_context(task, staging.path()) {
        Ok(c) => c,
        Err(e) => return failed_result(task, method, config, FLAG_INTERNAL_ERROR, format!("staging context: {e}")),
    };
    let k_samples = config.k_samples;
    let tenv = TrajectoryEnv {
        provider: env.provider,
        sandboxes: env.sandboxes,
        counter: env.counter,
        timing: env.timing,
        deadline_ms: Some(config.task_deadline_ms()),
    };
    let trajectories: Vec<Trajectory> = thread::scope(|s| {
        let handles: Vec<_> = (0..k_samples)
            .map(|k| {
                let context = &context;
                s.spawn(move || orchestrator::run_trajectory(task, context, config, k, tenv))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("trajectory thread panicked")).collect()
    });

    let scores: Vec<_> = trajectories.iter().map(|t| score_trajectory(t, config.neutral_confidence)).collect();
    let judge = Judge { seed: config.seed, ..Judge::new(env.provider, config.judge_model.clone()) };
    let equivalence = judge.for_question(&task.query);
    let eq: Option<&dyn EquivalenceJudge> =
        (config.consistency_equality == EqualityMode::Judge).then_some(&equivalence as &dyn EquivalenceJudge);

    let mut record = task_record(task, method, config, GradeResult::binary(false, ""));
    record.wall_clock_ms = trajectories.iter().map(Trajectory::wall_clock_ms).max().unwrap_or(0);
    record.compute_ms = trajectories.iter().map(Trajectory::wall_clock_ms).sum();

    let mut group_of: Vec<Option<String>> = vec![None; trajectories.len()];
    let selection = self_consistency(trajectories.clone(), &scores, config.consistency_equality, eq, config.selection_rule)
        .and_then(|set| select(&set, &scores, config.selection_rule).map(|chosen| (set, chosen)));
    match &selection {
        Ok((set, (chosen, answer))) => {
            for (key, members) in &set.answer_groups {
                for &i in members {
                    group_of[i] = Some(key.clone());
                }
            }
            let ks = |v: &[usize]| v.iter().map(|&i| trajectories[i].k).collect::<Vec<_>>();
            record.prediction = Some(answer.clone());
            record.chosen = Some(trajectories[*chosen].k);
            record.plurality = Some(set.plurality.clone());
            record.prob = set.prob.clone();
            record.consistent = ks(&set.consistent);
            record.unanswered = ks(&set.unanswered);
        }
        Err(e) => {
            record.selection_error = Some(e.to_string());
            record.unanswered =
                trajectories.iter().filter(|t| t.final_answer.is_none()).map(|t| t.k).collect();
        }
    }

    // Grade each distinct answer once; the selected prediction reuses its grade.
    let mut grades: BTreeMap<String, GradeResult> = BTreeMap::new();
    let mut grade_of = |answer: &str| {
        grades.entry(answer.to_string()).or_insert_with(|| grading::grade(task, Some(answer), Some(&judge))).clone()
    };
    record.grade = match &record.prediction {
        Some(p) => grade_of(p),
        None => GradeResult::binary(false, "").with_flag(grading::FLAG_NO_ANSWER),
    };

    let candidates = trajectories
        .into_iter()
        .zip(scores)
        .zip(group_of)
        .map(|((t, s), group)| {
            let grade = match (&t.final_answer, &group) {
                (Some(a), Some(_)) if config.grade_candidates => Some(grade_of(a)),
                _ => None,
            };
            CandidateRecord {
                schema: SCHEMA_VERSION,
                task_id: task.id.clone(),
                method: method.name().to_string(),
                k: t.k,
                answer: t.final_answer.clone(),
                group,
                vc: s.vc,
                len: s.len,
                joint: s.joint,
                imputed_steps: s.imputed_steps,
                terminated_by: t.terminated_by,
                steps: t.steps.len() as u32,
                tokens: t.total_tokens(),
                wall_clock_ms: t.wall_clock_ms(),
                error: t.error.clone(),
                grade,
                trajectory: t,
            }
        })
        .collect();
    TaskResult { task: record, candidates }
}

/// Runs one task under `method`. Never panics: internal failures become a
/// task record flagged `internal-error`.
pub fn run_task(task: &TaskInstance, method: Method, config: &RunConfig, env: RunEnv<'_>) -> TaskResult {
    let config = method.effective_config(config);
    let outcome = catch_unwind(AssertUnwindSafe(|| match method {
        Method::Base => run_base(task, &config, env),
        _ => run_search(task, method, &config, env),
    }));
    outcome.unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        log::error!("task {} failed internally: {msg}", task.id);
        failed_result(task, method, &config, FLAG_INTERNAL_ERROR, msg)
    })
}

/// Runs `method` over `tasks`, appending to `out` and skipping tasks already
/// recorded there. Records are written in input order.
pub fn run_experiment(
    tasks: &[TaskInstance],
    method: Method,
    config: &RunConfig,
    env: RunEnv<'_>,
    out: &Path,
) -> Result<RunSummary, RunError> {
    let mut seen = std::collections::HashSet::new();
    for t in tasks {
        if !seen.insert(t.id.as_str()) {
            return Err(RunError::DuplicateId(t.id.clone()));
        }
    }
    let mut writer = ResultsWriter::open(out)?;
    let pending: Vec<&TaskInstance> = tasks.iter().filter(|t| !writer.is_done(&t.id, method.name())).collect();
    let mut summary = RunSummary { written: 0, skipped_existing: tasks.len() - pending.len() };
    if summary.skipped_existing > 0 {
        log::info!("resuming: {} tasks already in {}", summary.skipped_existing, out.display());
    }

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = config.task_workers.max(1).min(pending.len().max(1));
    let mut failure: Option<RunError> = None;
    thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<(usize, TaskResult)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, pending) = (&next, &stop, &pending);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = pending.get(i) else { break };
                let result = run_task(task, method, config, env);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut buffer: BTreeMap<usize, TaskResult> = BTreeMap::new();
        let mut expect = 0usize;
        for (i, result) in rx {
            buffer.insert(i, result);
            while failure.is_none() {
                let Some(result) = buffer.remove(&expect) else { break };
                expect += 1;
                if let Err(e) = writer.append(&result) {
                    failure = Some(e.into());
                } else {
                    summary.written += 1;
                    log::info!(
                        "[{}/{}] {} {}: score {}",
                        expect,
                        pending.len(),
                        method,
                        result.task.task_id,
                        result.task.grade.score
                    );
                    if let Err(e) = env.provider.health() {
                        failure = Some(RunError::Provider(e));
                    }
                }
                if failure.is_some() {
                    stop.store(true, Ordering::SeqCst);
                }
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}
