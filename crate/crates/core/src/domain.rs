//! Shared domain types and answer canonicalization.
//!
//! Every type here is a plain value: once built it is never mutated, so
//! trajectories, candidate sets and grades can be shared freely across the
//! worker threads that produce and consume them.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How a task's prediction is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringMode {
    Judge,
    Mcq,
    NumericPartialCredit,
    CategoricalExactOrJudge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum GoldAnswer {
    Text(String),
    McqLetter(char),
    Number(f64),
}

impl GoldAnswer {
    /// Text form used when the gold answer is shown to a judge.
    pub fn display_text(&self) -> String {
        match self {
            GoldAnswer::Text(t) => t.clone(),
            GoldAnswer::McqLetter(c) => c.to_string(),
            GoldAnswer::Number(n) => format_number(*n),
        }
    }

    fn matches_mode(&self, mode: ScoringMode) -> bool {
        matches!(
            (self, mode),
            (GoldAnswer::Text(_), ScoringMode::Judge)
                | (GoldAnswer::Text(_), ScoringMode::CategoricalExactOrJudge)
                | (GoldAnswer::McqLetter(_), ScoringMode::Mcq)
                | (GoldAnswer::Number(_), ScoringMode::NumericPartialCredit)
        )
    }
}

fn format_number(n: f64) -> String {
    if n.fract() == 0.0 && n.abs() < 1e15 {
        format!("{}", n as i64)
    } else {
        format!("{n}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "kebab-case")]
pub enum ContextPayload {
    Text(String),
    Documents(Vec<Document>),
}

impl ContextPayload {
    pub fn byte_len(&self) -> usize {
        match self {
            ContextPayload::Text(t) => t.len(),
            ContextPayload::Documents(d) => d.iter().map(|d| d.text.len()).sum(),
        }
    }

    /// Flattens the payload into one string, used when the whole context has
    /// to be inlined into a prompt.
    pub fn render_inline(&self) -> String {
        match self {
            ContextPayload::Text(t) => t.clone(),
            ContextPayload::Documents(docs) => {
                let mut out = String::new();
                for (i, d) in docs.iter().enumerate() {
                    if i > 0 {
                        out.push_str("\n\n");
                    }
                    out.push_str(&format!("[Document {} | id={}]\n{}", i, d.id, d.text));
                }
                out
            }
        }
    }
}

/// The externalized context `𝒞` for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBlob {
    pub payload: ContextPayload,
    pub token_count: u64,
    pub window_limit: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub source: String,
    pub token_count: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub query: String,
    pub context: ContextBlob,
    pub gold: GoldAnswer,
    pub scoring_mode: ScoringMode,
    pub meta: TaskMeta,
}

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("task {0}: token_count must be at least 1")]
    ZeroTokens(String),
    #[error("task {id}: gold answer variant does not fit scoring mode {mode:?}")]
    GoldModeMismatch { id: String, mode: ScoringMode },
    #[error("task {0}: empty id")]
    EmptyId(String),
}

impl TaskInstance {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.id.is_empty() {
            return Err(TaskError::EmptyId(self.query.chars().take(40).collect()));
        }
        if self.meta.token_count == 0 || self.context.token_count == 0 {
            return Err(TaskError::ZeroTokens(self.id.clone()));
        }
        if !self.gold.matches_mode(self.scoring_mode) {
            return Err(TaskError::GoldModeMismatch {
                id: self.id.clone(),
                mode: self.scoring_mode,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
    Killed,
}

impl ExecStatus {
    fn severity(self) -> u8 {
        match self {
            ExecStatus::Ok => 0,
            ExecStatus::Error => 1,
            ExecStatus::Timeout => 2,
            ExecStatus::Killed => 3,
        }
    }

    /// The more severe of two statuses.
    pub fn worst(self, other: ExecStatus) -> ExecStatus {
        if other.severity() > self.severity() {
            other
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResult {
    pub stdout: String,
    pub stderr: String,
    pub truncated: bool,
    pub duration_ms: u64,
    pub status: ExecStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub index: u32,
    pub model_text: String,
    pub code_cells: Vec<String>,
    pub exec_result: Option<ExecResult>,
    pub confidence_raw: Option<f64>,
    pub confidence_imputed: bool,
    pub token_count: u64,
    pub wall_clock_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminatedBy {
    FinalAnswer,
    StepLimit,
    GenerationCap,
    TimeLimit,
    ProviderError,
}

impl fmt::Display for TerminatedBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TerminatedBy::FinalAnswer => "final-answer",
            TerminatedBy::StepLimit => "step-limit",
            TerminatedBy::GenerationCap => "generation-cap",
            TerminatedBy::TimeLimit => "time-limit",
            TerminatedBy::ProviderError => "provider-error",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub k: u32,
    pub steps: Vec<TrajectoryStep>,
    pub final_answer: Option<String>,
    pub terminated_by: TerminatedBy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trajectory {
    pub fn total_tokens(&self) -> u64 {
        self.steps.iter().map(|s| s.token_count).sum()
    }

    pub fn wall_clock_ms(&self) -> u64 {
        self.steps.iter().map(|s| s.wall_clock_ms).sum()
    }
}

/// K trajectories for one task plus their self-consistency statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub trajectories: Vec<Trajectory>,
    /// canonical answer -> member indices into `trajectories`
    pub answer_groups: BTreeMap<String, Vec<usize>>,
    pub prob: BTreeMap<String, f64>,
    pub unanswered: Vec<usize>,
    pub plurality: String,
    pub consistent: Vec<usize>,
}

impl CandidateSet {
    pub fn k(&self) -> usize {
        self.trajectories.len()
    }

    pub fn unanswered_fraction(&self) -> f64 {
        self.unanswered.len() as f64 / self.k() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub vc: f64,
    pub len: u64,
    pub joint: f64,
    pub imputed_steps: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeResult {
    pub correct: bool,
    pub score: f64,
    pub judge_transcript: Option<String>,
    pub extracted_answer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl GradeResult {
    pub fn binary(correct: bool, extracted_answer: impl Into<String>) -> Self {
        GradeResult {
            correct,
            score: if correct { 1.0 } else { 0.0 },
            judge_transcript: None,
            extracted_answer: extracted_answer.into(),
            flags: Vec::new(),
        }
    }

    pub fn with_flag(mut self, flag: &str) -> Self {
        self.flags.push(flag.to_string());
        self
    }
}

/// Equality relation used to group candidate answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EqualityMode {
    Exact,
    #[default]
    Normalized,
    Judge,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnswerError {
    #[error("answer is empty after normalization")]
    Unanswerable,
    #[error("judge-required")]
    JudgeRequired,
    #[error("judge failed: {0}")]
    Judge(String),
}

/// Semantic equivalence oracle used by [`EqualityMode::Judge`].
pub trait EquivalenceJudge: Sync {
    /// Whether `candidate` is equivalent to `reference` (treated as gold).
    fn equivalent(&self, reference: &str, candidate: &str) -> Result<bool, String>;
}

fn mcq_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:\(([a-d])\)|([a-d])[.):])(?:\s|$)").unwrap())
}

fn numeric_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([+-]?)(\d+)(?:\.(\d+))?$").unwrap())
}

/// Rewrites a plain decimal literal into its shortest form, or returns `None`
/// when `s` is not one.
fn normalize_decimal(s: &str) -> Option<String> {
    let caps = numeric_regex().captures(s)?;
    let negative = &caps[1] == "-";
    let int = caps[2].trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let frac = caps.get(3).map_or("", |m| m.as_str()).trim_end_matches('0');
    let mut out = String::new();
    if negative && !(int == "0" && frac.is_empty()) {
        out.push('-');
    }
    out.push_str(int);
    if !frac.is_empty() {
        out.push('.');
        out.push_str(frac);
    }
    Some(out)
}

/// trim, collapse whitespace, case-fold, reduce MCQ answers to their letter,
/// and normalize decimal literals.
pub fn canonicalize_answer(raw: &str) -> Result<String, AnswerError> {
    let stripped: String = raw
        .chars()
        .map(|c| if c.is_control() && !c.is_whitespace() { ' ' } else { c })
        .collect();
    let collapsed = stripped.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        return Err(AnswerError::Unanswerable);
    }
    let folded = collapsed.to_lowercase();

    if folded.len() == 1 && matches!(folded.as_bytes()[0], b'a'..=b'd') {
        return Ok(folded);
    }
    if let Some(c) = mcq_regex().captures(&folded) {
        let letter = c.get(1).or_else(|| c.get(2)).unwrap().as_str();
        return Ok(letter.to_string());
    }
    if let Some(n) = normalize_decimal(&folded) {
        return Ok(n);
    }
    Ok(folded)
}

/// Equality between two answers under `mode`.
///
/// `judge` is consulted only in [`EqualityMode::Judge`], with `a` in the role
/// of the gold answer.
pub fn answers_equal(
    a: &str,
    b: &str,
    mode: EqualityMode,
    judge: Option<&dyn EquivalenceJudge>,
) -> Result<bool, AnswerError> {
    match mode {
        EqualityMode::Exact => Ok(a == b),
        EqualityMode::Normalized => {
            match (canonicalize_answer(a), canonicalize_answer(b)) {
                (Ok(x), Ok(y)) => Ok(x == y),
                _ => Ok(false),
            }
        }
        EqualityMode::Judge => {
            let judge = judge.ok_or(AnswerError::JudgeRequired)?;
            if a == b {
                return Ok(true);
            }
            judge.equivalent(a, b).map_err(AnswerError::Judge)
        }
    }
}
