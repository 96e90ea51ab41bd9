//! LLM judge, multiple-choice scoring and OOLONG partial credit.

use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::domain::{canonicalize_answer, EquivalenceJudge, GoldAnswer, GradeResult, ScoringMode, TaskInstance};
use crate::llm::{ChatProvider, ChatRequest, Message};

pub const JUDGE_TEMPLATE: &str = include_str!("../assets/judge_prompt.txt");

pub const FLAG_NO_ANSWER: &str = "no-answer";
pub const FLAG_NO_LETTER: &str = "no-letter";
pub const FLAG_JUDGE_PARSE: &str = "judge-parse";
pub const FLAG_UNGRADED: &str = "ungraded";
pub const FLAG_UNPARSEABLE_NUMBER: &str = "unparseable-number";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GradingError {
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error("judge-parse")]
    JudgeParse,
}

/// Fills the judge template in one left-to-right pass, so placeholder-like
/// text inside the inputs is never substituted again.
pub fn render_judge_prompt(question: &str, response: &str, gold: &str) -> Result<String, GradingError> {
    for (name, v) in [("question", question), ("response", response), ("correct answer", gold)] {
        if v.trim().is_empty() {
            return Err(GradingError::EmptyInput(name));
        }
    }
    let mut out = String::with_capacity(JUDGE_TEMPLATE.len() + question.len() + response.len() + gold.len());
    let mut rest = JUDGE_TEMPLATE;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let (value, skip) = if tail.starts_with("{QUESTION}") {
            (question, "{QUESTION}".len())
        } else if tail.starts_with("{RESPONSE}") {
            (response, "{RESPONSE}".len())
        } else if tail.starts_with("{CORRECT_ANSWER}") {
            (gold, "{CORRECT_ANSWER}".len())
        } else {
            ("{", 1)
        };
        out.push_str(value);
        rest = &tail[skip..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeVerdict {
    pub extracted_final_answer: Option<String>,
    pub reasoning: Option<String>,
    pub correct: bool,
    pub confidence: Option<f64>,
}

const JUDGE_KEYS: &[&str] = &["extracted_final_answer", "correct_answer", "reasoning", "correct", "confidence"];

/// `key: value` on one line, tolerating markdown emphasis and bullets.
fn split_key(line: &str) -> Option<(&'static str, &str)> {
    let t = line.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '-' | '#' | '_' | '>'));
    let colon = t.find(':')?;
    let key = t[..colon].trim().trim_end_matches(['*', '_']).trim().to_ascii_lowercase();
    let found = JUDGE_KEYS.iter().find(|k| **k == key)?;
    Some((found, t[colon + 1..].trim_start_matches(['*', '_']).trim()))
}

fn yes_no(value: &str) -> Option<bool> {
    let word: String = value
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?\d+(?:\.\d+)?").unwrap())
}

/// Reads the judge's field list. Only `correct:` is required; its last
/// yes/no occurrence wins.
pub fn parse_judge_output(text: &str) -> Result<JudgeVerdict, GradingError> {
    let mut fields: Vec<(&'static str, String)> = Vec::new();
    for line in text.lines() {
        match split_key(line) {
            Some((key, value)) => fields.push((key, value.to_string())),
            None => {
                if let Some((_, v)) = fields.last_mut() {
                    if !line.trim().is_empty() {
                        if !v.is_empty() {
                            v.push('\n');
                        }
                        v.push_str(line.trim());
                    }
                }
            }
        }
    }
    let last = |key: &str| fields.iter().rev().find(|(k, _)| *k == key).map(|(_, v)| v.clone());
    let correct = fields
        .iter()
        .rev()
        .filter(|(k, _)| *k == "correct")
        .find_map(|(_, v)| yes_no(v))
        .ok_or(GradingError::JudgeParse)?;
    Ok(JudgeVerdict {
        extracted_final_answer: last("extracted_final_answer"),
        reasoning: last("reasoning"),
        correct,
        confidence: last("confidence")
            .and_then(|v| number_regex().find(&v).and_then(|m| m.as_str().parse().ok())),
    })
}

/// LLM-as-judge over a chat provider.
pub struct Judge<'a> {
    pub provider: &'a dyn ChatProvider,
    pub model: String,
    pub max_output_tokens: u64,
    pub seed: u64,
}

/// Outcome of one judge consultation.
#[derive(Debug, Clone, PartialEq)]
pub enum JudgeOutcome {
    Verdict { verdict: JudgeVerdict, transcript: String },
    /// Both attempts came back without a usable `correct:` field.
    ParseFailure { transcript: String },
    ProviderFailure { error: String },
}

impl<'a> Judge<'a> {
    pub fn new(provider: &'a dyn ChatProvider, model: impl Into<String>) -> Self {
        Judge { provider, model: model.into(), max_output_tokens: 4096, seed: 0 }
    }

    /// One judge chat, retried once (with a different salt) on a parse failure.
    pub fn consult(&self, question: &str, response: &str, gold: &str) -> Result<JudgeOutcome, GradingError> {
        let prompt = render_judge_prompt(question, response, gold)?;
        let mut transcript = String::new();
        for attempt in 0..2u64 {
            let req = ChatRequest::new(self.model.clone(), vec![Message::user(prompt.clone())], attempt)
                .with_sampling("max_output_tokens", self.max_output_tokens)
                .with_sampling("seed", self.seed);
            let text = match self.provider.chat(&req) {
                Ok(r) => r.text,
                Err(e) => return Ok(JudgeOutcome::ProviderFailure { error: e.to_string() }),
            };
            if !transcript.is_empty() {
                transcript.push_str("\n---\n");
            }
            transcript.push_str(&text);
            if let Ok(verdict) = parse_judge_output(&text) {
                return Ok(JudgeOutcome::Verdict { verdict, transcript });
            }
        }
        Ok(JudgeOutcome::ParseFailure { transcript })
    }

    pub fn grade(&self, question: &str, prediction: &str, gold: &str) -> GradeResult {
        if prediction.trim().is_empty() {
            return GradeResult::binary(false, "").with_flag(FLAG_NO_ANSWER);
        }
        match self.consult(question, prediction, gold) {
            Ok(JudgeOutcome::Verdict { verdict, transcript }) => {
                let extracted = verdict.extracted_final_answer.clone().unwrap_or_else(|| prediction.to_string());
                GradeResult { judge_transcript: Some(transcript), ..GradeResult::binary(verdict.correct, extracted) }
            }
            Ok(JudgeOutcome::ParseFailure { transcript }) => GradeResult {
                judge_transcript: Some(transcript),
                ..GradeResult::binary(false, prediction).with_flag(FLAG_JUDGE_PARSE)
            },
            Ok(JudgeOutcome::ProviderFailure { error }) => {
                log::warn!("judge unavailable: {error}");
                GradeResult::binary(false, prediction).with_flag(FLAG_UNGRADED)
            }
            Err(e) => GradeResult::binary(false, prediction).with_flag(&e.to_string()),
        }
    }

    /// Equivalence oracle for grouping answers to `question`.
    pub fn for_question<'q>(&'q self, question: &'q str) -> JudgeEquivalence<'q, 'a> {
        JudgeEquivalence { judge: self, question }
    }
}

pub struct JudgeEquivalence<'q, 'a> {
    judge: &'q Judge<'a>,
    question: &'q str,
}

impl EquivalenceJudge for JudgeEquivalence<'_, '_> {
    fn equivalent(&self, reference: &str, candidate: &str) -> Result<bool, String> {
        match self.judge.consult(self.question, candidate, reference).map_err(|e| e.to_string())? {
            JudgeOutcome::Verdict { verdict, .. } => Ok(verdict.correct),
            JudgeOutcome::ParseFailure { .. } => Err(FLAG_JUDGE_PARSE.into()),
            JudgeOutcome::ProviderFailure { error } => Err(error),
        }
    }
}

/// A number read from free text: the whole answer if it parses, otherwise
/// the last numeric literal in it.
pub fn parse_numeric_prediction(prediction: &str) -> Option<f64> {
    let t = prediction.trim().trim_matches(|c: char| matches!(c, '[' | ']' | '\'' | '"' | '`' | '*')).trim();
    if let Ok(v) = t.replace(',', "").parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    number_regex().find_iter(&t.replace(',', "")).last().and_then(|m| m.as_str().parse().ok())
}

/// 0.75^|y − ŷ|.
pub fn oolong_numeric_score(gold: f64, predicted: f64) -> f64 {
    0.75f64.powf((gold - predicted).abs())
}

/// OOLONG scoring: partial credit for numbers, canonical match then judge
/// for labels.
pub fn oolong_score(question: &str, prediction: &str, gold: &GoldAnswer, judge: Option<&Judge>) -> GradeResult {
    match gold {
        GoldAnswer::Number(y) => match parse_numeric_prediction(prediction) {
            Some(p) => {
                let score = oolong_numeric_score(*y, p);
                GradeResult { correct: score == 1.0, score, ..GradeResult::binary(false, format_number(p)) }
            }
            None => GradeResult::binary(false, prediction).with_flag(FLAG_UNPARSEABLE_NUMBER),
        },
        _ => {
            let gold_text = gold.display_text();
            match (canonicalize_answer(prediction), canonicalize_answer(&gold_text)) {
                (Ok(p), Ok(g)) if p == g => GradeResult::binary(true, prediction),
                (Err(_), _) => GradeResult::binary(false, "").with_flag(FLAG_NO_ANSWER),
                _ => match judge {
                    Some(j) => j.grade(question, prediction, &gold_text),
                    None => GradeResult::binary(false, prediction).with_flag(FLAG_UNGRADED),
                },
            }
        }
    }
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        v.to_string()
    }
}

fn answer_letter_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\banswer(?:\s+is)?\s*[:\-]?\s*\(?([a-d])\)?(?:[^a-z0-9]|$)").unwrap())
}

fn paren_letter_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-D])\)").unwrap())
}

/// The option letter a prediction commits to, lowercase.
pub fn extract_mcq_letter(prediction: &str) -> Option<char> {
    if let Ok(c) = canonicalize_answer(prediction) {
        if c.len() == 1 && matches!(c.as_bytes()[0], b'a'..=b'd') {
            return c.chars().next();
        }
    }
    if let Some(c) = answer_letter_regex().captures_iter(prediction).last() {
        return c[1].to_lowercase().chars().next();
    }
    let parens: Vec<char> = paren_letter_regex()
        .captures_iter(prediction)
        .map(|c| c[1].to_ascii_lowercase().chars().next().unwrap())
        .collect();
    match parens.as_slice() {
        [only] => Some(*only),
        _ => None,
    }
}

pub fn mcq_score(prediction: &str, gold_letter: char) -> GradeResult {
    match extract_mcq_letter(prediction) {
        Some(l) => GradeResult::binary(l == gold_letter.to_ascii_lowercase(), l.to_ascii_uppercase().to_string()),
        None => GradeResult::binary(false, prediction).with_flag(FLAG_NO_LETTER),
    }
}

/// Grades a final prediction according to the task's scoring mode.
pub fn grade(task: &TaskInstance, prediction: Option<&str>, judge: Option<&Judge>) -> GradeResult {
    let Some(prediction) = prediction.filter(|p| !p.trim().is_empty()) else {
        return GradeResult::binary(false, "").with_flag(FLAG_NO_ANSWER);
    };
    match (task.scoring_mode, &task.gold) {
        (ScoringMode::Mcq, GoldAnswer::McqLetter(l)) => mcq_score(prediction, *l),
        (ScoringMode::NumericPartialCredit, gold) | (ScoringMode::CategoricalExactOrJudge, gold) => {
            oolong_score(&task.query, prediction, gold, judge)
        }
        (_, gold) => match judge {
            Some(j) => j.grade(&task.query, prediction, &gold.display_text()),
            None => GradeResult::binary(false, prediction).with_flag(FLAG_UNGRADED),
        },
    }
}
