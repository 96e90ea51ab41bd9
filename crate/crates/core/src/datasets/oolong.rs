//! OOLONG-synth records (JSONL export of the published split).
//!
//! Fields read per line: `id`, `context_len`, `dataset`,
//! `context_window_text`, `question`, `answer`, `answer_type`. Answers are
//! stored as a Python-literal list such as `[23]` or `['LOC']`.

use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use super::{read_jsonl, DatasetError, Draft, LoadContext, LoadReport};
use crate::domain::{ContextPayload, GoldAnswer, ScoringMode, TaskInstance, TaskMeta};

#[derive(Debug, Clone)]
pub struct OolongOptions {
    /// Keep only this synthetic source dataset.
    pub subset: Option<String>,
    /// Keep only this length tag.
    pub context_len: Option<u64>,
}

impl Default for OolongOptions {
    fn default() -> Self {
        OolongOptions { subset: Some("trec_coarse".into()), context_len: None }
    }
}

#[derive(Deserialize)]
struct Record {
    id: Value,
    #[serde(default)]
    context_len: Option<u64>,
    #[serde(default)]
    dataset: Option<String>,
    context_window_text: String,
    question: String,
    answer: Value,
    #[serde(default)]
    answer_type: Option<String>,
    #[serde(default)]
    task: Option<String>,
}

/// First element of a Python-literal list, unquoted.
pub(crate) fn parse_answer(raw: &Value) -> Option<String> {
    let s = match raw {
        Value::String(s) => s.trim().to_string(),
        Value::Number(n) => return Some(n.to_string()),
        Value::Array(items) => return items.first().and_then(parse_answer),
        _ => return None,
    };
    let inner = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')).unwrap_or(&s);
    let first = inner.split(',').next()?.trim();
    let unquoted = first
        .strip_prefix('\'')
        .and_then(|r| r.strip_suffix('\''))
        .or_else(|| first.strip_prefix('"').and_then(|r| r.strip_suffix('"')))
        .unwrap_or(first)
        .trim();
    (!unquoted.is_empty()).then(|| unquoted.to_string())
}

fn is_numeric_type(answer_type: Option<&str>) -> bool {
    answer_type.is_some_and(|t| t.to_ascii_uppercase().ends_with("NUMERIC"))
}

pub fn load_oolong(
    path: &Path,
    options: &OolongOptions,
    cx: &LoadContext,
) -> Result<(Vec<TaskInstance>, LoadReport), DatasetError> {
    let mut report = LoadReport::default();
    let mut out = Vec::new();
    for (line, r) in read_jsonl::<Record>(path, &mut report)? {
        if let (Some(want), Some(have)) = (&options.subset, &r.dataset) {
            if want != have {
                continue;
            }
        }
        if let (Some(want), Some(have)) = (options.context_len, r.context_len) {
            if want != have {
                continue;
            }
        }
        let id = match &r.id {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let Some(answer) = parse_answer(&r.answer) else {
            report.skip(format!("{}:{line}: task {id} has no usable answer", path.display()));
            continue;
        };
        let (gold, mode) = if is_numeric_type(r.answer_type.as_deref()) {
            match answer.parse::<f64>() {
                Ok(n) => (GoldAnswer::Number(n), ScoringMode::NumericPartialCredit),
                Err(_) => {
                    report.skip(format!("{}:{line}: task {id} numeric answer {answer:?} does not parse", path.display()));
                    continue;
                }
            }
        } else {
            (GoldAnswer::Text(answer), ScoringMode::CategoricalExactOrJudge)
        };
        if let Some(len) = r.context_len {
            *report.length_tags.entry(len).or_default() += 1;
        }
        let mut meta = TaskMeta { domain: r.dataset.clone(), source: "oolong-synth".into(), ..Default::default() };
        if let Some(len) = r.context_len {
            meta.extra.insert("context_len".into(), len.to_string());
        }
        if let Some(task) = r.task {
            meta.extra.insert("task".into(), task);
        }
        let draft = Draft {
            id,
            query: r.question,
            payload: ContextPayload::Text(r.context_window_text),
            gold,
            scoring_mode: mode,
            meta,
        };
        cx.finish(&mut report, &mut out, draft);
    }
    if !report.length_tags.is_empty() {
        log::info!("oolong length tags: {:?}", report.length_tags);
    }
    cx.cache.flush(cx.counter);
    Ok((out, report))
}
