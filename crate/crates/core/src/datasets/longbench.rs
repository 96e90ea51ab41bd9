//! LongBench-v2 records: `_id`, `domain`, `question`, `choice_A`..`choice_D`,
//! `answer` (a letter), `context`. Accepts a JSON array or JSONL.

use std::path::Path;

use serde::Deserialize;

use super::{io_err, read_jsonl, DatasetError, Draft, LoadContext, LoadReport};
use crate::domain::{ContextPayload, GoldAnswer, ScoringMode, TaskInstance, TaskMeta};

#[derive(Debug, Clone, Default)]
pub struct LongBenchOptions {
    /// Keep domains whose slug starts with this (e.g. `code-repository`).
    pub domain_filter: Option<String>,
    pub min_tokens: Option<u64>,
    pub max_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct Record {
    #[serde(rename = "_id")]
    id: String,
    #[serde(default)]
    domain: Option<String>,
    #[serde(default)]
    sub_domain: Option<String>,
    #[serde(default)]
    difficulty: Option<String>,
    #[serde(default)]
    length: Option<String>,
    question: String,
    #[serde(rename = "choice_A")]
    a: Option<String>,
    #[serde(rename = "choice_B")]
    b: Option<String>,
    #[serde(rename = "choice_C")]
    c: Option<String>,
    #[serde(rename = "choice_D")]
    d: Option<String>,
    answer: String,
    context: String,
}

/// `Code Repository Understanding` → `code-repository-understanding`.
pub fn domain_slug(domain: &str) -> String {
    let mut slug = String::new();
    for c in domain.chars() {
        if c.is_ascii_alphanumeric() {
            slug.push(c.to_ascii_lowercase());
        } else if !slug.ends_with('-') && !slug.is_empty() {
            slug.push('-');
        }
    }
    slug.trim_end_matches('-').to_string()
}

fn render_query(question: &str, choices: [&str; 4]) -> String {
    format!(
        "{}\n\nA. {}\nB. {}\nC. {}\nD. {}\n\nAnswer with the letter of the correct choice.",
        question.trim(),
        choices[0],
        choices[1],
        choices[2],
        choices[3]
    )
}

fn read_records(path: &Path, report: &mut LoadReport) -> Result<Vec<(usize, Record)>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    if text.trim_start().starts_with('[') {
        let values: Vec<serde_json::Value> = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => {
                report.skip(format!("{}: malformed JSON array: {e}", path.display()));
                return Ok(Vec::new());
            }
        };
        let mut out = Vec::new();
        for (i, v) in values.into_iter().enumerate() {
            match serde_json::from_value(v) {
                Ok(r) => out.push((i + 1, r)),
                Err(e) => report.skip(format!("{}: record {}: {e}", path.display(), i + 1)),
            }
        }
        return Ok(out);
    }
    read_jsonl(path, report)
}

pub fn load_longbench(
    path: &Path,
    options: &LongBenchOptions,
    cx: &LoadContext,
) -> Result<(Vec<TaskInstance>, LoadReport), DatasetError> {
    let mut report = LoadReport::default();
    let mut out = Vec::new();
    for (n, r) in read_records(path, &mut report)? {
        let slug = r.domain.as_deref().map(domain_slug);
        if let Some(filter) = &options.domain_filter {
            if !slug.as_deref().is_some_and(|s| s.starts_with(&domain_slug(filter))) {
                continue;
            }
        }
        let (Some(a), Some(b), Some(c), Some(d)) = (&r.a, &r.b, &r.c, &r.d) else {
            report.skip(format!("{}: record {n} ({}) is missing a choice", path.display(), r.id));
            continue;
        };
        let letter = r.answer.trim().to_ascii_uppercase();
        let gold = match letter.as_str() {
            "A" | "B" | "C" | "D" => GoldAnswer::McqLetter(letter.chars().next().unwrap()),
            _ => {
                report.skip(format!("{}: record {n} ({}) has answer {:?}", path.display(), r.id, r.answer));
                continue;
            }
        };
        let mut meta = TaskMeta { domain: slug, source: "longbench-v2".into(), ..Default::default() };
        for (k, v) in [("sub_domain", &r.sub_domain), ("difficulty", &r.difficulty), ("length", &r.length)] {
            if let Some(v) = v {
                meta.extra.insert(k.into(), v.clone());
            }
        }
        let payload = ContextPayload::Text(r.context);
        let tokens = cx.cache.count(cx.counter, &r.id, &payload);
        if options.min_tokens.is_some_and(|m| tokens < m) || options.max_tokens.is_some_and(|m| tokens > m) {
            continue;
        }
        let draft = Draft {
            id: r.id,
            query: render_query(&r.question, [a, b, c, d]),
            payload,
            gold,
            scoring_mode: ScoringMode::Mcq,
            meta,
        };
        cx.finish(&mut report, &mut out, draft);
    }
    cx.cache.flush(cx.counter);
    Ok((out, report))
}
