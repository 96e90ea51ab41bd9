//! Scripted fixture shared by the integration tests.
//!
//! Twenty four-way multiple-choice tasks, eight samples each. Every sample
//! runs one code step then answers; its per-step confidence and completion
//! token count are fixed by the plan, so each selection policy's outcome can
//! be worked out by hand (see `oracle_pick`).

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;
use srlm::domain::{ContextBlob, ContextPayload, GoldAnswer, ScoringMode, TaskInstance, TaskMeta};
use srlm::llm::{ChatProvider, ChatRequest, ChatResponse, FnProvider, LlmError, Role, Usage};

pub const K: usize = 8;
pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Clone, Copy)]
pub struct Sample {
    pub answer: char,
    /// Stated on the answer step; the code step states it too unless `silent_first`.
    pub confidence: f64,
    pub silent_first: bool,
    /// Completion tokens over both steps.
    pub tokens: u64,
}

#[derive(Debug, Clone)]
pub struct PlannedTask {
    pub id: String,
    pub gold: char,
    pub samples: Vec<Sample>,
}

fn s(answer: char, confidence: f64, tokens: u64) -> Sample {
    Sample { answer, confidence, silent_first: false, tokens }
}

/// 14 tasks where sample 0 is right, 4 where only the majority is, and 2
/// four-four splits where sample 0 sits in the wrong half but the right half
/// is more confident and terser.
pub fn plan() -> Vec<PlannedTask> {
    (0..20)
        .map(|i| {
            let gold = LETTERS[i % 4];
            let w1 = LETTERS[(i + 1) % 4];
            let w2 = LETTERS[(i + 2) % 4];
            let samples: Vec<Sample> = match i {
                0..=9 => (0..K)
                    .map(|k| match k {
                        0..=4 => s(gold, 70.0 + 5.0 * (k % 3) as f64, 200 + 10 * k as u64),
                        5 | 6 => s(w1, 60.0, 400),
                        _ => s(w2, 55.0, 450),
                    })
                    .collect(),
                // wrong answers are the confident, short ones here; consistency still wins
                10..=13 => (0..K)
                    .map(|k| match k {
                        0..=4 => s(gold, 60.0, 500),
                        5 | 6 => s(w1, 97.0, 60),
                        _ => s(w2, 95.0, 80),
                    })
                    .collect(),
                14..=17 => (0..K)
                    .map(|k| match k {
                        0 | 1 => s(w1, 95.0, 90),
                        2..=6 => s(gold, 75.0, 250),
                        _ => s(w2, 50.0, 300),
                    })
                    .collect(),
                _ => (0..K)
                    .map(|k| match k {
                        0..=3 => s(w1, 60.0, 500 + k as u64),
                        _ => Sample { answer: gold, confidence: 90.0, silent_first: k == 5, tokens: 150 },
                    })
                    .collect(),
            };
            PlannedTask { id: format!("t{i:02}"), gold, samples }
        })
        .collect()
}

pub fn query(id: &str) -> String {
    format!("[{id}] Which label fits the record?\n\nA. alpha\nB. beta\nC. gamma\nD. delta")
}

pub fn context_text(id: &str) -> String {
    format!("record {id}: ").repeat(40)
}

pub fn task_instance(t: &PlannedTask) -> TaskInstance {
    let text = context_text(&t.id);
    let tokens = (text.len() as u64).div_ceil(4);
    TaskInstance {
        id: t.id.clone(),
        query: query(&t.id),
        context: ContextBlob { payload: ContextPayload::Text(text), token_count: tokens, window_limit: 272_000 },
        gold: GoldAnswer::McqLetter(t.gold),
        scoring_mode: ScoringMode::Mcq,
        meta: TaskMeta { source: "fixture".into(), token_count: tokens, ..Default::default() },
    }
}

/// Native-format dataset file for `tasks`.
pub fn write_dataset(path: &Path, tasks: &[PlannedTask]) {
    let body: String = tasks
        .iter()
        .map(|t| {
            let line = json!({
                "id": t.id,
                "query": query(&t.id),
                "context": context_text(&t.id),
                "gold": {"kind": "mcq-letter", "value": t.gold.to_string()},
                "scoring_mode": "mcq",
                "source": "fixture",
            });
            format!("{line}\n")
        })
        .collect();
    std::fs::write(path, body).unwrap();
}

/// The model: reads the task id from the query and the sample index from
/// the salt, then plays that sample's two scripted turns.
pub fn scripted_model(tasks: &[PlannedTask]) -> impl ChatProvider {
    let by_id: BTreeMap<String, Vec<Sample>> = tasks.iter().map(|t| (t.id.clone(), t.samples.clone())).collect();
    let id_re = regex::Regex::new(r"Query: \[(t\d+)\]").unwrap();
    FnProvider(move |req: &ChatRequest| {
        let first_user = req.messages.iter().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("");
        let id = id_re
            .captures(first_user)
            .map(|c| c[1].to_string())
            .ok_or_else(|| LlmError::Malformed("scripted model: unknown prompt".into()))?;
        let sample = by_id[&id][req.salt as usize];
        let turn = req.messages.iter().filter(|m| m.role == Role::Assistant).count();
        let first = sample.tokens / 2;
        let (text, tokens) = if turn == 0 {
            let conf = if sample.silent_first { String::new() } else { format!("\n{{\"confidence\": {}}}", sample.confidence) };
            (format!("Checking the size first.\n```python\nprint(len(context))\n```{conf}"), first)
        } else {
            (
                format!("FINAL ANSWER: {}\n{{\"confidence\": {}}}", sample.answer, sample.confidence),
                sample.tokens - first,
            )
        };
        Ok(ChatResponse {
            text,
            usage: Some(Usage { prompt_tokens: 0, completion_tokens: tokens }),
            latency_ms: 40 + req.salt,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pick {
    First,
    Majority,
    Joint,
}

/// Brute-force answer each policy gives on a planned task.
pub fn oracle_pick(t: &PlannedTask, pick: Pick) -> char {
    let joint = |x: &Sample| {
        let per_step = (x.confidence / 100.0).ln();
        // a silent step is filled with the mean of the stated ones, which here is the same value
        2.0 * per_step * x.tokens as f64
    };
    let mut counts: BTreeMap<char, usize> = BTreeMap::new();
    for x in &t.samples {
        *counts.entry(x.answer).or_default() += 1;
    }
    let top = *counts.values().max().unwrap();
    let tied: Vec<char> = counts.iter().filter(|(_, &n)| n == top).map(|(&c, _)| c).collect();
    match pick {
        Pick::First => t.samples[0].answer,
        Pick::Majority => t.samples.iter().find(|x| tied.contains(&x.answer)).unwrap().answer,
        Pick::Joint => {
            let mut best: Option<&Sample> = None;
            for x in t.samples.iter().filter(|x| tied.contains(&x.answer)) {
                if best.is_none_or(|b| joint(x) > joint(b)) {
                    best = Some(x);
                }
            }
            best.unwrap().answer
        }
    }
}

pub fn oracle_correct(tasks: &[PlannedTask], pick: Pick) -> usize {
    tasks.iter().filter(|t| oracle_pick(t, pick) == t.gold).count()
}
