//! BrowseComp-Plus, from a directory of pre-decrypted records:
//!
//! * `queries.jsonl`: `query_id`, `query`, `answer`, `gold_docs`,
//!   `evidence_docs` (each a list of doc ids or of objects with `docid`).
//! * `corpus.jsonl`: `docid`, `text`.
//!
//! Each task's context is its gold and evidence documents plus seeded random
//! fill from the rest of the corpus, shuffled.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{read_jsonl, DatasetError, Draft, LoadContext, LoadReport};
use crate::domain::{ContextPayload, Document, GoldAnswer, ScoringMode, TaskInstance, TaskMeta};

#[derive(Debug, Clone)]
pub struct BrowseCompOptions {
    pub n_docs: usize,
    pub seed: u64,
}

impl Default for BrowseCompOptions {
    fn default() -> Self {
        BrowseCompOptions { n_docs: 1000, seed: 0 }
    }
}

#[derive(Deserialize)]
struct QueryRecord {
    query_id: Value,
    query: String,
    answer: String,
    #[serde(default)]
    gold_docs: Vec<Value>,
    #[serde(default)]
    evidence_docs: Vec<Value>,
}

#[derive(Deserialize)]
struct CorpusRecord {
    docid: Value,
    text: String,
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Object(o) => o.get("docid").and_then(id_string),
        _ => None,
    }
}

/// Per-query RNG, so one task's documents do not depend on which others loaded.
fn query_rng(seed: u64, query_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Required documents first, then `n_docs - required` random others, all shuffled.
pub fn assemble_context(
    required: &[String],
    corpus_ids: &[String],
    n_docs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>, DatasetError> {
    if n_docs < required.len() {
        return Err(DatasetError::Precondition(format!(
            "n_docs {n_docs} is smaller than the {} required gold and evidence documents",
            required.len()
        )));
    }
    let required_set: HashSet<&String> = required.iter().collect();
    let pool: Vec<&String> = corpus_ids.iter().filter(|id| !required_set.contains(id)).collect();
    let fill = (n_docs - required.len()).min(pool.len());
    let mut ids: Vec<String> = required.to_vec();
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), fill).into_vec();
    picked.sort_unstable();
    ids.extend(picked.into_iter().map(|i| pool[i].clone()));
    ids.shuffle(rng);
    Ok(ids)
}

pub fn load_browsecomp(
    dir: &Path,
    options: &BrowseCompOptions,
    cx: &LoadContext,
) -> Result<(Vec<TaskInstance>, LoadReport), DatasetError> {
    let mut report = LoadReport::default();
    let corpus_path = dir.join("corpus.jsonl");
    let mut corpus: HashMap<String, String> = HashMap::new();
    let mut corpus_ids = Vec::new();
    for (line, r) in read_jsonl::<CorpusRecord>(&corpus_path, &mut report)? {
        let Some(id) = id_string(&r.docid) else {
            report.skip(format!("{}:{line}: document without a usable docid", corpus_path.display()));
            continue;
        };
        if corpus.insert(id.clone(), r.text).is_none() {
            corpus_ids.push(id);
        }
    }
    let mut out = Vec::new();
    let queries_path = dir.join("queries.jsonl");
    for (line, q) in read_jsonl::<QueryRecord>(&queries_path, &mut report)? {
        let Some(qid) = id_string(&q.query_id) else {
            report.skip(format!("{}:{line}: query without a usable query_id", queries_path.display()));
            continue;
        };
        let mut required: Vec<String> = Vec::new();
        for v in q.gold_docs.iter().chain(&q.evidence_docs) {
            if let Some(id) = id_string(v) {
                if !required.contains(&id) {
                    required.push(id);
                }
            }
        }
        let missing: Vec<&String> = required.iter().filter(|id| !corpus.contains_key(*id)).collect();
        if !missing.is_empty() {
            let msg = format!("query {qid}: gold/evidence documents missing from corpus: {missing:?}");
            log::error!("{msg}");
            report.skip(msg);
            continue;
        }
        let ids = assemble_context(&required, &corpus_ids, options.n_docs, &mut query_rng(options.seed, &qid))?;
        let docs = ids.into_iter().map(|id| Document { text: corpus[&id].clone(), id }).collect();
        let mut meta = TaskMeta { source: "browsecomp-plus".into(), ..Default::default() };
        meta.extra.insert("n_docs".into(), options.n_docs.to_string());
        meta.extra.insert("seed".into(), options.seed.to_string());
        meta.extra.insert("required_docs".into(), required.join(","));
        let draft = Draft {
            id: qid,
            query: q.query,
            payload: ContextPayload::Documents(docs),
            gold: GoldAnswer::Text(q.answer),
            scoring_mode: ScoringMode::Judge,
            meta,
        };
        cx.finish(&mut report, &mut out, draft);
    }
    Ok((out, report))
}
