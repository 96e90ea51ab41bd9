//! Benchmark loaders. Every loader yields validated [`TaskInstance`]s plus a
//! [`LoadReport`] accounting for what was skipped.

pub mod browsecomp;
pub mod longbench;
pub mod oolong;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ContextBlob, ContextPayload, Document, GoldAnswer, ScoringMode, TaskInstance, TaskMeta};
use crate::llm::TokenCounter;

pub use browsecomp::{load_browsecomp, BrowseCompOptions};
pub use longbench::{load_longbench, LongBenchOptions};
pub use oolong::{load_oolong, OolongOptions};

/// Context-length threshold separating within-window from near/beyond-window tasks.
pub const LONG_CONTEXT_THRESHOLD: u64 = 131_072;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("unknown dataset kind {0:?} (expected native, oolong, longbench or browsecomp)")]
    UnknownKind(String),
    #[error("dataset spec must be KIND:PATH, got {0:?}")]
    BadSpec(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped: usize,
    pub warnings: Vec<String>,
    /// Tasks per length tag found in the data, where the format carries one.
    pub length_tags: BTreeMap<u64, usize>,
}

impl LoadReport {
    pub(crate) fn skip(&mut self, message: String) {
        log::warn!("{message}");
        self.skipped += 1;
        self.warnings.push(message);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Native,
    Oolong,
    LongBench,
    BrowseComp,
}

impl FromStr for DatasetKind {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(DatasetKind::Native),
            "oolong" => Ok(DatasetKind::Oolong),
            "longbench" => Ok(DatasetKind::LongBench),
            "browsecomp" => Ok(DatasetKind::BrowseComp),
            other => Err(DatasetError::UnknownKind(other.to_string())),
        }
    }
}

/// `KIND:PATH` as given on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub path: PathBuf,
}

impl FromStr for DatasetSpec {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, path) = s.split_once(':').ok_or_else(|| DatasetError::BadSpec(s.to_string()))?;
        if path.is_empty() {
            return Err(DatasetError::BadSpec(s.to_string()));
        }
        Ok(DatasetSpec { kind: kind.parse()?, path: PathBuf::from(path) })
    }
}

/// Token counts per task, persisted next to the dataset and keyed by the
/// counter's identity so switching counters never reuses stale numbers.
pub struct TokenCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, u64>>,
    dirty: Mutex<bool>,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    counter: String,
    counts: BTreeMap<String, u64>,
}

impl TokenCache {
    pub fn in_memory() -> Self {
        TokenCache { path: None, entries: Mutex::new(HashMap::new()), dirty: Mutex::new(false) }
    }

    /// Opens `<dataset>.tokens.<counter-id>.json`, starting empty if it is
    /// missing or unreadable.
    pub fn for_dataset(dataset: &Path, counter: &dyn TokenCounter) -> Self {
        let id = counter.id();
        let mut name = dataset.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(format!(".tokens.{id}.json"));
        let path = dataset.with_file_name(name);
        let entries = fs::read_to_string(&path)
            .ok()
            .and_then(|text| serde_json::from_str::<CacheFile>(&text).ok())
            .filter(|f| f.counter == id)
            .map(|f| f.counts.into_iter().collect())
            .unwrap_or_default();
        TokenCache { path: Some(path), entries: Mutex::new(entries), dirty: Mutex::new(false) }
    }

    fn key(task_id: &str, payload: &ContextPayload) -> String {
        format!("{task_id}@{}", payload.byte_len())
    }

    pub fn count(&self, counter: &dyn TokenCounter, task_id: &str, payload: &ContextPayload) -> u64 {
        let key = Self::key(task_id, payload);
        if let Some(n) = self.entries.lock().unwrap().get(&key) {
            return *n;
        }
        let n = match payload {
            ContextPayload::Text(t) => counter.count(t),
            ContextPayload::Documents(d) => d.iter().map(|d| counter.count(&d.text)).sum(),
        };
        self.entries.lock().unwrap().insert(key, n);
        *self.dirty.lock().unwrap() = true;
        n
    }

    /// Writes the cache if anything was added. Failures only cost a recount later.
    pub fn flush(&self, counter: &dyn TokenCounter) {
        let (Some(path), true) = (&self.path, *self.dirty.lock().unwrap()) else { return };
        let file = CacheFile {
            counter: counter.id(),
            counts: self.entries.lock().unwrap().iter().map(|(k, v)| (k.clone(), *v)).collect(),
        };
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let result = tempfile::NamedTempFile::new_in(dir).and_then(|mut tmp| {
            tmp.write_all(serde_json::to_string(&file).expect("cache serializes").as_bytes())?;
            tmp.persist(path).map(|_| ()).map_err(|e| e.error)
        });
        match result {
            Ok(()) => *self.dirty.lock().unwrap() = false,
            Err(e) => log::warn!("could not write token cache {}: {e}", path.display()),
        }
    }
}

/// A task before its tokens are counted.
pub(crate) struct Draft {
    pub id: String,
    pub query: String,
    pub payload: ContextPayload,
    pub gold: GoldAnswer,
    pub scoring_mode: ScoringMode,
    pub meta: TaskMeta,
}

/// Shared loader inputs.
pub struct LoadContext<'a> {
    pub counter: &'a dyn TokenCounter,
    pub window_limit: u64,
    pub cache: &'a TokenCache,
}

impl LoadContext<'_> {
    /// Counts tokens, validates, and pushes the task or records why not.
    pub(crate) fn finish(&self, report: &mut LoadReport, out: &mut Vec<TaskInstance>, draft: Draft) {
        let Draft { id, query, payload, gold, scoring_mode, mut meta } = draft;
        let tokens = self.cache.count(self.counter, &id, &payload).max(1);
        meta.token_count = tokens;
        let task = TaskInstance {
            id,
            query,
            context: ContextBlob { payload, token_count: tokens, window_limit: self.window_limit },
            gold,
            scoring_mode,
            meta,
        };
        match task.validate() {
            Ok(()) => {
                report.loaded += 1;
                out.push(task);
            }
            Err(e) => report.skip(e.to_string()),
        }
    }
}

/// Reads a JSONL file line by line; unparsable lines are skipped and counted.
pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
    report: &mut LoadReport,
) -> Result<Vec<(usize, T)>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(line) {
            Ok(v) => out.push((i + 1, v)),
            Err(e) => report.skip(format!("{}:{}: malformed record: {e}", path.display(), i + 1)),
        }
    }
    if out.is_empty() && report.skipped == 0 {
        let msg = format!("{}: no records", path.display());
        log::warn!("{msg}");
        report.warnings.push(msg);
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NativeContext {
    Text(String),
    Documents(Vec<Document>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeRecord {
    id: String,
    query: String,
    context: NativeContext,
    gold: GoldAnswer,
    scoring_mode: ScoringMode,
    #[serde(default)]
    domain: Option<String>,
    #[serde(default)]
    source: Option<String>,
}

/// The engine's own task format: one JSON object per line with `id`, `query`,
/// `context` (a string or a list of `{id, text}`), `gold`, `scoring_mode`,
/// and optional `domain` / `source`.
pub fn load_native(path: &Path, cx: &LoadContext) -> Result<(Vec<TaskInstance>, LoadReport), DatasetError> {
    let mut report = LoadReport::default();
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line, r) in read_jsonl::<NativeRecord>(path, &mut report)? {
        if !seen.insert(r.id.clone()) {
            report.skip(format!("{}:{line}: duplicate id {}", path.display(), r.id));
            continue;
        }
        let payload = match r.context {
            NativeContext::Text(t) => ContextPayload::Text(t),
            NativeContext::Documents(d) => ContextPayload::Documents(d),
        };
        let meta = TaskMeta { domain: r.domain, source: r.source.unwrap_or_else(|| "native".into()), ..Default::default() };
        cx.finish(
            &mut report,
            &mut out,
            Draft { id: r.id, query: r.query, payload, gold: r.gold, scoring_mode: r.scoring_mode, meta },
        );
    }
    cx.cache.flush(cx.counter);
    Ok((out, report))
}

/// Splits tasks at `threshold` tokens: `(short, long)`, with equality going long.
pub fn bin_by_context_length(tasks: &[TaskInstance], threshold: u64) -> (Vec<&TaskInstance>, Vec<&TaskInstance>) {
    tasks.iter().partition(|t| t.context.token_count < threshold)
}

/// Loads any supported dataset with default per-kind options.
pub fn load(spec: &DatasetSpec, cx: &LoadContext, seed: u64) -> Result<(Vec<TaskInstance>, LoadReport), DatasetError> {
    match spec.kind {
        DatasetKind::Native => load_native(&spec.path, cx),
        DatasetKind::Oolong => load_oolong(&spec.path, &OolongOptions::default(), cx),
        DatasetKind::LongBench => load_longbench(&spec.path, &LongBenchOptions::default(), cx),
        DatasetKind::BrowseComp => load_browsecomp(&spec.path, &BrowseCompOptions { seed, ..Default::default() }, cx),
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::llm::ByteHeuristic;

    pub fn cx(cache: &TokenCache) -> LoadContext<'_> {
        LoadContext { counter: &ByteHeuristic, window_limit: 272_000, cache }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::cx;
    use super::*;
    use crate::llm::ByteHeuristic;
    use proptest::prelude::*;

    fn task(id: &str, tokens: u64) -> TaskInstance {
        TaskInstance {
            id: id.into(),
            query: "q".into(),
            context: ContextBlob { payload: ContextPayload::Text("x".into()), token_count: tokens, window_limit: 1 },
            gold: GoldAnswer::Text("a".into()),
            scoring_mode: ScoringMode::Judge,
            meta: TaskMeta { token_count: tokens, source: "t".into(), ..Default::default() },
        }
    }

    #[test]
    fn binning() {
        let tasks = vec![task("a", 64_000), task("b", 131_072), task("c", 4_000_000), task("d", 131_071)];
        let (short, long) = bin_by_context_length(&tasks, LONG_CONTEXT_THRESHOLD);
        let ids = |v: &[&TaskInstance]| v.iter().map(|t| t.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&short), vec!["a", "d"]);
        assert_eq!(ids(&long), vec!["b", "c"]);
    }

    proptest! {
        #[test]
        fn binning_partitions(counts in prop::collection::vec(1u64..300_000, 0..40)) {
            let tasks: Vec<_> = counts.iter().enumerate().map(|(i, c)| task(&i.to_string(), *c)).collect();
            let (s, l) = bin_by_context_length(&tasks, LONG_CONTEXT_THRESHOLD);
            prop_assert_eq!(s.len() + l.len(), tasks.len());
            prop_assert!(s.iter().all(|t| t.context.token_count < LONG_CONTEXT_THRESHOLD));
            prop_assert!(l.iter().all(|t| t.context.token_count >= LONG_CONTEXT_THRESHOLD));
        }
    }

    #[test]
    fn spec_parsing() {
        let s: DatasetSpec = "oolong:/data/x.jsonl".parse().unwrap();
        assert_eq!(s.kind, DatasetKind::Oolong);
        assert!("nope:/x".parse::<DatasetSpec>().is_err());
        assert!("oolong".parse::<DatasetSpec>().is_err());
    }

    #[test]
    fn native_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        fs::write(
            &path,
            concat!(
                r#"{"id":"a","query":"q","context":"0123456789","gold":{"kind":"text","value":"x"},"scoring_mode":"judge"}"#,
                "\n",
                r#"{"id":"b","query":"q","context":[{"id":"d1","text":"abcd"}],"gold":{"kind":"mcq-letter","value":"B"},"scoring_mode":"mcq","domain":"code"}"#,
                "\n",
                "not json\n",
                r#"{"id":"c","query":"q","context":"zz","gold":{"kind":"number","value":3},"scoring_mode":"mcq"}"#,
                "\n",
                r#"{"id":"a","query":"q","context":"dup","gold":{"kind":"text","value":"x"},"scoring_mode":"judge"}"#,
                "\n",
            ),
        )
        .unwrap();
        let cache = TokenCache::for_dataset(&path, &ByteHeuristic);
        let (tasks, report) = load_native(&path, &cx(&cache)).unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(report.skipped, 3);
        assert_eq!(tasks[0].context.token_count, 3);
        assert_eq!(tasks[1].meta.domain.as_deref(), Some("code"));
        assert!(dir.path().join("tasks.jsonl.tokens.bytes-div-4.json").exists());
        let again = TokenCache::for_dataset(&path, &ByteHeuristic);
        assert_eq!(again.entries.lock().unwrap().len(), 3);
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        fs::write(&path, "").unwrap();
        let cache = TokenCache::in_memory();
        let (tasks, report) = load_native(&path, &cx(&cache)).unwrap();
        assert!(tasks.is_empty());
        assert_eq!(report.warnings.len(), 1);
    }
}
