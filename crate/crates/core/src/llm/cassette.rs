//! Line-delimited cassettes: one `(digest, response, usage)` record per line.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatProvider, ChatRequest, ChatResponse, LlmError, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub response: String,
    pub usage: Option<Usage>,
    #[serde(default)]
    pub latency_ms: u64,
}

impl CassetteEntry {
    pub fn from_exchange(request: &ChatRequest, response: &ChatResponse) -> Self {
        CassetteEntry {
            digest: request.digest(),
            model: Some(request.model.clone()),
            response: response.text.clone(),
            usage: response.usage,
            latency_ms: response.latency_ms,
        }
    }

    fn to_response(&self) -> ChatResponse {
        ChatResponse { text: self.response.clone(), usage: self.usage, latency_ms: self.latency_ms }
    }
}

/// Read-only digest index. The first entry wins when a digest repeats.
#[derive(Debug, Default, Clone)]
pub struct Cassette {
    entries: HashMap<String, CassetteEntry>,
}

impl Cassette {
    pub fn from_entries(entries: impl IntoIterator<Item = CassetteEntry>) -> Self {
        let mut map = HashMap::new();
        for e in entries {
            map.entry(e.digest.clone()).or_insert(e);
        }
        Cassette { entries: map }
    }

    pub fn parse(text: &str) -> Result<Self, LlmError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(line).map_err(|e| {
                LlmError::CassetteFormat { line: i + 1, message: e.to_string() }
            })?;
            if entry.digest.len() != 64 || !entry.digest.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(LlmError::CassetteFormat {
                    line: i + 1,
                    message: format!("digest {:?} is not a sha256 hex string", entry.digest),
                });
            }
            entries.push(entry);
        }
        Ok(Cassette::from_entries(entries))
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let file = File::open(path)
            .map_err(|e| LlmError::Config(format!("opening cassette {}: {e}", path.display())))?;
        let mut text = String::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LlmError::CassetteFormat { line: i + 1, message: e.to_string() })?;
            text.push_str(&line);
            text.push('\n');
        }
        Self::parse(&text)
    }

    pub fn get(&self, digest: &str) -> Option<&CassetteEntry> {
        self.entries.get(digest)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Serves responses from a cassette only.
pub struct ReplayProvider {
    cassette: Cassette,
}

impl ReplayProvider {
    pub fn new(cassette: Cassette) -> Self {
        ReplayProvider { cassette }
    }

    pub fn open(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::new(Cassette::load(path)?))
    }
}

impl ChatProvider for ReplayProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let digest = request.digest();
        self.cassette
            .get(&digest)
            .map(CassetteEntry::to_response)
            .ok_or(LlmError::ReplayMiss(digest))
    }
}

/// Forwards to `inner` and appends every successful exchange to a cassette.
pub struct RecordingProvider<P> {
    inner: P,
    writer: Mutex<File>,
    broken: AtomicBool,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn create(inner: P, path: &Path) -> Result<Self, LlmError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::CassetteWrite(format!("{}: {e}", path.display())))?;
        Ok(RecordingProvider { inner, writer: Mutex::new(file), broken: AtomicBool::new(false) })
    }

    fn append(&self, entry: &CassetteEntry) -> Result<(), LlmError> {
        let mut line = serde_json::to_string(entry).expect("entry serializes");
        line.push('\n');
        let mut file = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| LlmError::CassetteWrite(e.to_string()))
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let response = self.inner.chat(request)?;
        if let Err(e) = self.append(&CassetteEntry::from_exchange(request, &response)) {
            self.broken.store(true, Ordering::SeqCst);
            return Err(e);
        }
        Ok(response)
    }

    fn health(&self) -> Result<(), LlmError> {
        if self.broken.load(Ordering::SeqCst) {
            return Err(LlmError::CassetteWrite("an earlier cassette append failed".into()));
        }
        self.inner.health()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{FnProvider, Message};

    fn req(text: &str, salt: u64) -> ChatRequest {
        ChatRequest::new("m", vec![Message::user(text)], salt)
    }

    fn entry(r: &ChatRequest, text: &str) -> CassetteEntry {
        CassetteEntry {
            digest: r.digest(),
            model: None,
            response: text.into(),
            usage: None,
            latency_ms: 5,
        }
    }

    #[test]
    fn replay_lookup_and_determinism() {
        let r = req("2+2?", 0);
        let provider = ReplayProvider::new(Cassette::from_entries([entry(&r, "The answer is 4.")]));
        let a = provider.chat(&r).unwrap();
        let b = provider.chat(&r).unwrap();
        assert_eq!(a.text, "The answer is 4.");
        assert_eq!(a, b);
    }

    #[test]
    fn salt_selects_distinct_entries() {
        let (r1, r2) = (req("same", 1), req("same", 2));
        let provider = ReplayProvider::new(Cassette::from_entries([entry(&r1, "one"), entry(&r2, "two")]));
        assert_eq!(provider.chat(&r1).unwrap().text, "one");
        assert_eq!(provider.chat(&r2).unwrap().text, "two");
    }

    #[test]
    fn replay_miss_names_digest() {
        let provider = ReplayProvider::new(Cassette::default());
        let r = req("unknown", 0);
        match provider.chat(&r) {
            Err(LlmError::ReplayMiss(d)) => assert_eq!(d, r.digest()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupted_line_reports_line_number() {
        let good = serde_json::to_string(&entry(&req("a", 0), "x")).unwrap();
        let text = format!("{good}\n{{not json\n");
        match Cassette::parse(&text) {
            Err(LlmError::CassetteFormat { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let bad_digest = r#"{"digest":"zz","response":"x","usage":null}"#;
        assert!(matches!(
            Cassette::parse(bad_digest),
            Err(LlmError::CassetteFormat { line: 1, .. })
        ));
    }

    #[test]
    fn record_then_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let live = FnProvider(|r: &ChatRequest| {
            Ok(ChatResponse {
                text: format!("echo {}", r.messages[0].content),
                usage: Some(Usage { prompt_tokens: 1, completion_tokens: 2 }),
                latency_ms: 3,
            })
        });
        let recorder = RecordingProvider::create(live, &path).unwrap();
        let reqs: Vec<_> = (0..3).map(|i| req(&format!("q{i}"), i)).collect();
        let live_out: Vec<_> = reqs.iter().map(|r| recorder.chat(r).unwrap()).collect();
        drop(recorder);

        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let replay = ReplayProvider::open(&path).unwrap();
        for (r, expected) in reqs.iter().zip(&live_out) {
            assert_eq!(&replay.chat(r).unwrap(), expected);
        }
    }
}
