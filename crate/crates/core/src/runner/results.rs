//! Results file: JSONL, one `candidate` record per trajectory followed by one
//! `task` record, every record stamped with the schema version.
//!
//! A task's records are appended as one block with a single write. On
//! resume, a torn trailing line is cut off and candidate records that never
//! got their task record are dropped.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{GradeResult, ScoringMode, TerminatedBy, Trajectory};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("schema mismatch: {path} has version {found}, this build reads version {expected}")]
    Schema { path: PathBuf, found: u32, expected: u32 },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ResultsError + '_ {
    move |source| ResultsError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub schema: u32,
    pub task_id: String,
    pub method: String,
    pub k: u32,
    pub answer: Option<String>,
    /// Answer-group key the candidate was counted under; absent if unanswered.
    pub group: Option<String>,
    pub vc: f64,
    pub len: u64,
    pub joint: f64,
    pub imputed_steps: Vec<u32>,
    pub terminated_by: TerminatedBy,
    pub steps: u32,
    pub tokens: u64,
    pub wall_clock_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<GradeResult>,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub schema: u32,
    pub task_id: String,
    pub method: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub token_count: u64,
    pub window_limit: u64,
    pub scoring_mode: ScoringMode,
    pub k_samples: u32,
    pub selection_rule: String,
    pub prediction: Option<String>,
    /// Sample index of the selected trajectory.
    pub chosen: Option<u32>,
    pub plurality: Option<String>,
    pub prob: BTreeMap<String, f64>,
    pub consistent: Vec<u32>,
    pub unanswered: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_error: Option<String>,
    pub grade: GradeResult,
    /// Longest trajectory (they run side by side).
    pub wall_clock_ms: u64,
    /// Sum over trajectories.
    pub compute_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    /// Raw completion for single-call methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum ResultRecord {
    Candidate(CandidateRecord),
    Task(TaskRecord),
}

impl ResultRecord {
    fn schema(&self) -> u32 {
        match self {
            ResultRecord::Candidate(c) => c.schema,
            ResultRecord::Task(t) => t.schema,
        }
    }
}

/// All records for one (task, method) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub task: TaskRecord,
    pub candidates: Vec<CandidateRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemaProbe {
    schema: Option<u32>,
}

/// Parses a results file. Torn trailing lines are ignored; candidate
/// records without a task record are dropped.
pub fn read_results(path: &Path) -> Result<Vec<TaskResult>, ResultsError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    Ok(parse_blocks(path, &text)?.into_iter().map(|(r, _)| r).collect())
}

/// Complete task blocks with the exact bytes they were read from.
fn parse_blocks(path: &Path, text: &str) -> Result<Vec<(TaskResult, String)>, ResultsError> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut pending: BTreeMap<(String, String), (Vec<CandidateRecord>, String)> = BTreeMap::new();
    let mut out = Vec::new();
    for (i, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |e: serde_json::Error| ResultsError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        };
        let probe: SchemaProbe = serde_json::from_str(line).map_err(malformed)?;
        let found = probe.schema.unwrap_or(0);
        if found != SCHEMA_VERSION {
            return Err(ResultsError::Schema { path: path.to_path_buf(), found, expected: SCHEMA_VERSION });
        }
        let record: ResultRecord = serde_json::from_str(line).map_err(malformed)?;
        debug_assert_eq!(record.schema(), SCHEMA_VERSION);
        match record {
            ResultRecord::Candidate(c) => {
                let entry = pending.entry((c.task_id.clone(), c.method.clone())).or_default();
                entry.0.push(c);
                entry.1.push_str(line);
                entry.1.push('\n');
            }
            ResultRecord::Task(t) => {
                let (candidates, mut raw) = pending.remove(&(t.task_id.clone(), t.method.clone())).unwrap_or_default();
                raw.push_str(line);
                raw.push('\n');
                out.push((TaskResult { task: t, candidates }, raw));
            }
        }
    }
    for ((task, method), (c, _)) in pending {
        log::warn!("{}: dropping {} orphan candidate records of {task}/{method}", path.display(), c.len());
    }
    Ok(out)
}

/// Appends whole task blocks to a results file.
pub struct ResultsWriter {
    path: PathBuf,
    file: File,
    done: BTreeSet<(String, String)>,
}

impl ResultsWriter {
    /// Opens `path` for appending. An existing file is repaired first: a torn
    /// last line is cut and orphan candidate records are removed.
    pub fn open(path: &Path) -> Result<Self, ResultsError> {
        let mut done = BTreeSet::new();
        if path.exists() {
            let current = fs::read_to_string(path).map_err(io(path))?;
            let mut clean = String::new();
            for (r, raw) in parse_blocks(path, &current)? {
                clean.push_str(&raw);
                done.insert((r.task.task_id, r.task.method));
            }
            if current != clean {
                log::warn!("{}: repairing partially written results", path.display());
                let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
                let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io(path))?;
                tmp.write_all(clean.as_bytes()).map_err(io(path))?;
                tmp.persist(path).map_err(|e| ResultsError::Io { path: path.to_path_buf(), source: e.error })?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io(path))?;
        Ok(ResultsWriter { path: path.to_path_buf(), file, done })
    }

    pub fn is_done(&self, task_id: &str, method: &str) -> bool {
        self.done.contains(&(task_id.to_string(), method.to_string()))
    }

    pub fn completed(&self) -> usize {
        self.done.len()
    }

    pub fn append(&mut self, result: &TaskResult) -> Result<(), ResultsError> {
        let mut block = String::new();
        for c in &result.candidates {
            block.push_str(&to_line(&ResultRecord::Candidate(c.clone())));
        }
        block.push_str(&to_line(&ResultRecord::Task(result.task.clone())));
        self.file.write_all(block.as_bytes()).map_err(io(&self.path))?;
        self.file.flush().map_err(io(&self.path))?;
        self.done.insert((result.task.task_id.clone(), result.task.method.clone()));
        Ok(())
    }
}

fn to_line(record: &ResultRecord) -> String {
    let mut s = serde_json::to_string(record).expect("records serialize");
    s.push('\n');
    s
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn sample(task_id: &str, method: &str, k: u32) -> TaskResult {
        let trajectory = Trajectory {
            k: 0,
            steps: vec![],
            final_answer: Some("a".into()),
            terminated_by: TerminatedBy::FinalAnswer,
            error: None,
        };
        let candidates = (0..k)
            .map(|k| CandidateRecord {
                schema: SCHEMA_VERSION,
                task_id: task_id.into(),
                method: method.into(),
                k,
                answer: Some("a".into()),
                group: Some("a".into()),
                vc: -0.5,
                len: 10,
                joint: -5.0,
                imputed_steps: vec![],
                terminated_by: TerminatedBy::FinalAnswer,
                steps: 1,
                tokens: 10,
                wall_clock_ms: 5,
                error: None,
                grade: Some(GradeResult::binary(true, "a")),
                trajectory: Trajectory { k, ..trajectory.clone() },
            })
            .collect();
        TaskResult {
            task: TaskRecord {
                schema: SCHEMA_VERSION,
                task_id: task_id.into(),
                method: method.into(),
                source: "test".into(),
                domain: None,
                token_count: 10,
                window_limit: 100,
                scoring_mode: ScoringMode::Judge,
                k_samples: k,
                selection_rule: "argmax-joint".into(),
                prediction: Some("a".into()),
                chosen: Some(0),
                plurality: Some("a".into()),
                prob: BTreeMap::from([("a".to_string(), 1.0)]),
                consistent: (0..k).collect(),
                unanswered: vec![],
                selection_error: None,
                grade: GradeResult::binary(true, "a"),
                wall_clock_ms: 5,
                compute_ms: 5 * k as u64,
                flags: vec![],
                response: None,
            },
            candidates,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut w = ResultsWriter::open(&path).unwrap();
        w.append(&sample("t1", "srlm", 3)).unwrap();
        w.append(&sample("t2", "srlm", 3)).unwrap();
        let back = read_results(&path).unwrap();
        assert_eq!(back, vec![sample("t1", "srlm", 3), sample("t2", "srlm", 3)]);
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(text.lines().all(|l| l.contains("\"schema\":1")));
    }

    #[test]
    fn resume_repairs_torn_tail_and_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut w = ResultsWriter::open(&path).unwrap();
        w.append(&sample("t1", "srlm", 2)).unwrap();
        drop(w);
        let good = fs::read_to_string(&path).unwrap();
        // a second task whose block was cut mid-way: one whole candidate, one torn
        let partial = {
            let r = sample("t2", "srlm", 2);
            let mut s = to_line(&ResultRecord::Candidate(r.candidates[0].clone()));
            let second = to_line(&ResultRecord::Candidate(r.candidates[1].clone()));
            s.push_str(&second[..second.len() / 2]);
            s
        };
        fs::write(&path, format!("{good}{partial}")).unwrap();

        let w = ResultsWriter::open(&path).unwrap();
        assert!(w.is_done("t1", "srlm"));
        assert!(!w.is_done("t2", "srlm"));
        assert_eq!(fs::read_to_string(&path).unwrap(), good);
    }

    #[test]
    fn resume_keeps_complete_blocks_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut w = ResultsWriter::open(&path).unwrap();
        w.append(&sample("t1", "srlm", 2)).unwrap();
        drop(w);
        // same values, spelled the way another writer might spell them
        let respelled = fs::read_to_string(&path).unwrap().replace("\"vc\":-0.5", "\"vc\":-0.50");
        fs::write(&path, &respelled).unwrap();
        ResultsWriter::open(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), respelled);
        let joint = -120.82647042974799f64;
        let line = serde_json::to_string(&joint).unwrap();
        assert_eq!(serde_json::from_str::<f64>(&line).unwrap().to_bits(), joint.to_bits());
    }

    #[test]
    fn schema_mismatch_names_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        fs::write(&path, "{\"schema\":7,\"record\":\"task\"}\n").unwrap();
        let err = read_results(&path).unwrap_err().to_string();
        assert!(err.contains("version 7") && err.contains("version 1"), "{err}");
    }
}
