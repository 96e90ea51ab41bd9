//! Engine side of the interpreter sandbox.
//!
//! The interpreter itself is an external worker process speaking a
//! newline-delimited JSON protocol over stdio ([`ProcessSandbox`] is the
//! client). [`ScriptedSandbox`] is an in-process stand-in that understands a
//! small Python subset; it lets the orchestration engine be exercised without
//! the worker installed. [`conformance`] drives either implementation through
//! the same protocol checks.
//!
//! While a cell runs, the worker may emit `{"op":"subcall",...}` lines asking
//! the engine to query the sub-model; the engine answers each with a
//! `{"op":"subcall_result",...}` line before the cell's reply arrives.

pub mod conformance;
pub mod process;
pub mod scripted;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ExecResult, ExecStatus};

pub use process::{ProcessSandbox, ProcessSandboxFactory};
pub use scripted::{ScriptedSandbox, ScriptedSandboxFactory};

pub const ERR_SESSION_EXISTS: &str = "session-exists";
pub const ERR_NO_SESSION: &str = "no-session";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerOp {
    Init,
    Exec,
    Shutdown,
    SubcallResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextFormat {
    /// Raw UTF-8 text bound to `context` as a string.
    Text,
    /// JSON array of `{"id","text"}` objects bound to `context` as a list of strings.
    DocumentsJson,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextRef {
    Path { path: PathBuf, format: ContextFormat },
    Inline { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerMessage {
    pub op: WorkerOp,
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_ref: Option<ContextRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    /// Sub-model answer, `subcall_result` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplyStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerReply {
    pub session_id: String,
    pub status: ReplyStatus,
    pub stdout: String,
    pub stderr: String,
    pub truncated: bool,
    pub duration_ms: u64,
}

impl WorkerReply {
    pub fn ok(session_id: &str) -> Self {
        WorkerReply {
            session_id: session_id.to_string(),
            status: ReplyStatus::Ok,
            stdout: String::new(),
            stderr: String::new(),
            truncated: false,
            duration_ms: 0,
        }
    }

    pub fn error(session_id: &str, message: impl Into<String>) -> Self {
        WorkerReply { status: ReplyStatus::Error, stderr: message.into(), ..Self::ok(session_id) }
    }

    pub fn into_exec_result(self) -> ExecResult {
        ExecResult {
            stdout: self.stdout,
            stderr: self.stderr,
            truncated: self.truncated,
            duration_ms: self.duration_ms,
            status: match self.status {
                ReplyStatus::Ok => ExecStatus::Ok,
                ReplyStatus::Error => ExecStatus::Error,
                ReplyStatus::Timeout => ExecStatus::Timeout,
            },
        }
    }
}

/// A sub-model query raised from inside a running cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubcallRequest {
    pub prompt: String,
    #[serde(default)]
    pub slice: String,
    /// 0 for a call made by root-level code.
    #[serde(default)]
    pub depth: u32,
}

pub trait SubcallHandler {
    fn subcall(&mut self, request: SubcallRequest) -> String;
}

/// Handler for contexts where sub-calls are unavailable.
pub struct RejectSubcalls;

impl SubcallHandler for RejectSubcalls {
    fn subcall(&mut self, _request: SubcallRequest) -> String {
        "subcalls-disabled".to_string()
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("spawning worker: {0}")]
    Spawn(String),
    #[error("worker i/o: {0}")]
    Io(String),
    #[error("worker protocol violation: {0}")]
    Protocol(String),
    #[error("worker exited unexpectedly")]
    Exited,
}

/// One interpreter worker. Sessions are addressed by id; the engine opens one
/// session per trajectory.
pub trait Sandbox: Send {
    fn init(&mut self, session_id: &str, context: &ContextRef) -> Result<WorkerReply, SandboxError>;

    fn exec(
        &mut self,
        session_id: &str,
        code: &str,
        timeout_ms: u64,
        subcalls: &mut dyn SubcallHandler,
    ) -> Result<WorkerReply, SandboxError>;

    fn shutdown(&mut self, session_id: &str) -> Result<WorkerReply, SandboxError>;
}

pub trait SandboxFactory: Send + Sync {
    fn spawn(&self) -> Result<Box<dyn Sandbox>, SandboxError>;
}

/// Cuts `text` to at most `cap` characters; returns whether anything was cut.
pub fn truncate_chars(text: &mut String, cap: usize) -> bool {
    match text.char_indices().nth(cap) {
        Some((byte_idx, _)) => {
            text.truncate(byte_idx);
            true
        }
        None => false,
    }
}

/// Applies the output cap to both streams of a reply.
pub fn enforce_truncation(reply: &mut WorkerReply, cap: usize) {
    let a = truncate_chars(&mut reply.stdout, cap);
    let b = truncate_chars(&mut reply.stderr, cap);
    reply.truncated |= a || b;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_counts_chars() {
        let mut s = "héllo".to_string();
        assert!(truncate_chars(&mut s, 2));
        assert_eq!(s, "hé");
        let mut t = "abc".to_string();
        assert!(!truncate_chars(&mut t, 3));
    }

    #[test]
    fn messages_are_single_lines() {
        let msg = WorkerMessage {
            op: WorkerOp::Exec,
            session_id: "s".into(),
            code: Some("print('a')\nprint(\"b\")\r\n".into()),
            context_ref: None,
            timeout_ms: Some(5),
            text: None,
        };
        let line = serde_json::to_string(&msg).unwrap();
        assert!(!line.contains('\n'));
        assert!(line.contains(r#""op":"exec""#));
        let back: WorkerMessage = serde_json::from_str(&line).unwrap();
        assert_eq!(back, msg);

        let init = WorkerMessage {
            op: WorkerOp::Init,
            session_id: "s".into(),
            code: None,
            context_ref: Some(ContextRef::Path { path: "/tmp/c.txt".into(), format: ContextFormat::Text }),
            timeout_ms: None,
            text: None,
        };
        let v: serde_json::Value = serde_json::to_value(&init).unwrap();
        assert_eq!(v["context_ref"]["path"]["format"], "text");
    }
}
