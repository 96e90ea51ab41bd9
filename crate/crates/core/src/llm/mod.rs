//! Provider-agnostic chat completion with token accounting.
//!
//! Three providers share the [`ChatProvider`] port: a live HTTP client
//! ([`http::HttpProvider`]), a cassette recorder wrapping any provider, and a
//! replaying provider that serves only from a cassette and never touches the
//! network. Requests are identified by a content digest that includes the
//! candidate's sample index, so a cassette can hold K distinct completions for
//! K identical prompts.

pub mod cassette;
pub mod http;
pub mod retry;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cassette::{Cassette, CassetteEntry, RecordingProvider, ReplayProvider};
pub use http::HttpProvider;
pub use retry::RetryingProvider;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub model: String,
    pub sampling: BTreeMap<String, serde_json::Value>,
    /// Sample index of the candidate issuing the request.
    pub salt: u64,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>, salt: u64) -> Self {
        ChatRequest { messages, model: model.into(), sampling: BTreeMap::new(), salt }
    }

    pub fn with_sampling(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.sampling.insert(key.to_string(), value.into());
        self
    }

    /// Hex SHA-256 over the canonical JSON form of (messages, model, sampling, salt).
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            messages: &'a [Message],
            model: &'a str,
            sampling: &'a BTreeMap<String, serde_json::Value>,
            salt: u64,
        }
        let bytes = serde_json::to_vec(&Canonical {
            messages: &self.messages,
            model: &self.model,
            sampling: &self.sampling,
            salt: self.salt,
        })
        .expect("request serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<Usage>,
    pub latency_ms: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("replay-miss: no cassette entry for digest {0}")]
    ReplayMiss(String),
    #[error("cassette line {line}: {message}")]
    CassetteFormat { line: usize, message: String },
    #[error("cassette write failed: {0}")]
    CassetteWrite(String),
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<LlmError> },
}

impl LlmError {
    /// Whether retrying the same request might succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    /// Errors that must abort a run rather than a single trajectory.
    pub fn is_fatal(&self) -> bool {
        matches!(self, LlmError::CassetteWrite(_) | LlmError::Config(_))
    }
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;

    /// Reports a fatal condition (e.g. a broken cassette writer) noticed
    /// while serving earlier requests.
    fn health(&self) -> Result<(), LlmError> {
        Ok(())
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for std::sync::Arc<P> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).chat(request)
    }
    fn health(&self) -> Result<(), LlmError> {
        (**self).health()
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Box<P> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).chat(request)
    }
    fn health(&self) -> Result<(), LlmError> {
        (**self).health()
    }
}

/// Provider backed by a closure; used for scripted demos and tests.
pub struct FnProvider<F>(pub F);

impl<F> ChatProvider for FnProvider<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, LlmError> + Send + Sync,
{
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (self.0)(request)
    }
}

pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> u64;
    /// Stable identity, used to key cached counts.
    fn id(&self) -> String;
}

/// ceil(bytes / 4).
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteHeuristic;

impl TokenCounter for ByteHeuristic {
    fn count(&self, text: &str) -> u64 {
        (text.len() as u64).div_ceil(4)
    }
    fn id(&self) -> String {
        "bytes-div-4".into()
    }
}

/// Provider-reported completion tokens take precedence over the counter.
pub fn count_tokens(counter: &dyn TokenCounter, text: &str, usage: Option<&Usage>) -> u64 {
    match usage {
        Some(u) => u.completion_tokens,
        None => counter.count(text),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counting() {
        assert_eq!(count_tokens(&ByteHeuristic, "", None), 0);
        assert_eq!(count_tokens(&ByteHeuristic, &"x".repeat(400), None), 100);
        assert_eq!(count_tokens(&ByteHeuristic, &"x".repeat(401), None), 101);
        let usage = Usage { prompt_tokens: 9, completion_tokens: 137 };
        assert_eq!(count_tokens(&ByteHeuristic, &"x".repeat(4000), Some(&usage)), 137);
    }

    #[test]
    fn digest_ignores_sampling_insertion_order() {
        let msgs = vec![Message::user("hi")];
        let a = ChatRequest::new("m", msgs.clone(), 0)
            .with_sampling("temperature", 0.7)
            .with_sampling("max_tokens", 10);
        let b = ChatRequest::new("m", msgs, 0)
            .with_sampling("max_tokens", 10)
            .with_sampling("temperature", 0.7);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn digest_depends_on_salt_and_content() {
        let msgs = vec![Message::user("hi")];
        let a = ChatRequest::new("m", msgs.clone(), 1);
        let b = ChatRequest::new("m", msgs.clone(), 2);
        let c = ChatRequest::new("m2", msgs, 1);
        assert_ne!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest(), a.clone().digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn transient_classification() {
        assert!(LlmError::Transport("x".into()).is_transient());
        assert!(LlmError::Http { status: 503, body: String::new() }.is_transient());
        assert!(LlmError::Http { status: 429, body: String::new() }.is_transient());
        assert!(!LlmError::Http { status: 400, body: String::new() }.is_transient());
        assert!(!LlmError::ReplayMiss("d".into()).is_transient());
    }
}
