use std::thread;
use std::time::Duration;

use super::{ChatProvider, ChatRequest, ChatResponse, LlmError};

/// Retries transient failures with exponential backoff.
pub struct RetryingProvider<P> {
    inner: P,
    max_retries: u32,
    backoff: Duration,
}

impl<P: ChatProvider> RetryingProvider<P> {
    pub fn new(inner: P, max_retries: u32, backoff: Duration) -> Self {
        RetryingProvider { inner, max_retries, backoff }
    }
}

impl<P: ChatProvider> ChatProvider for RetryingProvider<P> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let mut attempt = 0u32;
        loop {
            match self.inner.chat(request) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_transient() && attempt < self.max_retries => {
                    let wait = self.backoff.saturating_mul(1u32 << attempt.min(16));
                    log::warn!("transient provider error (attempt {}): {e}; retrying in {wait:?}", attempt + 1);
                    thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) if e.is_transient() => {
                    return Err(LlmError::RetriesExhausted { attempts: attempt + 1, last: Box::new(e) })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn health(&self) -> Result<(), LlmError> {
        self.inner.health()
    }
}
