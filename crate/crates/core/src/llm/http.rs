//! OpenAI-compatible `/chat/completions` client.
//!
//! Endpoint and credentials come from `SRLM_API_BASE` and `SRLM_API_KEY`.

use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{ChatProvider, ChatRequest, ChatResponse, LlmError, Usage};

pub const ENV_API_BASE: &str = "SRLM_API_BASE";
pub const ENV_API_KEY: &str = "SRLM_API_KEY";
const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

pub struct HttpProvider {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpProvider { agent, base_url: base_url.into(), api_key }
    }

    pub fn from_env(timeout: Duration) -> Self {
        let base = std::env::var(ENV_API_BASE).unwrap_or_else(|_| DEFAULT_API_BASE.to_string());
        let key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Self::new(base, key, timeout)
    }

    pub(crate) fn request_body(request: &ChatRequest) -> Value {
        let mut body = json!({
            "model": request.model,
            "messages": request.messages,
        });
        let obj = body.as_object_mut().unwrap();
        for (k, v) in &request.sampling {
            obj.insert(k.clone(), v.clone());
        }
        body
    }

    pub(crate) fn parse_body(body: &Value) -> Result<(String, Option<Usage>), LlmError> {
        let text = body
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::Malformed("missing choices[0].message.content".into()))?
            .to_string();
        let usage = body.get("usage").and_then(|u| {
            Some(Usage {
                prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
                completion_tokens: u.get("completion_tokens")?.as_u64()?,
            })
        });
        Ok((text, usage))
    }
}

impl ChatProvider for HttpProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let started = Instant::now();
        let mut call = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(Self::request_body(request))
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(LlmError::Http { status, body: body.chars().take(2000).collect() });
        }
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Malformed(e.to_string()))?;
        let (text, usage) = Self::parse_body(&body)?;
        Ok(ChatResponse { text, usage, latency_ms: started.elapsed().as_millis() as u64 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Message;

    #[test]
    fn body_carries_sampling_fields() {
        let r = ChatRequest::new("gpt", vec![Message::system("s"), Message::user("u")], 3)
            .with_sampling("temperature", 0.5);
        let body = HttpProvider::request_body(&r);
        assert_eq!(body["model"], "gpt");
        assert_eq!(body["temperature"], 0.5);
        assert_eq!(body["messages"][1]["role"], "user");
        assert!(body.get("salt").is_none());
    }

    #[test]
    fn parses_completion_and_usage() {
        let body = json!({
            "choices": [{"message": {"role": "assistant", "content": "hello"}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 34}
        });
        let (text, usage) = HttpProvider::parse_body(&body).unwrap();
        assert_eq!(text, "hello");
        assert_eq!(usage, Some(Usage { prompt_tokens: 12, completion_tokens: 34 }));
        assert!(HttpProvider::parse_body(&json!({"choices": []})).is_err());
    }
}
