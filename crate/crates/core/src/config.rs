//! Run configuration: defaults, TOML loading and range checks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::EqualityMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    #[default]
    ArgmaxJoint,
    ArgminJoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub k_samples: u32,
    pub max_steps: u32,
    pub step_time_budget_ms: u64,
    pub generation_token_cap: u64,
    pub recursion_enabled: bool,
    pub output_truncation_chars: usize,
    pub selection_rule: SelectionRule,
    pub consistency_equality: EqualityMode,
    pub provider: String,
    pub model: String,
    pub subcall_model: String,
    pub judge_model: String,
    pub seed: u64,
    pub temperature: f64,
    pub max_output_tokens: u64,
    /// Effective context window of the root model, in tokens.
    pub window_limit: u64,
    /// Confidence assigned to every step when a trajectory reports none.
    pub neutral_confidence: f64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub judge_budget_ms: u64,
    /// Per-task deadline; 0 means `max_steps * step_time_budget_ms + judge_budget_ms`.
    pub task_deadline_ms: u64,
    pub task_workers: usize,
    /// Grade every distinct candidate answer so ablations can be recomputed offline.
    pub grade_candidates: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k_samples: 8,
            max_steps: 30,
            step_time_budget_ms: 600_000,
            generation_token_cap: 260_000,
            recursion_enabled: true,
            output_truncation_chars: 10_000,
            selection_rule: SelectionRule::ArgmaxJoint,
            consistency_equality: EqualityMode::Normalized,
            provider: "openai-compatible".into(),
            model: "gpt-5".into(),
            subcall_model: "gpt-5-mini".into(),
            judge_model: "gpt-5-mini".into(),
            seed: 0,
            temperature: 1.0,
            max_output_tokens: 32_768,
            window_limit: 272_000,
            neutral_confidence: 50.0,
            max_retries: 3,
            retry_backoff_ms: 500,
            judge_budget_ms: 600_000,
            task_deadline_ms: 0,
            task_workers: 4,
            grade_candidates: true,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "k_samples",
    "max_steps",
    "step_time_budget_ms",
    "generation_token_cap",
    "recursion_enabled",
    "output_truncation_chars",
    "selection_rule",
    "consistency_equality",
    "provider",
    "model",
    "subcall_model",
    "judge_model",
    "seed",
    "temperature",
    "max_output_tokens",
    "window_limit",
    "neutral_confidence",
    "max_retries",
    "retry_backoff_ms",
    "judge_budget_ms",
    "task_deadline_ms",
    "task_workers",
    "grade_candidates",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config is not valid TOML: {0}")]
    Parse(String),
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("config value out of range: {0}")]
    OutOfRange(String),
}

impl RunConfig {
    /// Worst-case wall clock for one task.
    pub fn task_deadline_ms(&self) -> u64 {
        if self.task_deadline_ms > 0 {
            self.task_deadline_ms
        } else {
            u64::from(self.max_steps)
                .saturating_mul(self.step_time_budget_ms)
                .saturating_add(self.judge_budget_ms)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut unknown: Vec<String> = table
            .keys()
            .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            unknown.sort();
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let bad = |what: &str| Err(ConfigError::OutOfRange(what.to_string()));
        if self.k_samples == 0 {
            return bad("k_samples must be >= 1");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1");
        }
        if self.step_time_budget_ms == 0 {
            return bad("step_time_budget_ms must be > 0");
        }
        if self.generation_token_cap == 0 {
            return bad("generation_token_cap must be > 0");
        }
        if self.output_truncation_chars == 0 {
            return bad("output_truncation_chars must be > 0");
        }
        if self.max_output_tokens == 0 || self.window_limit == 0 {
            return bad("max_output_tokens and window_limit must be > 0");
        }
        if self.judge_budget_ms == 0 {
            return bad("judge_budget_ms must be > 0");
        }
        if self.task_workers == 0 {
            return bad("task_workers must be >= 1");
        }
        if !(self.neutral_confidence > 0.0 && self.neutral_confidence <= 100.0) {
            return bad("neutral_confidence must lie in (0, 100]");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be a finite non-negative number");
        }
        Ok(())
    }
}

/// Loads a config file, filling absent fields with the defaults.
pub fn validate_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RunConfig::from_toml_str(&text)
}
