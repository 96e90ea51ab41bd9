//! Prompt templates. The texts live in `assets/` and are versioned together.

use crate::config::RunConfig;
use crate::domain::{ContextPayload, ExecResult, ExecStatus, TaskInstance};
use crate::llm::Message;

pub const PROMPT_VERSION: u32 = 1;

/// Appended verbatim after every prompt that precedes a generation.
pub const CONFIDENCE_SUFFIX: &str = include_str!("../../assets/confidence_suffix.txt");
pub const REPL_PREAMBLE: &str = include_str!("../../assets/repl_preamble.txt");
pub const SUBCALL_TOOL: &str = include_str!("../../assets/subcall_tool.txt");
pub const BASE_INSTRUCTIONS: &str = include_str!("../../assets/base_instructions.txt");

pub const FINAL_ANSWER_MARKER: &str = "FINAL ANSWER:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system_preamble: String,
    pub confidence_suffix: String,
    pub subcall_tool_description: Option<String>,
}

impl PromptTemplate {
    pub fn for_config(config: &RunConfig) -> Self {
        PromptTemplate {
            system_preamble: REPL_PREAMBLE.to_string(),
            confidence_suffix: CONFIDENCE_SUFFIX.to_string(),
            subcall_tool_description: config.recursion_enabled.then(|| SUBCALL_TOOL.to_string()),
        }
    }

    fn system_message(&self) -> String {
        match &self.subcall_tool_description {
            Some(tool) => format!("{}\n{}", self.system_preamble, tool),
            None => self.system_preamble.clone(),
        }
    }

    /// Appends the confidence instruction as the final block of `body`.
    pub fn with_suffix(&self, body: &str) -> String {
        format!("{}\n\n{}", body.trim_end(), self.confidence_suffix)
    }
}

/// One line describing the shape and size of the context variable.
pub fn context_metadata(task: &TaskInstance) -> String {
    let ctx = &task.context;
    let shape = match &ctx.payload {
        ContextPayload::Text(t) => format!("a string of {} characters", t.chars().count()),
        ContextPayload::Documents(d) => format!("a list of {} document strings", d.len()),
    };
    format!(
        "Context metadata: `context` is {shape}, about {} tokens in total.",
        ctx.token_count
    )
}

/// System and user messages that open a trajectory. The context itself is
/// not included, only its metadata.
pub fn build_root_prompt(task: &TaskInstance, config: &RunConfig) -> Vec<Message> {
    let template = PromptTemplate::for_config(config);
    let user = format!("{}\n\nQuery: {}", context_metadata(task), task.query.trim());
    vec![Message::system(template.system_message()), Message::user(template.with_suffix(&user))]
}

/// Single-turn prompt with the whole context inlined, for the base-model method.
pub fn build_base_prompt(task: &TaskInstance) -> Vec<Message> {
    let user = format!(
        "Context:\n{}\n\nQuery: {}",
        task.context.payload.render_inline(),
        task.query.trim()
    );
    vec![Message::system(BASE_INSTRUCTIONS), Message::user(user)]
}

fn status_label(status: ExecStatus) -> &'static str {
    match status {
        ExecStatus::Ok => "ok",
        ExecStatus::Error => "error",
        ExecStatus::Timeout => "timeout",
        ExecStatus::Killed => "killed",
    }
}

/// Observation message fed back after a step's cells ran.
pub fn render_observation(results: &[ExecResult], truncation_chars: usize) -> String {
    let mut out = String::new();
    let n = results.len();
    for (i, r) in results.iter().enumerate() {
        out.push_str(&format!(
            "[cell {} of {n}] status: {} ({} ms)\n",
            i + 1,
            status_label(r.status),
            r.duration_ms
        ));
        if !r.stdout.is_empty() {
            out.push_str("stdout:\n");
            out.push_str(&r.stdout);
            if !r.stdout.ends_with('\n') {
                out.push('\n');
            }
        }
        if !r.stderr.is_empty() {
            out.push_str("stderr:\n");
            out.push_str(&r.stderr);
            if !r.stderr.ends_with('\n') {
                out.push('\n');
            }
        }
        if r.stdout.is_empty() && r.stderr.is_empty() {
            out.push_str("(no output)\n");
        }
        if r.truncated {
            out.push_str(&format!("[output truncated to {truncation_chars} characters]\n"));
        }
    }
    out
}

pub fn render_no_code_nudge() -> String {
    format!(
        "No code block was found in your last message. Write a ```python block to inspect `context`, \
         or give your answer on a line starting with {FINAL_ANSWER_MARKER}"
    )
}
