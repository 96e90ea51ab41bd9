//! Drives one trajectory: chat, run the emitted cells, feed the output back,
//! until the model commits to an answer or a budget runs out.

pub mod parse;
pub mod prompt;

use std::time::Instant;

use crate::config::RunConfig;
use crate::domain::{ExecResult, ExecStatus, TaskInstance, TerminatedBy, Trajectory, TrajectoryStep};
use crate::llm::{count_tokens, ChatProvider, ChatRequest, Message, TokenCounter};
use crate::sandbox::{ContextRef, Sandbox, SandboxFactory, SubcallHandler, SubcallRequest};

pub use parse::{extract_code_cells, extract_final_answer, parse_step_confidence, CodeCells, FinalAnswer};
pub use prompt::{build_base_prompt, build_root_prompt, PromptTemplate, CONFIDENCE_SUFFIX, PROMPT_VERSION};

pub const SUBCALLS_DISABLED: &str = "subcalls-disabled";
pub const RECURSION_DEPTH_EXCEEDED: &str = "recursion-depth-exceeded";

pub const FLAG_UNTERMINATED_FENCE: &str = "unterminated-fence";
pub const FLAG_MULTIPLE_MARKERS: &str = "multiple-final-answer-markers";
pub const FLAG_CELLS_SKIPPED: &str = "cells-skipped-after-final-answer";
pub const FLAG_NO_CODE: &str = "no-code-no-answer";

/// How step durations are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Timing {
    /// Real elapsed time.
    #[default]
    Wall,
    /// Provider-reported latency plus sandbox-reported execution time. Used
    /// in replay so result files do not depend on the host's speed.
    Virtual,
}

/// Everything a trajectory needs from the outside world.
#[derive(Clone, Copy)]
pub struct TrajectoryEnv<'a> {
    pub provider: &'a dyn ChatProvider,
    pub sandboxes: &'a dyn SandboxFactory,
    pub counter: &'a dyn TokenCounter,
    pub timing: Timing,
    /// Abandon the trajectory once this much time (on the `timing` clock) is spent.
    pub deadline_ms: Option<u64>,
}

/// Sampling parameters sent with every root-model request.
pub fn root_request(config: &RunConfig, messages: Vec<Message>, k: u32) -> ChatRequest {
    ChatRequest::new(config.model.clone(), messages, k as u64)
        .with_sampling("temperature", config.temperature)
        .with_sampling("max_output_tokens", config.max_output_tokens)
        .with_sampling("seed", config.seed)
}

/// Answers depth-one `llm_query` calls from running cells and tallies their cost.
pub struct SubcallRouter<'a> {
    provider: &'a dyn ChatProvider,
    counter: &'a dyn TokenCounter,
    config: &'a RunConfig,
    k: u32,
    pub tokens: u64,
    pub latency_ms: u64,
    pub calls: u32,
}

impl<'a> SubcallRouter<'a> {
    pub fn new(provider: &'a dyn ChatProvider, counter: &'a dyn TokenCounter, config: &'a RunConfig, k: u32) -> Self {
        SubcallRouter { provider, counter, config, k, tokens: 0, latency_ms: 0, calls: 0 }
    }
}

impl SubcallHandler for SubcallRouter<'_> {
    fn subcall(&mut self, request: SubcallRequest) -> String {
        handle_subcall(self, request)
    }
}

/// Runs one sub-model query on behalf of a cell.
pub fn handle_subcall(router: &mut SubcallRouter<'_>, request: SubcallRequest) -> String {
    if !router.config.recursion_enabled {
        return SUBCALLS_DISABLED.to_string();
    }
    if request.depth > 0 {
        return RECURSION_DEPTH_EXCEEDED.to_string();
    }
    let content = if request.slice.is_empty() {
        request.prompt
    } else {
        format!("{}\n\n{}", request.prompt, request.slice)
    };
    let req = ChatRequest::new(router.config.subcall_model.clone(), vec![Message::user(content)], router.k as u64)
        .with_sampling("temperature", router.config.temperature)
        .with_sampling("max_output_tokens", router.config.max_output_tokens)
        .with_sampling("seed", router.config.seed);
    router.calls += 1;
    match router.provider.chat(&req) {
        Ok(resp) => {
            router.tokens += count_tokens(router.counter, &resp.text, resp.usage.as_ref());
            router.latency_ms += resp.latency_ms;
            resp.text
        }
        Err(e) => format!("subcall-error: {e}"),
    }
}

fn merge_results(results: &[ExecResult]) -> Option<ExecResult> {
    let (first, rest) = results.split_first()?;
    let mut merged = first.clone();
    for r in rest {
        merged.stdout.push_str(&r.stdout);
        merged.stderr.push_str(&r.stderr);
        merged.truncated |= r.truncated;
        merged.duration_ms += r.duration_ms;
        merged.status = merged.status.worst(r.status);
    }
    Some(merged)
}

struct Clock {
    timing: Timing,
    started: Instant,
    virtual_ms: u64,
}

impl Clock {
    fn elapsed_ms(&self) -> u64 {
        match self.timing {
            Timing::Wall => self.started.elapsed().as_millis() as u64,
            Timing::Virtual => self.virtual_ms,
        }
    }
}

/// Runs the cells of one step under a shared budget.
fn run_cells(
    sandbox: &mut dyn Sandbox,
    session_id: &str,
    cells: &[String],
    budget_ms: u64,
    router: &mut SubcallRouter<'_>,
) -> Result<Vec<ExecResult>, String> {
    let started = Instant::now();
    let mut used_ms = 0u64;
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let remaining = budget_ms.saturating_sub(used_ms.max(started.elapsed().as_millis() as u64));
        if remaining == 0 {
            results.push(ExecResult {
                stdout: String::new(),
                stderr: "TimeoutError: step budget exhausted before this cell ran\n".into(),
                truncated: false,
                duration_ms: 0,
                status: ExecStatus::Timeout,
            });
            continue;
        }
        let reply = sandbox
            .exec(session_id, cell, remaining, router)
            .map_err(|e| format!("sandbox: {e}"))?;
        used_ms += reply.duration_ms;
        results.push(reply.into_exec_result());
    }
    Ok(results)
}

/// Runs sample `k` of `task` to completion. Failures are reported through
/// `terminated_by` and `error`, never as `Err`.
pub fn run_trajectory(
    task: &TaskInstance,
    context: &ContextRef,
    config: &RunConfig,
    k: u32,
    env: TrajectoryEnv<'_>,
) -> Trajectory {
    let mut trajectory =
        Trajectory { k, steps: Vec::new(), final_answer: None, terminated_by: TerminatedBy::StepLimit, error: None };
    let session_id = format!("{}#{k}", task.id);

    let mut sandbox = match env.sandboxes.spawn() {
        Ok(sb) => sb,
        Err(e) => {
            trajectory.terminated_by = TerminatedBy::ProviderError;
            trajectory.error = Some(format!("sandbox: {e}"));
            return trajectory;
        }
    };
    match sandbox.init(&session_id, context) {
        Ok(reply) if reply.status == crate::sandbox::ReplyStatus::Ok => {}
        Ok(reply) => {
            trajectory.terminated_by = TerminatedBy::ProviderError;
            trajectory.error = Some(format!("sandbox init: {}", reply.stderr.trim()));
            return trajectory;
        }
        Err(e) => {
            trajectory.terminated_by = TerminatedBy::ProviderError;
            trajectory.error = Some(format!("sandbox init: {e}"));
            return trajectory;
        }
    }

    let template = PromptTemplate::for_config(config);
    let mut messages = build_root_prompt(task, config);
    let mut clock = Clock { timing: env.timing, started: Instant::now(), virtual_ms: 0 };
    let mut generated = 0u64;

    trajectory.terminated_by = loop {
        let index = trajectory.steps.len() as u32 + 1;
        if index > config.max_steps {
            break TerminatedBy::StepLimit;
        }
        let step_started = Instant::now();
        let response = match env.provider.chat(&root_request(config, messages.clone(), k)) {
            Ok(r) => r,
            Err(e) => {
                trajectory.error = Some(e.to_string());
                break TerminatedBy::ProviderError;
            }
        };
        let text = response.text;
        let mut step = TrajectoryStep {
            index,
            code_cells: Vec::new(),
            exec_result: None,
            confidence_raw: parse_step_confidence(&text),
            confidence_imputed: false,
            token_count: count_tokens(env.counter, &text, response.usage.as_ref()),
            wall_clock_ms: 0,
            flags: Vec::new(),
            model_text: String::new(),
        };
        step.confidence_imputed = step.confidence_raw.is_none();
        let mut virtual_ms = response.latency_ms;

        let cells = extract_code_cells(&text);
        if cells.unterminated {
            step.flags.push(FLAG_UNTERMINATED_FENCE.into());
        }
        let answer = extract_final_answer(&text);
        let mut failure = None;
        let mut observation = None;

        if let Some(answer) = &answer {
            if answer.multiple_markers {
                step.flags.push(FLAG_MULTIPLE_MARKERS.into());
            }
            if !cells.cells.is_empty() {
                step.flags.push(FLAG_CELLS_SKIPPED.into());
            }
            step.code_cells = cells.cells;
        } else if cells.cells.is_empty() {
            step.flags.push(FLAG_NO_CODE.into());
            observation = Some(template.with_suffix(&prompt::render_no_code_nudge()));
        } else {
            let mut router = SubcallRouter::new(env.provider, env.counter, config, k);
            match run_cells(sandbox.as_mut(), &session_id, &cells.cells, config.step_time_budget_ms, &mut router) {
                Ok(results) => {
                    let body = prompt::render_observation(&results, config.output_truncation_chars);
                    observation = Some(template.with_suffix(&body));
                    step.exec_result = merge_results(&results);
                }
                Err(e) => failure = Some(e),
            }
            step.token_count += router.tokens;
            virtual_ms += router.latency_ms + step.exec_result.as_ref().map_or(0, |r| r.duration_ms);
            step.code_cells = cells.cells;
        }

        step.wall_clock_ms = match env.timing {
            Timing::Wall => step_started.elapsed().as_millis() as u64,
            Timing::Virtual => virtual_ms,
        };
        clock.virtual_ms += virtual_ms;
        generated += step.token_count;
        step.model_text = text;
        trajectory.steps.push(step);

        if let Some(e) = failure {
            trajectory.error = Some(e);
            break TerminatedBy::ProviderError;
        }
        if let Some(answer) = answer {
            trajectory.final_answer = Some(answer.text);
            break TerminatedBy::FinalAnswer;
        }
        if generated >= config.generation_token_cap {
            break TerminatedBy::GenerationCap;
        }
        if env.deadline_ms.is_some_and(|d| clock.elapsed_ms() >= d) {
            break TerminatedBy::TimeLimit;
        }
        if let Some(obs) = observation {
            messages.push(Message::assistant(trajectory.steps.last().unwrap().model_text.clone()));
            messages.push(Message::user(obs));
        }
    };

    if let Err(e) = sandbox.shutdown(&session_id) {
        log::debug!("shutdown of {session_id} failed: {e}");
    }
    trajectory
}
