//! Client for an out-of-process interpreter worker.
//!
//! The worker is started once per trajectory with resource ceilings applied
//! before `exec`. Each request is one JSON line on the worker's stdin; each
//! reply is one JSON line on its stdout. The worker is expected to interrupt
//! over-budget cells itself; if it stays silent for `timeout + grace`, the
//! engine kills it, starts a fresh one, re-binds the session context, and
//! reports the cell as `killed`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

use super::{
    enforce_truncation, ContextRef, ReplyStatus, Sandbox, SandboxError, SandboxFactory, SubcallHandler,
    SubcallRequest, WorkerMessage, WorkerOp, WorkerReply,
};

pub const ENV_TRUNCATION: &str = "SRLM_OUTPUT_TRUNCATION_CHARS";
pub const ENV_NO_NETWORK: &str = "SRLM_SANDBOX_NO_NETWORK";

#[derive(Debug, Clone)]
pub struct WorkerCommand {
    pub program: String,
    pub args: Vec<String>,
    /// Address-space ceiling for the worker, in bytes.
    pub memory_limit_bytes: Option<u64>,
    pub truncation_chars: usize,
    pub allow_network: bool,
    /// Extra wait past a cell's budget before the worker is killed.
    pub kill_grace: Duration,
    /// Budget for `init` and `shutdown` replies.
    pub control_timeout: Duration,
}

impl WorkerCommand {
    /// Splits a shell-like command line on whitespace.
    pub fn parse(command_line: &str, truncation_chars: usize) -> Option<Self> {
        let mut parts = command_line.split_whitespace().map(str::to_string);
        let program = parts.next()?;
        Some(WorkerCommand {
            program,
            args: parts.collect(),
            memory_limit_bytes: Some(8 << 30),
            truncation_chars,
            allow_network: false,
            kill_grace: Duration::from_secs(2),
            control_timeout: Duration::from_secs(120),
        })
    }
}

enum Line {
    Json(Value),
    Eof,
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<Line>,
}

impl Worker {
    fn start(cmd: &WorkerCommand) -> Result<Self, SandboxError> {
        let mut command = Command::new(&cmd.program);
        command
            .args(&cmd.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .env(ENV_TRUNCATION, cmd.truncation_chars.to_string());
        if !cmd.allow_network {
            command.env(ENV_NO_NETWORK, "1");
        }
        #[cfg(unix)]
        if let Some(limit) = cmd.memory_limit_bytes {
            use std::os::unix::process::CommandExt;
            // SAFETY: setrlimit is async-signal-safe and touches no Rust state.
            unsafe {
                command.pre_exec(move || {
                    let rl = libc::rlimit { rlim_cur: limit as libc::rlim_t, rlim_max: limit as libc::rlim_t };
                    if libc::setrlimit(libc::RLIMIT_AS, &rl) != 0 {
                        return Err(std::io::Error::last_os_error());
                    }
                    Ok(())
                });
            }
        }
        let mut child = command.spawn().map_err(|e| SandboxError::Spawn(format!("{}: {e}", cmd.program)))?;
        let stdin = child.stdin.take().ok_or_else(|| SandboxError::Spawn("no stdin".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| SandboxError::Spawn("no stdout".into()))?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Value>(&line) {
                    Ok(v) => {
                        if tx.send(Line::Json(v)).is_err() {
                            return;
                        }
                    }
                    Err(e) => log::warn!("worker emitted a non-protocol line ({e}): {line:.200}"),
                }
            }
            let _ = tx.send(Line::Eof);
        });
        Ok(Worker { child, stdin, lines: rx })
    }

    fn send(&mut self, msg: &WorkerMessage) -> Result<(), SandboxError> {
        let mut line = serde_json::to_string(msg).expect("message serializes");
        line.push('\n');
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| SandboxError::Io(e.to_string()))
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.kill();
    }
}

enum Wait {
    Reply(WorkerReply),
    Deadline,
}

pub struct ProcessSandbox {
    command: WorkerCommand,
    worker: Worker,
    /// Context of every live session, kept for re-binding after a kill.
    contexts: HashMap<String, ContextRef>,
}

impl ProcessSandbox {
    pub fn start(command: WorkerCommand) -> Result<Self, SandboxError> {
        let worker = Worker::start(&command)?;
        Ok(ProcessSandbox { command, worker, contexts: HashMap::new() })
    }

    fn wait_reply(
        &mut self,
        session_id: &str,
        deadline: Instant,
        subcalls: &mut dyn SubcallHandler,
    ) -> Result<Wait, SandboxError> {
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Ok(Wait::Deadline);
            }
            let line = match self.worker.lines.recv_timeout(deadline - now) {
                Ok(Line::Json(v)) => v,
                Ok(Line::Eof) | Err(RecvTimeoutError::Disconnected) => return Err(SandboxError::Exited),
                Err(RecvTimeoutError::Timeout) => return Ok(Wait::Deadline),
            };
            if line.get("op").and_then(Value::as_str) == Some("subcall") {
                let request: SubcallRequest = serde_json::from_value(line.clone())
                    .map_err(|e| SandboxError::Protocol(format!("bad subcall: {e}")))?;
                let text = subcalls.subcall(request);
                self.worker.send(&WorkerMessage {
                    op: WorkerOp::SubcallResult,
                    session_id: session_id.to_string(),
                    code: None,
                    context_ref: None,
                    timeout_ms: None,
                    text: Some(text),
                })?;
                continue;
            }
            let mut reply: WorkerReply = serde_json::from_value(line)
                .map_err(|e| SandboxError::Protocol(format!("bad reply: {e}")))?;
            if reply.session_id != session_id {
                return Err(SandboxError::Protocol(format!(
                    "reply for session {} while waiting on {session_id}",
                    reply.session_id
                )));
            }
            enforce_truncation(&mut reply, self.command.truncation_chars);
            return Ok(Wait::Reply(reply));
        }
    }

    fn control(&mut self, msg: WorkerMessage) -> Result<WorkerReply, SandboxError> {
        let session_id = msg.session_id.clone();
        self.worker.send(&msg)?;
        let deadline = Instant::now() + self.command.control_timeout;
        match self.wait_reply(&session_id, deadline, &mut super::RejectSubcalls)? {
            Wait::Reply(r) => Ok(r),
            Wait::Deadline => Err(SandboxError::Protocol(format!("no reply to {:?} in time", msg.op))),
        }
    }

    fn restart(&mut self) -> Result<(), SandboxError> {
        self.worker.kill();
        self.worker = Worker::start(&self.command)?;
        let contexts: Vec<(String, ContextRef)> = self.contexts.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (sid, ctx) in contexts {
            let reply = self.control(init_message(&sid, ctx))?;
            if reply.status != ReplyStatus::Ok {
                log::warn!("re-binding context for session {sid} failed: {}", reply.stderr);
            }
        }
        Ok(())
    }
}

fn init_message(session_id: &str, context: ContextRef) -> WorkerMessage {
    WorkerMessage {
        op: WorkerOp::Init,
        session_id: session_id.to_string(),
        code: None,
        context_ref: Some(context),
        timeout_ms: None,
        text: None,
    }
}

impl Sandbox for ProcessSandbox {
    fn init(&mut self, session_id: &str, context: &ContextRef) -> Result<WorkerReply, SandboxError> {
        let reply = self.control(init_message(session_id, context.clone()))?;
        if reply.status == ReplyStatus::Ok {
            self.contexts.insert(session_id.to_string(), context.clone());
        }
        Ok(reply)
    }

    fn exec(
        &mut self,
        session_id: &str,
        code: &str,
        timeout_ms: u64,
        subcalls: &mut dyn SubcallHandler,
    ) -> Result<WorkerReply, SandboxError> {
        let started = Instant::now();
        self.worker.send(&WorkerMessage {
            op: WorkerOp::Exec,
            session_id: session_id.to_string(),
            code: Some(code.to_string()),
            context_ref: None,
            timeout_ms: Some(timeout_ms),
            text: None,
        })?;
        let deadline = started + Duration::from_millis(timeout_ms) + self.command.kill_grace;
        match self.wait_reply(session_id, deadline, subcalls)? {
            Wait::Reply(mut reply) => {
                if reply.status == ReplyStatus::Timeout {
                    reply.duration_ms = reply.duration_ms.max(timeout_ms);
                }
                Ok(reply)
            }
            Wait::Deadline => {
                log::warn!("worker ignored the {timeout_ms} ms budget; killing it");
                self.restart()?;
                let mut reply = WorkerReply::error(
                    session_id,
                    format!("TimeoutError: cell exceeded {timeout_ms} ms; worker was killed and restarted, previous state lost"),
                );
                reply.status = ReplyStatus::Timeout;
                reply.duration_ms = started.elapsed().as_millis() as u64;
                Ok(reply)
            }
        }
    }

    fn shutdown(&mut self, session_id: &str) -> Result<WorkerReply, SandboxError> {
        let reply = self.control(WorkerMessage {
            op: WorkerOp::Shutdown,
            session_id: session_id.to_string(),
            code: None,
            context_ref: None,
            timeout_ms: None,
            text: None,
        })?;
        self.contexts.remove(session_id);
        Ok(reply)
    }
}

/// Starts one worker process per spawned sandbox.
pub struct ProcessSandboxFactory {
    pub command: WorkerCommand,
}

impl SandboxFactory for ProcessSandboxFactory {
    fn spawn(&self) -> Result<Box<dyn Sandbox>, SandboxError> {
        Ok(Box::new(ProcessSandbox::start(self.command.clone())?))
    }
}
