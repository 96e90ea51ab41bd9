//! Protocol conformance suite for sandbox implementations.
//!
//! Twelve scripted cell sequences covering context binding, statefulness,
//! session isolation, error reporting, timeouts, truncation and framing.
//! The cells stay inside the subset understood by [`super::ScriptedSandbox`],
//! so the same suite runs against it and against a real worker.

use std::io::Write;

use super::{
    ContextFormat, ContextRef, ReplyStatus, RejectSubcalls, SandboxError, SandboxFactory, SubcallHandler,
    SubcallRequest, WorkerReply, ERR_NO_SESSION, ERR_SESSION_EXISTS,
};

#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// Must equal the cap the implementation was started with.
    pub truncation_chars: usize,
    pub timeout_ms: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { truncation_chars: 10_000, timeout_ms: 2_000 }
    }
}

type CaseFn = fn(&dyn SandboxFactory, &SuiteOptions, &Scratch) -> Result<(), String>;

struct Scratch {
    dir: tempfile::TempDir,
}

impl Scratch {
    fn context_file(&self, name: &str, bytes: usize) -> ContextRef {
        let path = self.dir.path().join(name);
        let mut f = std::fs::File::create(&path).expect("scratch file");
        let body: String = (0..bytes).map(|i| (b'a' + (i % 26) as u8) as char).collect();
        f.write_all(body.as_bytes()).expect("scratch write");
        ContextRef::Path { path, format: ContextFormat::Text }
    }
}

fn sb_err(e: SandboxError) -> String {
    e.to_string()
}

fn expect_ok(r: &WorkerReply, what: &str) -> Result<(), String> {
    if r.status == ReplyStatus::Ok {
        Ok(())
    } else {
        Err(format!("{what}: expected ok, got {:?} ({})", r.status, r.stderr))
    }
}

fn expect_stdout(r: &WorkerReply, want: &str) -> Result<(), String> {
    expect_ok(r, "exec")?;
    if r.stdout == want {
        Ok(())
    } else {
        Err(format!("stdout {:?} != {:?}", r.stdout, want))
    }
}

fn context_length(n: usize) -> impl Fn(&dyn SandboxFactory, &SuiteOptions, &Scratch) -> Result<(), String> {
    move |f, o, s| {
        let mut sb = f.spawn().map_err(sb_err)?;
        expect_ok(&sb.init("len", &s.context_file(&format!("ctx{n}"), n)).map_err(sb_err)?, "init")?;
        let r = sb.exec("len", "print(len(context))", o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?;
        expect_stdout(&r, &format!("{n}\n"))
    }
}

fn case_context_small(f: &dyn SandboxFactory, o: &SuiteOptions, s: &Scratch) -> Result<(), String> {
    context_length(10)(f, o, s)
}

fn case_context_large(f: &dyn SandboxFactory, o: &SuiteOptions, s: &Scratch) -> Result<(), String> {
    context_length(1_000_000)(f, o, s)
}

fn case_statefulness(f: &dyn SandboxFactory, o: &SuiteOptions, _: &Scratch) -> Result<(), String> {
    let mut sb = f.spawn().map_err(sb_err)?;
    sb.init("st", &ContextRef::Inline { text: "ctx".into() }).map_err(sb_err)?;
    expect_ok(&sb.exec("st", "x = 1+1", o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?, "assign")?;
    expect_stdout(&sb.exec("st", "print(x)", o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?, "2\n")
}

fn case_chain(f: &dyn SandboxFactory, o: &SuiteOptions, _: &Scratch) -> Result<(), String> {
    let mut sb = f.spawn().map_err(sb_err)?;
    sb.init("ch", &ContextRef::Inline { text: "abcdef".into() }).map_err(sb_err)?;
    for cell in ["a = context[0:2]", "b = a * 2", "c = b + context[-1]"] {
        expect_ok(&sb.exec("ch", cell, o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?, cell)?;
    }
    expect_stdout(&sb.exec("ch", "print(a, b, c)", o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?, "ab abab ababf\n")
}

fn case_isolation(f: &dyn SandboxFactory, o: &SuiteOptions, _: &Scratch) -> Result<(), String> {
    let mut sb = f.spawn().map_err(sb_err)?;
    sb.init("iso-a", &ContextRef::Inline { text: "A".into() }).map_err(sb_err)?;
    sb.init("iso-b", &ContextRef::Inline { text: "B".into() }).map_err(sb_err)?;
    expect_ok(&sb.exec("iso-a", "secret = 42", o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?, "assign")?;
    let r = sb.exec("iso-b", "print(secret)", o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?;
    if r.status != ReplyStatus::Error || !r.stderr.contains("NameError") {
        return Err(format!("session B observed session A's binding: {r:?}"));
    }
    expect_stdout(&sb.exec("iso-b", "print(context)", o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?, "B\n")
}

fn case_error_then_continue(f: &dyn SandboxFactory, o: &SuiteOptions, _: &Scratch) -> Result<(), String> {
    let mut sb = f.spawn().map_err(sb_err)?;
    sb.init("err", &ContextRef::Inline { text: String::new() }).map_err(sb_err)?;
    expect_ok(&sb.exec("err", "y = 5", o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?, "assign")?;
    let r = sb.exec("err", "raise ValueError(\"boom\")", o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?;
    if r.status != ReplyStatus::Error || !r.stderr.contains("ValueError: boom") {
        return Err(format!("expected traceback with ValueError, got {r:?}"));
    }
    expect_stdout(&sb.exec("err", "print(y)", o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?, "5\n")
}

fn case_timeout(f: &dyn SandboxFactory, o: &SuiteOptions, _: &Scratch) -> Result<(), String> {
    let mut sb = f.spawn().map_err(sb_err)?;
    sb.init("to", &ContextRef::Inline { text: String::new() }).map_err(sb_err)?;
    let r = sb.exec("to", "while True: pass", o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?;
    if r.status != ReplyStatus::Timeout {
        return Err(format!("expected timeout, got {:?}", r.status));
    }
    if r.duration_ms < o.timeout_ms {
        return Err(format!("duration {} < budget {}", r.duration_ms, o.timeout_ms));
    }
    Ok(())
}

fn case_truncation(f: &dyn SandboxFactory, o: &SuiteOptions, _: &Scratch) -> Result<(), String> {
    let mut sb = f.spawn().map_err(sb_err)?;
    sb.init("tr", &ContextRef::Inline { text: String::new() }).map_err(sb_err)?;
    let r = sb.exec("tr", "print(\"a\" * 1000000)", o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?;
    expect_ok(&r, "exec")?;
    let n = r.stdout.chars().count();
    if !r.truncated || n != o.truncation_chars {
        return Err(format!("truncated={} len={n}, cap {}", r.truncated, o.truncation_chars));
    }
    Ok(())
}

fn case_framing(f: &dyn SandboxFactory, o: &SuiteOptions, _: &Scratch) -> Result<(), String> {
    let mut sb = f.spawn().map_err(sb_err)?;
    sb.init("fr", &ContextRef::Inline { text: String::new() }).map_err(sb_err)?;
    let r = sb
        .exec("fr", "print(\"line1\\nline2 \\\"q\\\" {}\\t\")", o.timeout_ms, &mut RejectSubcalls)
        .map_err(sb_err)?;
    expect_stdout(&r, "line1\nline2 \"q\" {}\t\n")
}

fn case_session_exists(f: &dyn SandboxFactory, _: &SuiteOptions, _: &Scratch) -> Result<(), String> {
    let mut sb = f.spawn().map_err(sb_err)?;
    let ctx = ContextRef::Inline { text: "x".into() };
    expect_ok(&sb.init("dup", &ctx).map_err(sb_err)?, "first init")?;
    let r = sb.init("dup", &ctx).map_err(sb_err)?;
    if r.status == ReplyStatus::Error && r.stderr.contains(ERR_SESSION_EXISTS) {
        Ok(())
    } else {
        Err(format!("second init: {r:?}"))
    }
}

fn case_shutdown_lifecycle(f: &dyn SandboxFactory, o: &SuiteOptions, _: &Scratch) -> Result<(), String> {
    let mut sb = f.spawn().map_err(sb_err)?;
    sb.init("sd", &ContextRef::Inline { text: "x".into() }).map_err(sb_err)?;
    expect_ok(&sb.shutdown("sd").map_err(sb_err)?, "shutdown")?;
    let r = sb.exec("sd", "print(1)", o.timeout_ms, &mut RejectSubcalls).map_err(sb_err)?;
    if r.status != ReplyStatus::Error || !r.stderr.contains(ERR_NO_SESSION) {
        return Err(format!("exec after shutdown: {r:?}"));
    }
    let r = sb.shutdown("never-opened").map_err(sb_err)?;
    if r.status != ReplyStatus::Error {
        return Err(format!("shutdown of unknown session: {r:?}"));
    }
    Ok(())
}

fn case_subcall(f: &dyn SandboxFactory, o: &SuiteOptions, _: &Scratch) -> Result<(), String> {
    struct Echo(Vec<SubcallRequest>);
    impl SubcallHandler for Echo {
        fn subcall(&mut self, r: SubcallRequest) -> String {
            self.0.push(r);
            "blue".into()
        }
    }
    let mut sb = f.spawn().map_err(sb_err)?;
    sb.init("sc", &ContextRef::Inline { text: "the sky".into() }).map_err(sb_err)?;
    let mut echo = Echo(Vec::new());
    let r = sb
        .exec("sc", "ans = llm_query(\"colour?\", context[4:])\nprint(ans)", o.timeout_ms, &mut echo)
        .map_err(sb_err)?;
    expect_stdout(&r, "blue\n")?;
    match echo.0.as_slice() {
        [req] if req.prompt == "colour?" && req.slice == "sky" && req.depth == 0 => Ok(()),
        other => Err(format!("unexpected sub-call requests {other:?}")),
    }
}

const CASES: &[(&str, CaseFn)] = &[
    ("context-binding-10", case_context_small),
    ("context-binding-1e6", case_context_large),
    ("statefulness", case_statefulness),
    ("exec-chain", case_chain),
    ("session-isolation", case_isolation),
    ("error-then-continue", case_error_then_continue),
    ("timeout", case_timeout),
    ("truncation", case_truncation),
    ("framing", case_framing),
    ("session-exists", case_session_exists),
    ("shutdown-lifecycle", case_shutdown_lifecycle),
    ("subcall-routing", case_subcall),
];

pub fn run_suite(factory: &dyn SandboxFactory, options: &SuiteOptions) -> Vec<CaseOutcome> {
    let scratch = Scratch { dir: tempfile::tempdir().expect("scratch dir") };
    CASES
        .iter()
        .map(|(name, case)| match case(factory, options, &scratch) {
            Ok(()) => CaseOutcome { name, passed: true, detail: String::new() },
            Err(detail) => CaseOutcome { name, passed: false, detail },
        })
        .collect()
}
