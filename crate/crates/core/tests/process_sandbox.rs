//! The process-sandbox client against a small Python worker. Skipped when
//! `python3` is not on PATH.

use std::path::Path;
use std::process::Command;
use std::time::Duration;

use srlm::domain::ExecStatus;
use srlm::sandbox::conformance::{run_suite, SuiteOptions};
use srlm::sandbox::process::WorkerCommand;
use srlm::sandbox::{ContextRef, ProcessSandboxFactory, RejectSubcalls, ReplyStatus, SandboxFactory};

fn worker(truncation_chars: usize) -> Option<ProcessSandboxFactory> {
    if Command::new("python3").arg("--version").output().is_err() {
        eprintln!("python3 not found; skipping");
        return None;
    }
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mini_worker.py");
    let mut command = WorkerCommand::parse(&format!("python3 -u {}", script.display()), truncation_chars)?;
    command.kill_grace = Duration::from_millis(500);
    Some(ProcessSandboxFactory { command })
}

#[test]
fn worker_passes_conformance_suite() {
    let Some(factory) = worker(10_000) else { return };
    let outcomes = run_suite(&factory, &SuiteOptions { truncation_chars: 10_000, timeout_ms: 500 });
    assert_eq!(outcomes.len(), 12);
    for o in &outcomes {
        assert!(o.passed, "{}: {}", o.name, o.detail);
    }
}

#[test]
fn unresponsive_worker_is_killed_and_rebound() {
    let Some(factory) = worker(10_000) else { return };
    let mut sb = factory.spawn().unwrap();
    sb.init("s", &ContextRef::Inline { text: "abc".into() }).unwrap();
    sb.exec("s", "x = 1", 1_000, &mut RejectSubcalls).unwrap();
    // ignore the interrupt so only the engine's kill can stop it
    let code = "import signal\nsignal.signal(signal.SIGALRM, signal.SIG_IGN)\nwhile True: pass";
    let r = sb.exec("s", code, 200, &mut RejectSubcalls).unwrap();
    assert_eq!(r.status, ReplyStatus::Timeout);
    assert!(r.stderr.contains("killed"), "{}", r.stderr);
    assert_eq!(r.clone().into_exec_result().status, ExecStatus::Timeout);
    // context survives the restart, cell state does not
    let r = sb.exec("s", "print(len(context))", 1_000, &mut RejectSubcalls).unwrap();
    assert_eq!(r.stdout, "3\n");
    let r = sb.exec("s", "print(x)", 1_000, &mut RejectSubcalls).unwrap();
    assert_eq!(r.status, ReplyStatus::Error);
}

#[test]
fn documents_context_binds_as_list() {
    let Some(factory) = worker(10_000) else { return };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("docs.json");
    std::fs::write(&path, r#"[{"id":"a","text":"one"},{"id":"b","text":"two"}]"#).unwrap();
    let mut sb = factory.spawn().unwrap();
    let ctx = ContextRef::Path { path, format: srlm::sandbox::ContextFormat::DocumentsJson };
    assert_eq!(sb.init("d", &ctx).unwrap().status, ReplyStatus::Ok);
    let r = sb.exec("d", "print(len(context), context[1])", 1_000, &mut RejectSubcalls).unwrap();
    assert_eq!(r.stdout, "2 two\n");
}
