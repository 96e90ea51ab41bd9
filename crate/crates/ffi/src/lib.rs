//! C ABI over the srlm scoring and selection primitives.
//!
//! Every entry point returns an [`SrlmStatus`]; on failure the message is
//! available from [`srlm_last_error`] on the same thread. Strings handed out
//! by this library must be released with [`srlm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use srlm::config::{validate_config, SelectionRule};
use srlm::domain::canonicalize_answer;
use srlm::grading::{mcq_score, oolong_numeric_score, parse_numeric_prediction, render_judge_prompt};
use srlm::orchestrator::{extract_final_answer, parse_step_confidence};
use srlm::uncertainty::{joint_score, plurality_select, vc_from_confidences, CandidateView, SelectionError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrlmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NotFound = 4,
    NoAnswers = 5,
    ConfigError = 6,
    Panic = 7,
}

/// Values accepted by [`srlm_candidates_new`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrlmRule {
    ArgmaxJoint = 0,
    ArgminJoint = 1,
}

/// Candidate set for one task. Opaque to C.
pub struct SrlmCandidates {
    rule: SelectionRule,
    views: Vec<CandidateView>,
    answers: Vec<Option<String>>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SrlmStatus, String);

impl Failure {
    fn new(status: SrlmStatus, msg: impl Into<String>) -> Self {
        Failure(status, msg.into())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SrlmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SrlmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SrlmStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(SrlmStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::new(SrlmStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(SrlmStatus::NullPointer, format!("{name} is null")));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure::new(SrlmStatus::InvalidArgument, "result contains a NUL byte"))?;
    write_out(out, c.into_raw(), "out")
}

fn check_out<T>(out: *mut T) -> Result<(), Failure> {
    if out.is_null() {
        Err(Failure::new(SrlmStatus::NullPointer, "out is null"))
    } else {
        Ok(())
    }
}

/// Message for the last failed call on this thread, or NULL after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn srlm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn srlm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srlm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Canonical form of an answer. `SRLM_STATUS_NOT_FOUND` when nothing is
/// left after normalization.
///
/// # Safety
/// `raw` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn srlm_canonicalize_answer(raw: *const c_char, out: *mut *mut c_char) -> SrlmStatus {
    guard(|| {
        let raw = read_str(raw, "raw")?;
        check_out(out)?;
        let c = canonicalize_answer(raw).map_err(|e| Failure::new(SrlmStatus::NotFound, e.to_string()))?;
        write_string(out, c)
    })
}

/// The last confidence report in a completion, clamped into (0, 100].
///
/// # Safety
/// `completion` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn srlm_parse_confidence(completion: *const c_char, out: *mut f64) -> SrlmStatus {
    guard(|| {
        let text = read_str(completion, "completion")?;
        check_out(out)?;
        let v = parse_step_confidence(text).ok_or_else(|| Failure::new(SrlmStatus::NotFound, "no confidence report"))?;
        write_out(out, v, "out")
    })
}

/// Final-answer text from a completion. `multiple_markers` may be NULL.
///
/// # Safety
/// `completion` must be a NUL-terminated string; `out` must be writable;
/// `multiple_markers` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn srlm_extract_final_answer(
    completion: *const c_char,
    out: *mut *mut c_char,
    multiple_markers: *mut bool,
) -> SrlmStatus {
    guard(|| {
        let text = read_str(completion, "completion")?;
        check_out(out)?;
        let fa = extract_final_answer(text).ok_or_else(|| Failure::new(SrlmStatus::NotFound, "no final answer"))?;
        if !multiple_markers.is_null() {
            multiple_markers.write(fa.multiple_markers);
        }
        write_string(out, fa.text)
    })
}

/// Σ ln(ν/100) over `n` step confidences. NaN entries count as missing.
///
/// # Safety
/// `confidences` must point to `n` readable doubles (may be NULL when `n` is
/// 0); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn srlm_verbalized_confidence(
    confidences: *const f64,
    n: usize,
    neutral: f64,
    out: *mut f64,
) -> SrlmStatus {
    guard(|| {
        let values: &[f64] = match (confidences.is_null(), n) {
            (_, 0) => &[],
            (true, _) => return Err(Failure::new(SrlmStatus::NullPointer, "confidences is null")),
            (false, _) => std::slice::from_raw_parts(confidences, n),
        };
        if !(neutral > 0.0 && neutral <= 100.0) {
            return Err(Failure::new(SrlmStatus::InvalidArgument, "neutral must be in (0, 100]"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_nan() && !(**v > 0.0 && **v <= 100.0)) {
            return Err(Failure::new(SrlmStatus::InvalidArgument, format!("confidence {v} outside (0, 100]")));
        }
        let opts: Vec<Option<f64>> = values.iter().map(|v| (!v.is_nan()).then_some(*v)).collect();
        write_out(out, vc_from_confidences(&opts, neutral).0, "out")
    })
}

/// 0.75^|gold − predicted|.
#[no_mangle]
pub extern "C" fn srlm_oolong_numeric_score(gold: f64, predicted: f64) -> f64 {
    oolong_numeric_score(gold, predicted)
}

/// OOLONG partial credit for a free-text prediction against a numeric gold.
/// Predictions with no number score 0.
///
/// # Safety
/// `prediction` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn srlm_oolong_score(prediction: *const c_char, gold: f64, out: *mut f64) -> SrlmStatus {
    guard(|| {
        let text = read_str(prediction, "prediction")?;
        if !gold.is_finite() {
            return Err(Failure::new(SrlmStatus::InvalidArgument, "gold must be finite"));
        }
        let score = parse_numeric_prediction(text).map_or(0.0, |p| oolong_numeric_score(gold, p));
        write_out(out, score, "out")
    })
}

/// 1 or 0 for a multiple-choice prediction against `gold_letter` (A to D).
///
/// # Safety
/// `prediction` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn srlm_mcq_score(prediction: *const c_char, gold_letter: c_char, out: *mut f64) -> SrlmStatus {
    guard(|| {
        let text = read_str(prediction, "prediction")?;
        let letter = (gold_letter as u8 as char).to_ascii_uppercase();
        if !('A'..='D').contains(&letter) {
            return Err(Failure::new(SrlmStatus::InvalidArgument, "gold letter must be A, B, C or D"));
        }
        write_out(out, mcq_score(text, letter).score, "out")
    })
}

/// The judge prompt for one graded response.
///
/// # Safety
/// The three inputs must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn srlm_render_judge_prompt(
    question: *const c_char,
    response: *const c_char,
    correct_answer: *const c_char,
    out: *mut *mut c_char,
) -> SrlmStatus {
    guard(|| {
        let q = read_str(question, "question")?;
        let r = read_str(response, "response")?;
        let g = read_str(correct_answer, "correct_answer")?;
        check_out(out)?;
        let prompt = render_judge_prompt(q, r, g).map_err(|e| Failure::new(SrlmStatus::InvalidArgument, e.to_string()))?;
        write_string(out, prompt)
    })
}

/// Loads a TOML run config and returns the effective config as JSON.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn srlm_config_validate(path: *const c_char, out_json: *mut *mut c_char) -> SrlmStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        check_out(out_json)?;
        let config = validate_config(Path::new(path)).map_err(|e| Failure::new(SrlmStatus::ConfigError, e.to_string()))?;
        let json = serde_json::to_string(&config).map_err(|e| Failure::new(SrlmStatus::ConfigError, e.to_string()))?;
        write_string(out_json, json)
    })
}

/// New empty candidate set, or NULL for an unknown rule.
#[no_mangle]
pub extern "C" fn srlm_candidates_new(rule: u32) -> *mut SrlmCandidates {
    let rule = match rule {
        r if r == SrlmRule::ArgmaxJoint as u32 => SelectionRule::ArgmaxJoint,
        r if r == SrlmRule::ArgminJoint as u32 => SelectionRule::ArgminJoint,
        other => {
            set_error(format!("unknown rule {other}"));
            return ptr::null_mut();
        }
    };
    Box::into_raw(Box::new(SrlmCandidates { rule, views: Vec::new(), answers: Vec::new() }))
}

/// # Safety
/// `set` must be NULL or a handle from [`srlm_candidates_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srlm_candidates_free(set: *mut SrlmCandidates) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Number of candidates pushed so far, 0 for NULL.
///
/// # Safety
/// `set` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn srlm_candidates_len(set: *const SrlmCandidates) -> usize {
    set.as_ref().map_or(0, |s| s.views.len())
}

/// Adds trajectory `k` with its final answer (NULL when it gave none), its
/// verbalized confidence and its trace length. Answers are grouped by their
/// canonical form.
///
/// # Safety
/// `set` must be a live handle; `answer` must be NULL or a NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn srlm_candidates_push(
    set: *mut SrlmCandidates,
    k: u32,
    answer: *const c_char,
    vc: f64,
    len: u64,
) -> SrlmStatus {
    guard(|| {
        let set = set.as_mut().ok_or_else(|| Failure::new(SrlmStatus::NullPointer, "set is null"))?;
        if vc.is_nan() || vc > 0.0 {
            return Err(Failure::new(SrlmStatus::InvalidArgument, "vc must be a non-positive number"));
        }
        if set.views.iter().any(|v| v.k == k) {
            return Err(Failure::new(SrlmStatus::InvalidArgument, format!("duplicate k {k}")));
        }
        let answer = if answer.is_null() { None } else { Some(read_str(answer, "answer")?.to_string()) };
        let group = answer.as_deref().and_then(|a| canonicalize_answer(a).ok());
        let len = len.max(1);
        set.views.push(CandidateView { k, group, vc, len, joint: joint_score(vc, len) });
        set.answers.push(answer);
        Ok(())
    })
}

/// Picks the best-scored member of the plurality answer group. Writes the
/// push-order index and, if `out_answer` is not NULL, a copy of its answer.
/// `SRLM_STATUS_NO_ANSWERS` when no candidate answered.
///
/// # Safety
/// `set` must be a live handle; `out_index` must be writable;
/// `out_answer` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn srlm_candidates_select(
    set: *const SrlmCandidates,
    out_index: *mut usize,
    out_answer: *mut *mut c_char,
) -> SrlmStatus {
    guard(|| {
        let set = set.as_ref().ok_or_else(|| Failure::new(SrlmStatus::NullPointer, "set is null"))?;
        check_out(out_index)?;
        let sel = plurality_select(&set.views, set.rule).map_err(|e| match e {
            SelectionError::NoAnswers => Failure::new(SrlmStatus::NoAnswers, e.to_string()),
            other => Failure::new(SrlmStatus::InvalidArgument, other.to_string()),
        })?;
        if !out_answer.is_null() {
            let answer = set.answers[sel.chosen].clone().unwrap_or_default();
            write_string(out_answer, answer)?;
        }
        write_out(out_index, sel.chosen, "out_index")
    })
}
