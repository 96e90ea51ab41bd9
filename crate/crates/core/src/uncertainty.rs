//! Uncertainty signals and candidate selection.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SelectionRule;
use crate::domain::{
    answers_equal, canonicalize_answer, AnswerError, CandidateSet, EqualityMode, EquivalenceJudge, Trajectory,
    UncertaintyScore,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectionError {
    #[error("no-answers")]
    NoAnswers,
    #[error("empty-consistent-set")]
    EmptyConsistentSet,
    #[error("expected {expected} scores, got {got}")]
    ScoreCount { expected: usize, got: usize },
    #[error("judge-required")]
    JudgeRequired,
    #[error("judge: {0}")]
    Judge(String),
}

/// Σ ln(ν_t/100) with missing values filled by the mean of the present ones
/// (or `neutral` when none are present). Returns the sum and the positions
/// that were filled.
pub fn vc_from_confidences(confidences: &[Option<f64>], neutral: f64) -> (f64, Vec<usize>) {
    let present: Vec<f64> = confidences.iter().flatten().copied().collect();
    let fill = if present.is_empty() { neutral } else { present.iter().sum::<f64>() / present.len() as f64 };
    let mut imputed = Vec::new();
    let mut vc = 0.0;
    for (i, c) in confidences.iter().enumerate() {
        let v = match c {
            Some(v) => *v,
            None => {
                imputed.push(i);
                fill
            }
        };
        vc += (v / 100.0).ln();
    }
    (vc, imputed)
}

pub fn verbalized_confidence(trajectory: &Trajectory, neutral: f64) -> (f64, Vec<u32>) {
    let conf: Vec<Option<f64>> = trajectory.steps.iter().map(|s| s.confidence_raw).collect();
    let (vc, imputed) = vc_from_confidences(&conf, neutral);
    (vc, imputed.into_iter().map(|i| trajectory.steps[i].index).collect())
}

/// Σ ℓ_t, floored at 1.
pub fn len_from_tokens(tokens: impl IntoIterator<Item = u64>) -> u64 {
    tokens.into_iter().sum::<u64>().max(1)
}

pub fn trace_length(trajectory: &Trajectory) -> u64 {
    len_from_tokens(trajectory.steps.iter().map(|s| s.token_count))
}

pub fn joint_score(vc: f64, len: u64) -> f64 {
    vc * len as f64
}

pub fn score_trajectory(trajectory: &Trajectory, neutral: f64) -> UncertaintyScore {
    let (vc, imputed_steps) = verbalized_confidence(trajectory, neutral);
    let len = trace_length(trajectory);
    UncertaintyScore { vc, len, joint: joint_score(vc, len), imputed_steps }
}

/// The minimal view of a candidate that selection needs. Also what the
/// results file stores, so selection can be replayed offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub k: u32,
    /// Answer-group key, absent for unanswered candidates.
    pub group: Option<String>,
    pub vc: f64,
    pub len: u64,
    pub joint: f64,
}

/// `a` strictly better than `b` under `rule`, ties to the lower sample index.
fn better(rule: SelectionRule, a: &CandidateView, b: &CandidateView) -> bool {
    let by_score = match rule {
        SelectionRule::ArgmaxJoint => a.joint.total_cmp(&b.joint),
        SelectionRule::ArgminJoint => b.joint.total_cmp(&a.joint),
    };
    match by_score {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.k < b.k,
    }
}

fn best_by(
    cands: &[CandidateView],
    members: impl IntoIterator<Item = usize>,
    mut better: impl FnMut(&CandidateView, &CandidateView) -> bool,
) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in members {
        if best.is_none_or(|b| better(&cands[i], &cands[b])) {
            best = Some(i);
        }
    }
    best
}

fn groups(cands: &[CandidateView]) -> BTreeMap<&str, Vec<usize>> {
    let mut g: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in cands.iter().enumerate() {
        if let Some(key) = &c.group {
            g.entry(key.as_str()).or_default().push(i);
        }
    }
    g
}

/// Plurality group (ties to the group holding the best-scored candidate) and
/// the best-scored member inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub plurality: String,
    pub consistent: Vec<usize>,
    pub chosen: usize,
}

pub fn plurality_select(cands: &[CandidateView], rule: SelectionRule) -> Result<Selection, SelectionError> {
    let g = groups(cands);
    let top = g.values().map(Vec::len).max().ok_or(SelectionError::NoAnswers)?;
    let tied = g.values().filter(|m| m.len() == top).flatten().copied();
    let leader = best_by(cands, tied, |a, b| better(rule, a, b)).ok_or(SelectionError::NoAnswers)?;
    let plurality = cands[leader].group.clone().expect("grouped candidates have a key");
    let consistent = g[plurality.as_str()].clone();
    let chosen = best_by(cands, consistent.iter().copied(), |a, b| better(rule, a, b))
        .ok_or(SelectionError::EmptyConsistentSet)?;
    Ok(Selection { plurality, consistent, chosen })
}

/// Selection policies compared in ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Plurality group, then the joint score inside it.
    Full,
    /// Plurality group, ties and representative both by lowest sample index.
    ConsistencyOnly,
    /// Highest verbalized confidence over all answered candidates.
    VcOnly,
    /// Shortest trace over all answered candidates.
    LenOnly,
    /// Candidate with sample index 0, answered or not.
    SingleSample,
}

impl Policy {
    pub const ALL: [Policy; 5] =
        [Policy::Full, Policy::ConsistencyOnly, Policy::VcOnly, Policy::LenOnly, Policy::SingleSample];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Full => "full",
            Policy::ConsistencyOnly => "consistency-only",
            Policy::VcOnly => "vc-only",
            Policy::LenOnly => "len-only",
            Policy::SingleSample => "single-sample",
        }
    }
}

/// Index of the candidate `policy` picks. `None` when nothing is answered
/// (or, for single-sample, when there is no sample 0).
pub fn apply_policy(cands: &[CandidateView], policy: Policy, rule: SelectionRule) -> Option<usize> {
    let answered = || (0..cands.len()).filter(|&i| cands[i].group.is_some());
    match policy {
        Policy::Full => plurality_select(cands, rule).ok().map(|s| s.chosen),
        Policy::ConsistencyOnly => {
            let g = groups(cands);
            let top = g.values().map(Vec::len).max()?;
            let tied = g.values().filter(|m| m.len() == top).flatten().copied();
            let leader = best_by(cands, tied, |a, b| a.k < b.k)?;
            let key = cands[leader].group.as_deref()?;
            best_by(cands, g[key].iter().copied(), |a, b| a.k < b.k)
        }
        Policy::VcOnly => best_by(cands, answered(), |a, b| match a.vc.total_cmp(&b.vc) {
            Ordering::Equal => a.k < b.k,
            o => o == Ordering::Greater,
        }),
        Policy::LenOnly => best_by(cands, answered(), |a, b| match a.len.cmp(&b.len) {
            Ordering::Equal => a.k < b.k,
            o => o == Ordering::Less,
        }),
        Policy::SingleSample => cands.iter().position(|c| c.k == 0),
    }
}

/// Group key of one raw final answer under `mode`; `None` when unanswerable.
fn group_key(raw: &str, mode: EqualityMode) -> Option<String> {
    match mode {
        EqualityMode::Exact => {
            let t = raw.trim();
            (!t.is_empty()).then(|| t.to_string())
        }
        EqualityMode::Normalized | EqualityMode::Judge => canonicalize_answer(raw).ok(),
    }
}

/// Groups the answered trajectories and finds the plurality answer.
pub fn self_consistency(
    trajectories: Vec<Trajectory>,
    scores: &[UncertaintyScore],
    equality: EqualityMode,
    judge: Option<&dyn EquivalenceJudge>,
    rule: SelectionRule,
) -> Result<CandidateSet, SelectionError> {
    if scores.len() != trajectories.len() {
        return Err(SelectionError::ScoreCount { expected: trajectories.len(), got: scores.len() });
    }
    if equality == EqualityMode::Judge && judge.is_none() {
        return Err(SelectionError::JudgeRequired);
    }
    let mut keys: Vec<Option<String>> =
        trajectories.iter().map(|t| t.final_answer.as_deref().and_then(|a| group_key(a, equality))).collect();

    if equality == EqualityMode::Judge {
        // Merge each new key into the first earlier representative the judge accepts.
        let mut reps: Vec<String> = Vec::new();
        for key in keys.iter_mut().flatten() {
            let mut merged = None;
            for rep in &reps {
                if rep == key {
                    merged = Some(rep.clone());
                    break;
                }
                match answers_equal(rep, key, EqualityMode::Judge, judge) {
                    Ok(true) => {
                        merged = Some(rep.clone());
                        break;
                    }
                    Ok(false) => {}
                    Err(AnswerError::JudgeRequired) => return Err(SelectionError::JudgeRequired),
                    Err(e) => return Err(SelectionError::Judge(e.to_string())),
                }
            }
            match merged {
                Some(rep) => *key = rep,
                None => reps.push(key.clone()),
            }
        }
    }

    let views: Vec<CandidateView> = trajectories
        .iter()
        .zip(scores)
        .zip(&keys)
        .map(|((t, s), key)| CandidateView { k: t.k, group: key.clone(), vc: s.vc, len: s.len, joint: s.joint })
        .collect();
    let selection = plurality_select(&views, rule)?;

    let k = trajectories.len() as f64;
    let mut answer_groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut unanswered = Vec::new();
    for (i, key) in keys.into_iter().enumerate() {
        match key {
            Some(key) => answer_groups.entry(key).or_default().push(i),
            None => unanswered.push(i),
        }
    }
    let prob = answer_groups.iter().map(|(a, m)| (a.clone(), m.len() as f64 / k)).collect();
    Ok(CandidateSet {
        trajectories,
        answer_groups,
        prob,
        unanswered,
        plurality: selection.plurality,
        consistent: selection.consistent,
    })
}

/// Picks p* from the consistent set; returns its index and final answer.
pub fn select(
    set: &CandidateSet,
    scores: &[UncertaintyScore],
    rule: SelectionRule,
) -> Result<(usize, String), SelectionError> {
    if scores.len() != set.trajectories.len() {
        return Err(SelectionError::ScoreCount { expected: set.trajectories.len(), got: scores.len() });
    }
    let views: Vec<CandidateView> = set
        .trajectories
        .iter()
        .zip(scores)
        .map(|(t, s)| CandidateView { k: t.k, group: None, vc: s.vc, len: s.len, joint: s.joint })
        .collect();
    let chosen = best_by(&views, set.consistent.iter().copied(), |a, b| better(rule, a, b))
        .ok_or(SelectionError::EmptyConsistentSet)?;
    let answer = set.trajectories[chosen].final_answer.clone().ok_or(SelectionError::EmptyConsistentSet)?;
    Ok((chosen, answer))
}
