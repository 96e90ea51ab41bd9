//! Aggregates results files into accuracy tables.
//!
//! Ablations are recomputed offline from the stored candidate records: each
//! policy picks a candidate and is credited with that candidate's grade.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::results::{read_results, ResultsError, TaskResult};
use crate::config::SelectionRule;
use crate::datasets::LONG_CONTEXT_THRESHOLD;
use crate::uncertainty::{apply_policy, CandidateView, Policy};

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub bins: bool,
    pub threshold: u64,
    pub by_domain: bool,
    pub ablations: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { bins: false, threshold: LONG_CONTEXT_THRESHOLD, by_domain: false, ablations: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Cell {
    pub n: usize,
    /// Mean score in percentage points.
    pub accuracy: f64,
}

impl Cell {
    fn of(scores: impl IntoIterator<Item = f64>) -> Cell {
        let (n, sum) = scores.into_iter().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
        Cell { n, accuracy: if n == 0 { 0.0 } else { 100.0 * sum / n as f64 } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: String,
    pub overall: Cell,
    pub mean_wall_clock_ms: f64,
    /// Points over `base` on the task ids both methods completed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_vs_base: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub short: Option<Cell>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub long: Option<Cell>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub domains: BTreeMap<String, Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub policy: String,
    pub cell: Cell,
    /// For `full`: tasks where the offline pick matches the live selection.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agrees_with_live: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub threshold: u64,
    pub methods: Vec<MethodRow>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub ablations: BTreeMap<String, Vec<AblationRow>>,
}

fn parse_rule(name: &str) -> SelectionRule {
    match name {
        "argmin-joint" => SelectionRule::ArgminJoint,
        _ => SelectionRule::ArgmaxJoint,
    }
}

/// Candidate views in stored order, plus the grade of each.
pub fn candidate_views(result: &TaskResult) -> (Vec<CandidateView>, Vec<f64>) {
    result
        .candidates
        .iter()
        .map(|c| {
            let view = CandidateView { k: c.k, group: c.group.clone(), vc: c.vc, len: c.len, joint: c.joint };
            (view, c.grade.as_ref().map_or(0.0, |g| g.score))
        })
        .unzip()
}

/// Score a policy would have earned on one task, and the candidate it picked.
pub fn ablation_pick(result: &TaskResult, policy: Policy) -> (f64, Option<usize>) {
    let (views, grades) = candidate_views(result);
    let rule = parse_rule(&result.task.selection_rule);
    match apply_policy(&views, policy, rule) {
        Some(i) if views[i].group.is_some() => (grades[i], Some(i)),
        Some(i) => (0.0, Some(i)),
        None => (0.0, None),
    }
}

/// Whether an offline pick is the live selection: same sample, same answer bytes.
pub fn matches_live(result: &TaskResult, pick: Option<usize>) -> bool {
    match pick {
        Some(i) => {
            let c = &result.candidates[i];
            result.task.chosen == Some(c.k) && c.answer.is_some() && result.task.prediction == c.answer
        }
        None => result.task.chosen.is_none() && result.task.prediction.is_none(),
    }
}

pub fn build_report(results: &[TaskResult], options: &ReportOptions) -> Report {
    let mut by_method: BTreeMap<&str, Vec<&TaskResult>> = BTreeMap::new();
    for r in results {
        by_method.entry(r.task.method.as_str()).or_default().push(r);
    }
    let base: BTreeMap<&str, f64> = by_method
        .get("base")
        .map(|rs| rs.iter().map(|r| (r.task.task_id.as_str(), r.task.grade.score)).collect())
        .unwrap_or_default();

    let mut methods = Vec::new();
    let mut ablations = BTreeMap::new();
    for (method, rs) in &by_method {
        let score = |r: &&TaskResult| r.task.grade.score;
        let delta_vs_base = (*method != "base" && !base.is_empty())
            .then(|| {
                let diffs: Vec<f64> = rs
                    .iter()
                    .filter_map(|r| base.get(r.task.task_id.as_str()).map(|b| r.task.grade.score - b))
                    .collect();
                (!diffs.is_empty()).then(|| 100.0 * diffs.iter().sum::<f64>() / diffs.len() as f64)
            })
            .flatten();
        let (short, long) = if options.bins {
            let (s, l): (Vec<&&TaskResult>, Vec<&&TaskResult>) =
                rs.iter().partition(|r| r.task.token_count < options.threshold);
            (Some(Cell::of(s.into_iter().map(score))), Some(Cell::of(l.into_iter().map(score))))
        } else {
            (None, None)
        };
        let mut domains = BTreeMap::new();
        if options.by_domain {
            let names: BTreeSet<&str> = rs.iter().filter_map(|r| r.task.domain.as_deref()).collect();
            for d in names {
                let cell = Cell::of(rs.iter().filter(|r| r.task.domain.as_deref() == Some(d)).map(score));
                domains.insert(d.to_string(), cell);
            }
        }
        let walls: Vec<f64> = rs.iter().map(|r| r.task.wall_clock_ms as f64).collect();
        methods.push(MethodRow {
            method: method.to_string(),
            overall: Cell::of(rs.iter().map(score)),
            mean_wall_clock_ms: if walls.is_empty() { 0.0 } else { walls.iter().sum::<f64>() / walls.len() as f64 },
            delta_vs_base,
            short,
            long,
            domains,
        });

        if options.ablations && rs.iter().any(|r| r.candidates.len() > 1) {
            let rows = Policy::ALL
                .into_iter()
                .map(|policy| {
                    let picks: Vec<(f64, Option<usize>)> = rs.iter().map(|r| ablation_pick(r, policy)).collect();
                    let agrees_with_live = (policy == Policy::Full).then(|| {
                        rs.iter().zip(&picks).filter(|(r, (_, i))| matches_live(r, *i)).count()
                    });
                    AblationRow {
                        policy: policy.name().to_string(),
                        cell: Cell::of(picks.iter().map(|p| p.0)),
                        agrees_with_live,
                    }
                })
                .collect();
            ablations.insert(method.to_string(), rows);
        }
    }
    Report { threshold: options.threshold, methods, ablations }
}

/// Reads and merges several results files. Schema mismatches are errors.
pub fn report_files(paths: &[impl AsRef<Path>], options: &ReportOptions) -> Result<Report, ResultsError> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_results(p.as_ref())?);
    }
    Ok(build_report(&all, options))
}

pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>5} {:>8} {:>9} {:>11}", "method", "n", "acc", "Δ base", "wall ms");
    for m in &report.methods {
        let delta = m.delta_vs_base.map_or("-".to_string(), |d| format!("{d:+.1}"));
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>8.1} {:>9} {:>11.0}",
            m.method, m.overall.n, m.overall.accuracy, delta, m.mean_wall_clock_ms
        );
    }
    if report.methods.iter().any(|m| m.short.is_some()) {
        let _ = writeln!(out, "\ncontext length (threshold {} tokens)", report.threshold);
        let _ = writeln!(out, "{:<12} {:>14} {:>14}", "method", "short", "long");
        for m in &report.methods {
            let cell = |c: &Option<Cell>| c.as_ref().map_or("-".into(), |c| format!("{:.1} (n={})", c.accuracy, c.n));
            let _ = writeln!(out, "{:<12} {:>14} {:>14}", m.method, cell(&m.short), cell(&m.long));
        }
    }
    for m in report.methods.iter().filter(|m| !m.domains.is_empty()) {
        let _ = writeln!(out, "\n{} by domain", m.method);
        for (d, c) in &m.domains {
            let _ = writeln!(out, "  {:<40} {:>6.1} (n={})", d, c.accuracy, c.n);
        }
    }
    for (method, rows) in &report.ablations {
        let _ = writeln!(out, "\n{method} ablations");
        for r in rows {
            let live = r.agrees_with_live.map_or(String::new(), |a| format!("  matches live on {a}/{}", r.cell.n));
            let _ = writeln!(out, "  {:<18} {:>6.1} (n={}){live}", r.policy, r.cell.accuracy, r.cell.n);
        }
    }
    out
}
