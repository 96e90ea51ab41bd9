//! Parsing of model completions: code cells, confidence reports, final answers.

use std::sync::OnceLock;

use regex::Regex;

/// Smallest confidence kept after clamping, so `ln(ν/100)` stays finite.
pub const MIN_CONFIDENCE: f64 = 0.001;

const CODE_LANGS: &[&str] = &["", "python", "py", "python3", "repl", "ipython"];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CodeCells {
    pub cells: Vec<String>,
    /// The last fence was never closed; its cell runs to the end of the text.
    pub unterminated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinalAnswer {
    pub text: String,
    pub multiple_markers: bool,
}

fn fence_info(line: &str) -> Option<&str> {
    let t = line.trim_start();
    if line.len() - t.len() > 3 {
        return None;
    }
    t.strip_prefix("```").map(str::trim)
}

fn is_confidence_only(body: &str) -> bool {
    let t = body.trim();
    t.starts_with('{') && t.ends_with('}') && t.contains("\"confidence\"")
}

/// Splits a completion into prose lines and fenced blocks `(info, body)`.
fn scan(text: &str) -> (Vec<&str>, Vec<(String, String)>, bool) {
    let mut prose = Vec::new();
    let mut blocks = Vec::new();
    let mut open: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        match open.as_mut() {
            None => match fence_info(line) {
                Some(info) => open = Some((info.to_lowercase(), Vec::new())),
                None => prose.push(line),
            },
            Some((_, body)) => {
                if fence_info(line).is_some_and(str::is_empty) {
                    let (info, body) = open.take().unwrap();
                    blocks.push((info, body.join("\n")));
                } else {
                    body.push(line);
                }
            }
        }
    }
    let unterminated = open.is_some();
    if let Some((info, body)) = open {
        blocks.push((info, body.join("\n")));
    }
    (prose, blocks, unterminated)
}

/// Contents of the executable fenced blocks, in order. `json` blocks and
/// bare confidence objects are reports, not code, and are skipped.
pub fn extract_code_cells(completion: &str) -> CodeCells {
    let (_, blocks, unterminated) = scan(completion);
    let cells = blocks
        .into_iter()
        .filter(|(info, body)| {
            let lang = info.split_whitespace().next().unwrap_or("");
            CODE_LANGS.contains(&lang) && !is_confidence_only(body) && !body.trim().is_empty()
        })
        .map(|(_, body)| body)
        .collect();
    CodeCells { cells, unterminated }
}

fn confidence_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"\{\s*"confidence"\s*:\s*([^{}]*?)\s*\}"#).unwrap())
}

/// The last `{"confidence": ν}` report, clamped into `(0, 100]`.
pub fn parse_step_confidence(completion: &str) -> Option<f64> {
    let caps = confidence_regex().captures_iter(completion).last()?;
    let raw = caps[1].trim().trim_matches('"').trim().trim_end_matches('%');
    let value: f64 = raw.parse().ok()?;
    if value.is_nan() {
        return None;
    }
    Some(if value > 100.0 {
        100.0
    } else if value <= 0.0 {
        MIN_CONFIDENCE
    } else {
        value
    })
}

fn marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)final answer\s*:").unwrap())
}

fn clean_answer(s: &str) -> String {
    let mut t = s.trim();
    if let Some(idx) = t.find("{\"confidence\"") {
        t = t[..idx].trim_end();
    }
    t.trim_matches(|c: char| c == '*' || c == '`' || c.is_whitespace()).to_string()
}

/// Text after the last final-answer marker in the prose of a completion.
pub fn extract_final_answer(completion: &str) -> Option<FinalAnswer> {
    let (prose, _, _) = scan(completion);
    let mut hits = Vec::new();
    for (i, line) in prose.iter().enumerate() {
        for m in marker_regex().find_iter(line) {
            hits.push((i, m.end()));
        }
    }
    let &(line_idx, offset) = hits.last()?;
    let mut answer = clean_answer(&prose[line_idx][offset..]);
    if answer.is_empty() {
        answer = prose[line_idx + 1..]
            .iter()
            .map(|l| clean_answer(l))
            .find(|l| !l.is_empty())
            .unwrap_or_default();
    }
    if answer.is_empty() {
        return None;
    }
    Some(FinalAnswer { text: answer, multiple_markers: hits.len() > 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_in_order() {
        let t = "Let me look.\n```python\nprint(1)\n```\nthen\n```\nx = 2\nprint(x)\n```\n";
        let c = extract_code_cells(t);
        assert_eq!(c.cells, vec!["print(1)", "x = 2\nprint(x)"]);
        assert!(!c.unterminated);
        assert!(extract_code_cells("just prose").cells.is_empty());
    }

    #[test]
    fn single_cell() {
        assert_eq!(extract_code_cells("```python\nprint(1)\n```").cells, vec!["print(1)"]);
    }

    #[test]
    fn unterminated_fence_runs_to_end() {
        let c = extract_code_cells("```python\nprint(1)\nprint(2)");
        assert_eq!(c.cells, vec!["print(1)\nprint(2)"]);
        assert!(c.unterminated);
    }

    #[test]
    fn confidence_blocks_are_not_code() {
        let t = "```python\nprint(1)\n```\n```json\n{\"confidence\": 80}\n```\n```\n{\"confidence\": 70}\n```";
        assert_eq!(extract_code_cells(t).cells, vec!["print(1)"]);
    }

    #[test]
    fn confidence_parsing() {
        assert_eq!(parse_step_confidence("done\n```json\n{\"confidence\": 87.250}\n```"), Some(87.25));
        assert_eq!(parse_step_confidence("nothing here"), None);
        assert_eq!(parse_step_confidence("{\"confidence\": 0}"), Some(MIN_CONFIDENCE));
        assert_eq!(parse_step_confidence("{\"confidence\": -3}"), Some(MIN_CONFIDENCE));
        assert_eq!(parse_step_confidence("{\"confidence\": 140}"), Some(100.0));
        assert_eq!(parse_step_confidence("{\"confidence\": high}"), None);
        assert_eq!(parse_step_confidence("{\"confidence\": \"64.5\"}"), Some(64.5));
        assert_eq!(
            parse_step_confidence("{\"confidence\": 20}\nwait, fixing\n{\"confidence\": 90}"),
            Some(90.0)
        );
        assert_eq!(parse_step_confidence("{\"confidence\":\n  55.5\n}"), Some(55.5));
    }

    #[test]
    fn final_answer_marker() {
        let a = extract_final_answer("thinking...\nFINAL ANSWER: Paris").unwrap();
        assert_eq!(a.text, "Paris");
        assert!(!a.multiple_markers);
        assert!(extract_final_answer("no marker").is_none());
        let b = extract_final_answer("FINAL ANSWER: A\nhmm, actually\nFINAL ANSWER: B").unwrap();
        assert_eq!(b.text, "B");
        assert!(b.multiple_markers);
    }

    #[test]
    fn final_answer_formats() {
        assert_eq!(extract_final_answer("**Final Answer:** 42").unwrap().text, "42");
        assert_eq!(extract_final_answer("FINAL ANSWER:\n\n  LOC\n").unwrap().text, "LOC");
        assert_eq!(
            extract_final_answer("FINAL ANSWER: 7 {\"confidence\": 90}").unwrap().text,
            "7"
        );
        // markers inside code are program text, not answers
        assert!(extract_final_answer("```python\nprint('FINAL ANSWER: x')\n```").is_none());
        assert!(extract_final_answer("FINAL ANSWER:   ").is_none());
    }
}
