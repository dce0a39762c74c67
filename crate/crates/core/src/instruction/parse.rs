//! Extraction of `No. k` lines from free-form LLM output.

use std::sync::OnceLock;

use regex::Regex;

use super::{Candidate, CandidateSet, InstructionError, CANDIDATES_PER_SET};

/// A numbered line: optional markdown bullets or emphasis, `No.`, the
/// index, an optional separator, then the instruction.
fn line_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:[-*+>]\s*)*No\.\s*(\d+)\s*(?:\*\*)?\s*[:.)\-]?\s*(.*?)\s*$").expect("static regex")
    })
}

/// Pull exactly five numbered instructions out of `raw`; everything else is
/// ignored. Text is kept verbatim apart from surrounding whitespace.
pub fn parse_candidates(raw: &str, trajectory_id: &str) -> Result<CandidateSet, InstructionError> {
    let mut found: Vec<Candidate> = Vec::new();
    for line in raw.lines() {
        let Some(cap) = line_pattern().captures(line) else {
            continue;
        };
        let index: usize = cap[1].parse().unwrap_or(usize::MAX);
        found.push(Candidate { index, text: cap[2].to_string() });
    }
    if found.len() != CANDIDATES_PER_SET {
        return Err(InstructionError::Malformed { found: found.len() });
    }
    found.sort_by_key(|c| c.index);
    for (i, c) in found.iter().enumerate() {
        if i > 0 && found[i - 1].index == c.index {
            return Err(InstructionError::DuplicateIndex(c.index));
        }
        if !(1..=CANDIDATES_PER_SET).contains(&c.index) {
            return Err(InstructionError::IndexOutOfRange(c.index));
        }
        if c.text.is_empty() {
            return Err(InstructionError::EmptyCandidate(c.index));
        }
    }
    Ok(CandidateSet { trajectory_id: trajectory_id.to_string(), candidates: found, provenance: None })
}

/// One `No. k text` line per candidate.
pub fn render_candidates(set: &CandidateSet) -> String {
    set.candidates.iter().map(|c| format!("No. {} {}\n", c.index, c.text)).collect()
}
