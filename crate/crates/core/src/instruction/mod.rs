//! Paraphrase instruction sets: prompt construction, LLM transport and
//! retries, response parsing, curation storage, and training-time pairing.

mod llm;
mod pair;
mod parse;
mod prompt;
mod store;

use serde::{Deserialize, Serialize};

pub use llm::{generate, generate_all, LlmClient, MockLlm, RetryPolicy, TransportError, PARAPHRASE_TEMPLATES};
pub use pair::{pair, CuratedPairing};
pub use parse::{parse_candidates, render_candidates};
pub use prompt::{build_prompt, keyframe_indices, Keyframe, PromptBundle, SYSTEM_MESSAGE, USER_TEMPLATE};
pub use store::{CurationRequest, CurationService, CurationStore, KeyframeRef, TrajectoryDetail, TrajectorySummary};

/// Instructions requested from the LLM per trajectory.
pub const CANDIDATES_PER_SET: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum InstructionError {
    #[error("trajectory too short: {0} frames, need at least 3")]
    TrajectoryTooShort(usize),
    #[error("malformed response (found {found})")]
    Malformed { found: usize },
    #[error("duplicate index {0}")]
    DuplicateIndex(usize),
    #[error("candidate index {0} outside 1..={CANDIDATES_PER_SET}")]
    IndexOutOfRange(usize),
    #[error("candidate {0} has no text")]
    EmptyCandidate(usize),
    #[error("trajectory uncurated: {0}")]
    Uncurated(String),
    #[error("invalid curation: {0}")]
    InvalidCuration(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("llm request failed after {attempts} attempt(s): {last}")]
    RetriesExhausted { attempts: u32, last: TransportError },
    #[error("llm request failed: {0}")]
    Transport(TransportError),
    #[error("io error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("bad json in {path}: {source}")]
    Json { path: std::path::PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub text: String,
}

/// The LLM's numbered instructions for one trajectory, in index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub trajectory_id: String,
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl CandidateSet {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.text.as_str())
    }

    pub fn contains(&self, text: &str) -> bool {
        self.texts().any(|t| t == text)
    }
}

/// The curator's selection for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedSet {
    pub trajectory_id: String,
    pub selected: Vec<String>,
    pub curator: String,
    /// RFC 3339, UTC.
    pub timestamp: String,
}

impl CuratedSet {
    /// Check `1 ≤ |selected| ≤ 5`, no repeats, and `selected ⊆ candidates`.
    pub fn validate_against(&self, candidates: &CandidateSet) -> Result<(), InstructionError> {
        let bad = |m: String| Err(InstructionError::InvalidCuration(m));
        if self.trajectory_id != candidates.trajectory_id {
            return bad(format!("curation for {} checked against {}", self.trajectory_id, candidates.trajectory_id));
        }
        if self.selected.is_empty() || self.selected.len() > CANDIDATES_PER_SET {
            return bad(format!("select 1 to {CANDIDATES_PER_SET} instructions, got {}", self.selected.len()));
        }
        for (i, s) in self.selected.iter().enumerate() {
            if self.selected[..i].contains(s) {
                return bad(format!("{s:?} selected twice"));
            }
            if !candidates.contains(s) {
                return bad(format!("{s:?} is not one of the candidates"));
            }
        }
        if self.curator.trim().is_empty() {
            return bad("curator must not be empty".into());
        }
        Ok(())
    }
}
