//! LLM transport abstraction, retry with exponential backoff, bounded
//! fan-out over many prompts, and a deterministic offline mock.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{InstructionError, PromptBundle, CANDIDATES_PER_SET};
use crate::dataset::{META_GOAL, META_OBJECT};

/// One failed request. `status` is the HTTP status when there was one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError {
    pub status: Option<u16>,
    pub retryable: bool,
    pub message: String,
}

impl TransportError {
    pub fn http(status: u16, message: impl Into<String>) -> Self {
        let retryable = status == 408 || status == 429 || status >= 500;
        Self { status: Some(status), retryable, message: message.into() }
    }

    pub fn timeout(message: impl Into<String>) -> Self {
        Self { status: None, retryable: true, message: format!("timeout: {}", message.into()) }
    }

    pub fn connection(message: impl Into<String>) -> Self {
        Self { status: None, retryable: true, message: message.into() }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self { status: None, retryable: false, message: message.into() }
    }
}

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.status {
            Some(s) => write!(f, "status {s}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for TransportError {}

pub trait LlmClient: Send + Sync {
    /// One completion attempt; no retries.
    fn complete(&self, prompt: &PromptBundle) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 4, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    /// `base · 2^retry`, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Complete `prompt`, retrying transient failures.
pub fn generate(
    client: &dyn LlmClient,
    prompt: &PromptBundle,
    policy: &RetryPolicy,
) -> Result<String, InstructionError> {
    let mut attempt = 0;
    loop {
        match client.complete(prompt) {
            Ok(text) => return Ok(text),
            Err(e) if !e.retryable => return Err(InstructionError::Transport(e)),
            Err(e) if attempt >= policy.max_retries => {
                return Err(InstructionError::RetriesExhausted { attempts: attempt + 1, last: e })
            }
            Err(e) => {
                let wait = policy.delay(attempt);
                log::warn!("{}: {e}; retrying in {wait:?}", prompt.trajectory_id);
                std::thread::sleep(wait);
                attempt += 1;
            }
        }
    }
}

/// [`generate`] for every prompt with at most `max_parallel` requests in
/// flight. Results keep the order of `prompts`.
pub fn generate_all(
    client: &dyn LlmClient,
    prompts: &[PromptBundle],
    policy: &RetryPolicy,
    max_parallel: usize,
) -> Vec<Result<String, InstructionError>> {
    let slots: Vec<Mutex<Option<Result<String, InstructionError>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = max_parallel.clamp(1, prompts.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(prompt) = prompts.get(i) else { break };
                let r = generate(client, prompt, policy);
                *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|p| p.into_inner()).expect("every prompt is visited"))
        .collect()
}

/// Instruction shapes the mock draws from; `{o}` is the object, `{g}` the goal.
pub const PARAPHRASE_TEMPLATES: [&str; 12] = [
    "Pick up the {o} and place it on the {g}.",
    "Move the {o} to the {g}.",
    "Grab the {o} and put it onto the {g}.",
    "In order to relocate the {o}, the robot should grasp it and set it on the {g}.",
    "Relocate the item so that it rests on the {g}.",
    "Take the {o} from the table and transfer it to the {g}.",
    "The {o} needs to go on the {g}.",
    "Carefully lift the {o} and lower it onto the {g}.",
    "Transport the {o} over to the {g} and release it.",
    "If the {o} is on the table, bring it to the {g}.",
    "Grasp the utensil, carry it to the {g}, then open the gripper.",
    "Reach for the {o}, close the gripper, and drop it on the {g}.",
];

#[derive(Debug, Clone)]
enum MockMode {
    Canned(String),
    Paraphrase,
}

/// Offline client. Either returns a fixed text, or writes five templated
/// paraphrases from the prompt metadata, chosen by a hash of the
/// trajectory id and wrapped in a little analysis prose.
#[derive(Debug, Clone)]
pub struct MockLlm {
    mode: MockMode,
}

impl MockLlm {
    pub fn canned(text: impl Into<String>) -> Self {
        Self { mode: MockMode::Canned(text.into()) }
    }

    pub fn paraphraser() -> Self {
        Self { mode: MockMode::Paraphrase }
    }

    fn paraphrase(prompt: &PromptBundle) -> String {
        let object = prompt.metadata.get(META_OBJECT).map_or("object", String::as_str);
        let goal = prompt.metadata.get(META_GOAL).map_or("target", String::as_str);
        let digest: [u8; 32] = Sha256::digest(prompt.trajectory_id.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut picks = sample(&mut rng, PARAPHRASE_TEMPLATES.len(), CANDIDATES_PER_SET).into_vec();
        picks.sort_unstable();
        let mut out = format!(
            "Scene analysis: the primary object is the {object}; the robot's objective is to place it on the {goal}.\n\n"
        );
        for (k, i) in picks.iter().enumerate() {
            let line = PARAPHRASE_TEMPLATES[*i].replace("{o}", object).replace("{g}", goal);
            out.push_str(&format!("No. {} {line}\n", k + 1));
        }
        out
    }
}

impl LlmClient for MockLlm {
    fn complete(&self, prompt: &PromptBundle) -> Result<String, TransportError> {
        Ok(match &self.mode {
            MockMode::Canned(t) => t.clone(),
            MockMode::Paraphrase => Self::paraphrase(prompt),
        })
    }
}
