//! Desk-scale linguistic-generalization fine-tuning for a vision-language-action
//! surrogate: 256-bin action tokens, LoRA adapters over a small transformer,
//! LLM paraphrase sets with human curation, and k-bin tolerance scoring.
//!
//! The commonly used types are re-exported at the crate root.

pub mod action;
pub mod dataset;
pub mod eval;
pub mod instruction;
pub mod lora;
pub mod pipeline;
pub mod policy;
pub mod tensor;

pub use action::{Action, BinVector, NormalizationStats, TokenMap, ACTION_DIM, NUM_BINS};
pub use dataset::{Frame, Observation, Trajectory};
pub use eval::{Comparison, EvalReport, KbinAccuracy, PredictionRecord};
pub use instruction::{CandidateSet, CuratedSet, LlmClient, MockLlm, PromptBundle, RetryPolicy, TransportError};
pub use lora::LoraAdapter;
pub use pipeline::{PipelineError, Workspace};
pub use policy::{PolicyConfig, PolicyModel, PretrainConfig, TrainConfig};
pub use tensor::Matrix;
