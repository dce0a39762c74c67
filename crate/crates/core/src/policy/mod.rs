//! Transformer surrogate policy: tokenizer, sequence layout, model with
//! LoRA-wrapped attention projections, optimizer, trainer and checkpoints.

mod checkpoint;
mod model;
mod optim;
mod sequence;
mod tokenizer;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CONFIG_FILE};
pub use model::{
    Block, BlockGrads, EmbeddingGrads, Embeddings, FeedForwardGrads, GradMode, LayerNorm, ModelGrads, NormGrads,
    PolicyModel, Projection, ProjectionGrads,
};
pub use optim::{AdamW, AdamWConfig};
pub use sequence::{extract_patches, AssembledSequence, TrainingExample};
pub use tokenizer::{Tokenizer, PAD_ID, UNK_ID};
pub use train::{
    pretrain, train, EpochRecord, FixedInstruction, InstructionSource, PretrainConfig, TrainConfig, TrainItem,
    TrainOutcome,
};

use crate::action::{CodecError, TokenMap, ACTION_DIM, NUM_BINS};
use crate::lora::LoraError;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("observation is {width}x{height}, model expects {expected}x{expected}")]
    Resolution { expected: usize, width: usize, height: usize },
    #[error("empty instruction")]
    EmptyInstruction,
    #[error("instruction has {0} tokens, more than the model accepts")]
    InstructionTooLong(usize),
    #[error("target token {0} is not an action token")]
    TargetNotActionToken(u32),
    #[error("target outside vocab: {0}")]
    TargetOutOfVocab(u32),
    #[error("empty batch")]
    EmptyBatch,
    #[error("sequence has no targets")]
    MissingTargets,
    #[error("model already carries adapters")]
    AdaptersPresent,
    #[error("model has no adapters to train")]
    AdaptersMissing,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
    #[error("empty training set")]
    EmptyDataset,
    #[error("instruction source: {0}")]
    Instruction(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Architecture hyperparameters; stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Word-piece table size; the 256 action tokens follow it.
    pub base_vocab: usize,
    pub max_instruction_tokens: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            base_vocab: 1024,
            max_instruction_tokens: 24,
        }
    }
}

impl PolicyConfig {
    /// Small model used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            base_vocab: 300,
            max_instruction_tokens: 8,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let fail = |m: &str| Err(PolicyError::Config(m.to_string()));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail("image_size must be a positive multiple of patch_size");
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return fail("n_layers and d_ff must be positive");
        }
        if self.base_vocab < 2 {
            return fail("base_vocab must hold at least [PAD] and [UNK]");
        }
        if self.max_instruction_tokens == 0 {
            return fail("max_instruction_tokens must be positive");
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.base_vocab + NUM_BINS
    }

    pub fn n_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn max_seq_len(&self) -> usize {
        self.n_patches() + self.max_instruction_tokens + ACTION_DIM
    }

    pub fn token_map(&self) -> TokenMap {
        TokenMap::last_256(self.vocab_size() as u32).expect("vocab holds the reserved range")
    }
}
