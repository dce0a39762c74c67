//! Prompt layout: `[patch tokens] ++ [instruction tokens] ++ [7 action slots]`.
//!
//! Each action slot is supervised with the token of one action dimension in
//! the fixed order `dx, dy, dz, droll, dpitch, dyaw, gripper`.

use std::ops::Range;

use super::{PolicyConfig, PolicyError, Tokenizer};
use crate::action::ACTION_DIM;
use crate::dataset::Observation;
use crate::tensor::Matrix;

/// One supervised triple `(o, l, a)` with `a` already mapped to tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub observation: Observation,
    pub instruction: String,
    pub target_tokens: [u32; ACTION_DIM],
}

/// A tokenized, model-ready sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSequence {
    /// `n_patches × patch_size²` pixel intensities.
    pub patches: Matrix,
    pub instruction_ids: Vec<u32>,
    pub targets: Option<[u32; ACTION_DIM]>,
}

impl AssembledSequence {
    pub fn n_patches(&self) -> usize {
        self.patches.nrows()
    }

    pub fn len(&self) -> usize {
        self.n_patches() + self.instruction_ids.len() + ACTION_DIM
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Positions of the seven supervised slots within the sequence.
    pub fn action_positions(&self) -> Range<usize> {
        let start = self.n_patches() + self.instruction_ids.len();
        start..start + ACTION_DIM
    }
}

/// Cut an image into non-overlapping square patches, row-major over the
/// patch grid, each patch flattened row-major.
pub fn extract_patches(obs: &Observation, cfg: &PolicyConfig) -> Result<Matrix, PolicyError> {
    if obs.width() != cfg.image_size || obs.height() != cfg.image_size {
        return Err(PolicyError::Resolution { expected: cfg.image_size, width: obs.width(), height: obs.height() });
    }
    let p = cfg.patch_size;
    let grid = cfg.image_size / p;
    let mut out = Matrix::zeros((grid * grid, p * p));
    for gy in 0..grid {
        for gx in 0..grid {
            let mut row = out.row_mut(gy * grid + gx);
            for y in 0..p {
                for x in 0..p {
                    row[y * p + x] = obs.intensity(gx * p + x, gy * p + y);
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn tokenize_instruction(
    tokenizer: &Tokenizer,
    cfg: &PolicyConfig,
    instruction: &str,
) -> Result<Vec<u32>, PolicyError> {
    let mut ids = tokenizer.encode(instruction);
    if ids.is_empty() {
        return Err(PolicyError::EmptyInstruction);
    }
    ids.truncate(cfg.max_instruction_tokens);
    Ok(ids)
}

pub(crate) fn assemble(
    tokenizer: &Tokenizer,
    cfg: &PolicyConfig,
    patches: Matrix,
    instruction: &str,
    targets: Option<[u32; ACTION_DIM]>,
) -> Result<AssembledSequence, PolicyError> {
    let instruction_ids = tokenize_instruction(tokenizer, cfg, instruction)?;
    if let Some(t) = &targets {
        let map = cfg.token_map();
        if let Some(&bad) = t.iter().find(|&&id| !map.is_action_token(id)) {
            return Err(PolicyError::TargetNotActionToken(bad));
        }
    }
    Ok(AssembledSequence { patches, instruction_ids, targets })
}
