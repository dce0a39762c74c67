//! Seeded random pairing of curated instructions with trajectories.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{CuratedSet, InstructionError};
use crate::policy::{InstructionSource, PolicyError};

/// Uniform draw from the curated set of `trajectory_id`, a pure function of
/// `(seed, epoch, trajectory_id)`.
pub fn pair<'a>(
    curated: &'a BTreeMap<String, CuratedSet>,
    trajectory_id: &str,
    epoch: usize,
    seed: u64,
) -> Result<&'a str, InstructionError> {
    let set = curated
        .get(trajectory_id)
        .filter(|c| !c.selected.is_empty())
        .ok_or_else(|| InstructionError::Uncurated(trajectory_id.to_string()))?;
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update(trajectory_id.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    Ok(&set.selected[rng.random_range(0..set.selected.len())])
}

/// Per-epoch paraphrase pairing for the trainer.
#[derive(Debug, Clone)]
pub struct CuratedPairing {
    curated: BTreeMap<String, CuratedSet>,
    seed: u64,
}

impl CuratedPairing {
    pub fn new(curated: BTreeMap<String, CuratedSet>, seed: u64) -> Self {
        Self { curated, seed }
    }
}

impl InstructionSource for CuratedPairing {
    fn instruction(&self, trajectory_id: &str, epoch: usize) -> Result<String, PolicyError> {
        pair(&self.curated, trajectory_id, epoch, self.seed)
            .map(str::to_string)
            .map_err(|e| PolicyError::Instruction(e.to_string()))
    }
}
