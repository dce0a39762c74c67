//! Minibatch training loops. `pretrain` fits every base weight on fixed
//! instructions; `train` attaches adapters and updates only their factors.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::GradMode;
use super::optim::{AdamW, AdamWConfig};
use super::sequence::{extract_patches, AssembledSequence};
use super::{PolicyError, PolicyModel};
use crate::action::{bins_to_tokens, encode, NormalizationStats, ACTION_DIM};
use crate::dataset::Trajectory;
use crate::tensor::Matrix;

/// Supplies the instruction paired with a trajectory in a given epoch.
pub trait InstructionSource {
    fn instruction(&self, trajectory_id: &str, epoch: usize) -> Result<String, PolicyError>;
}

/// The same instruction every epoch, e.g. each trajectory's canonical one.
#[derive(Debug, Clone, Default)]
pub struct FixedInstruction {
    by_id: BTreeMap<String, String>,
}

impl FixedInstruction {
    pub fn new(by_id: BTreeMap<String, String>) -> Self {
        Self { by_id }
    }

    /// Canonical instruction from each trajectory's metadata.
    pub fn canonical<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Result<Self, PolicyError> {
        let mut by_id = BTreeMap::new();
        for t in trajs {
            let text = t
                .canonical_instruction()
                .ok_or_else(|| PolicyError::Instruction(format!("{} has no canonical instruction", t.id)))?;
            by_id.insert(t.id.clone(), text.to_string());
        }
        Ok(Self { by_id })
    }
}

impl InstructionSource for FixedInstruction {
    fn instruction(&self, trajectory_id: &str, _epoch: usize) -> Result<String, PolicyError> {
        self.by_id
            .get(trajectory_id)
            .cloned()
            .ok_or_else(|| PolicyError::Instruction(format!("no instruction for {trajectory_id}")))
    }
}

/// One step of one trajectory, with the image already cut into patches.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub trajectory_id: String,
    pub step: usize,
    pub patches: Matrix,
    pub targets: [u32; ACTION_DIM],
}

impl TrainItem {
    pub fn from_trajectories(
        model: &PolicyModel,
        trajs: &[&Trajectory],
        stats: &NormalizationStats,
    ) -> Result<Vec<TrainItem>, PolicyError> {
        let map = model.config().token_map();
        let mut out = Vec::new();
        for t in trajs {
            for (step, f) in t.frames.iter().enumerate() {
                out.push(TrainItem {
                    trajectory_id: t.id.clone(),
                    step,
                    patches: extract_patches(&f.observation, model.config())?,
                    targets: bins_to_tokens(&encode(&f.action, stats), &map),
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            rank: 32,
            alpha: 64.0,
        }
    }
}

/// Full-parameter fit of the base on fixed instructions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, weight_decay: 0.0, epochs: 60, batch_size: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutcome {
    pub curve: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|r| r.loss)
    }

    /// `epoch,loss` with a header line; losses printed with full precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for r in &self.curve {
            s.push_str(&format!("{},{:?}\n", r.epoch, r.loss));
        }
        s
    }
}

struct LoopSpec {
    opt: AdamWConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    mode: GradMode,
}

fn check_hyper(lr: f64, wd: f64, batch_size: usize) -> Result<(), PolicyError> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(PolicyError::Config(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    if !(wd.is_finite() && wd >= 0.0) {
        return Err(PolicyError::Config(format!("weight decay must be finite and non-negative, got {wd}")));
    }
    if batch_size == 0 {
        return Err(PolicyError::Config("batch size must be positive".into()));
    }
    Ok(())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn run_loop(
    model: &mut PolicyModel,
    items: &[TrainItem],
    source: &dyn InstructionSource,
    spec: LoopSpec,
) -> Result<TrainOutcome, PolicyError> {
    if items.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut opt = AdamW::new(spec.opt);
    let mut curve = Vec::with_capacity(spec.epochs);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..spec.epochs {
        let mut instructions: BTreeMap<&str, String> = BTreeMap::new();
        for it in items {
            if !instructions.contains_key(it.trajectory_id.as_str()) {
                instructions.insert(&it.trajectory_id, source.instruction(&it.trajectory_id, epoch)?);
            }
        }
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(spec.seed, epoch));

        let mut total = 0.0;
        for (step, chunk) in order.chunks(spec.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let it = &items[i];
                    model.assemble_with_patches(
                        it.patches.clone(),
                        &instructions[it.trajectory_id.as_str()],
                        Some(it.targets),
                    )
                })
                .collect::<Result<Vec<AssembledSequence>, _>>()?;
            let (loss, grads) = model.loss_and_grads(&batch, spec.mode)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(PolicyError::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!(
                        "loss {loss}, lr {}, batch of {} from {}",
                        spec.opt.lr,
                        batch.len(),
                        items[chunk[0]].trajectory_id
                    ),
                });
            }
            total += loss * batch.len() as f64;
            let g = grads.tensors();
            opt.step(model.trainable_mut(spec.mode), &g);
        }
        let loss = total / items.len() as f64;
        log::debug!("epoch {epoch}: loss {loss:.5}");
        curve.push(EpochRecord { epoch, loss });
    }
    Ok(TrainOutcome { curve })
}

/// Fit every base weight. The model must not carry adapters.
pub fn pretrain(
    model: &mut PolicyModel,
    items: &[TrainItem],
    source: &dyn InstructionSource,
    cfg: &PretrainConfig,
) -> Result<TrainOutcome, PolicyError> {
    check_hyper(cfg.learning_rate, cfg.weight_decay, cfg.batch_size)?;
    if model.has_adapters() {
        return Err(PolicyError::AdaptersPresent);
    }
    let opt = AdamWConfig { lr: cfg.learning_rate, weight_decay: cfg.weight_decay, ..Default::default() };
    let spec = LoopSpec { opt, epochs: cfg.epochs, batch_size: cfg.batch_size, seed: cfg.seed, mode: GradMode::Full };
    run_loop(model, items, source, spec)
}

/// LoRA fine-tuning. Adapters are attached (seeded by `cfg.seed`) if the
/// model has none; base weights are never touched.
pub fn train(
    model: &mut PolicyModel,
    items: &[TrainItem],
    source: &dyn InstructionSource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, PolicyError> {
    check_hyper(cfg.learning_rate, cfg.weight_decay, cfg.batch_size)?;
    if !model.has_adapters() {
        model.attach_adapters(cfg.rank, cfg.alpha, cfg.seed)?;
    }
    let opt = AdamWConfig {
        lr: cfg.learning_rate,
        beta1: cfg.betas.0,
        beta2: cfg.betas.1,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let spec =
        LoopSpec { opt, epochs: cfg.epochs, batch_size: cfg.batch_size, seed: cfg.seed, mode: GradMode::AdaptersOnly };
    run_loop(model, items, source, spec)
}
