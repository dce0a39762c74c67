//! Decoder-only transformer over patch, instruction, and action-slot
//! tokens with hand-written backpropagation.
//!
//! Pre-norm blocks: `x + Attn(LN(x))`, then `+ FFN(LN(x))`. Attention is
//! causal and runs per sequence inside a batch; every other op works on the
//! batch's rows stacked into one matrix. The output head is tied to the
//! token embedding table and is only evaluated at the seven action slots.

use ndarray::{s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::sequence::{self, AssembledSequence, TrainingExample};
use super::{PolicyConfig, PolicyError, Tokenizer};
use crate::action::{tokens_to_bins, BinVector, ACTION_DIM, NUM_BINS};
use crate::dataset::Observation;
use crate::lora::{AdapterGrads, LoraAdapter};
use crate::tensor::{self, randn, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
/// Row norm of the initial action-token embeddings. These rows only feed
/// the tied output head, so a larger norm buys sharper bin logits.
const ACTION_EMBED_NORM: f64 = 4.0;

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Every base weight; the model must not carry adapters.
    Full,
    /// Only the LoRA factors; the model must carry adapters.
    AdaptersOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

struct NormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self { gamma: Matrix::ones((1, d)), beta: Matrix::zeros((1, d)) }
    }

    fn forward(&self, x: &Matrix) -> (Matrix, NormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row *= inv;
            inv_std.push(inv);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, NormCache { xhat, inv_std })
    }

    fn backward(&self, cache: &NormCache, dy: &Matrix, want_params: bool) -> (Matrix, Option<NormGrads>) {
        let d = dy.ncols() as f64;
        let mut dx = dy * &self.gamma;
        for ((mut row, xhat), &inv) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xhat.iter()).map(|(g, x)| g * x).sum::<f64>() / d;
            row.zip_mut_with(&xhat, |g, &x| *g = inv * (*g - mean_g - x * mean_gx));
        }
        let grads = want_params.then(|| NormGrads {
            gamma: (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
            beta: dy.sum_axis(Axis(0)).insert_axis(Axis(0)),
        });
        (dx, grads)
    }
}

/// An attention projection: a plain weight while the base is trained, a
/// LoRA-wrapped frozen weight afterwards.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Dense(Matrix),
    Adapted(LoraAdapter),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProjectionGrads {
    Dense(Matrix),
    Adapter(AdapterGrads),
    Frozen,
}

impl Projection {
    pub fn base(&self) -> &Matrix {
        match self {
            Projection::Dense(w) => w,
            Projection::Adapted(ad) => ad.base(),
        }
    }

    pub fn adapter(&self) -> Option<&LoraAdapter> {
        match self {
            Projection::Adapted(ad) => Some(ad),
            Projection::Dense(_) => None,
        }
    }

    fn forward(&self, x: &Matrix) -> (Matrix, Option<Matrix>) {
        match self {
            Projection::Dense(w) => (x.dot(&w.t()), None),
            Projection::Adapted(ad) => {
                let (y, xa) = ad.forward_with_hidden(x.view());
                (y, Some(xa))
            }
        }
    }

    fn backward(&self, x: &Matrix, xa: Option<&Matrix>, dy: &Matrix, mode: GradMode) -> (ProjectionGrads, Matrix) {
        match self {
            Projection::Dense(w) => {
                let grad = match mode {
                    GradMode::Full => ProjectionGrads::Dense(dy.t().dot(x)),
                    GradMode::AdaptersOnly => ProjectionGrads::Frozen,
                };
                (grad, dy.dot(w))
            }
            Projection::Adapted(ad) => {
                let xa = xa.expect("adapter forward keeps x·Aᵀ");
                let (g, dx) = ad.backward_with_hidden(x.view(), xa.view(), dy.view());
                (ProjectionGrads::Adapter(g), dx)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
    pub norm2: LayerNorm,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Block {
    pub fn projections(&self) -> [(&'static str, &Projection); 4] {
        [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)]
    }

    fn projections_mut(&mut self) -> [&mut Projection; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub patch_w: Matrix,
    pub patch_b: Matrix,
    /// Shared by the input embedding and the output head.
    pub tokens: Matrix,
    pub positions: Matrix,
    pub action_slots: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub patch_w: Matrix,
    pub patch_b: Matrix,
    pub tokens: Matrix,
    pub positions: Matrix,
    pub action_slots: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardGrads {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub norm1: Option<NormGrads>,
    pub q: ProjectionGrads,
    pub k: ProjectionGrads,
    pub v: ProjectionGrads,
    pub o: ProjectionGrads,
    pub norm2: Option<NormGrads>,
    pub ff: Option<FeedForwardGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub embeddings: Option<EmbeddingGrads>,
    pub blocks: Vec<BlockGrads>,
    pub final_norm: Option<NormGrads>,
}

impl ModelGrads {
    /// Gradient tensors in the order of [`PolicyModel::trainable_mut`].
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        if let Some(e) = &self.embeddings {
            out.extend([&e.patch_w, &e.patch_b, &e.tokens, &e.positions, &e.action_slots]);
        }
        for b in &self.blocks {
            if let Some(n) = &b.norm1 {
                out.extend([&n.gamma, &n.beta]);
            }
            for p in [&b.q, &b.k, &b.v, &b.o] {
                match p {
                    ProjectionGrads::Dense(w) => out.push(w),
                    ProjectionGrads::Adapter(g) => out.extend([&g.da, &g.db]),
                    ProjectionGrads::Frozen => {}
                }
            }
            if let Some(n) = &b.norm2 {
                out.extend([&n.gamma, &n.beta]);
            }
            if let Some(f) = &b.ff {
                out.extend([&f.w1, &f.b1, &f.w2, &f.b2]);
            }
        }
        if let Some(n) = &self.final_norm {
            out.extend([&n.gamma, &n.beta]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

struct BatchLayout {
    offsets: Vec<usize>,
    lens: Vec<usize>,
    total: usize,
}

impl BatchLayout {
    fn new(batch: &[AssembledSequence]) -> Self {
        let mut offsets = Vec::with_capacity(batch.len());
        let mut lens = Vec::with_capacity(batch.len());
        let mut total = 0;
        for seq in batch {
            offsets.push(total);
            lens.push(seq.len());
            total += seq.len();
        }
        Self { offsets, lens, total }
    }

    fn action_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.offsets.iter().zip(&self.lens).flat_map(|(&o, &t)| (o + t - ACTION_DIM)..(o + t))
    }
}

struct BlockTape {
    n1: NormCache,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    xa: [Option<Matrix>; 4],
    probs: Vec<Matrix>,
    ctx: Matrix,
    n2: NormCache,
    h2: Matrix,
    u: Matrix,
    g: Matrix,
}

struct Tape {
    patches: Matrix,
    blocks: Vec<BlockTape>,
    final_norm: NormCache,
    hidden: Matrix,
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn causal_softmax_rows(scores: &mut Matrix) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let visible = row.slice(s![..=i]);
        let max = visible.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row /= sum;
    }
}

/// Smooth initial embeddings for the action tokens: nearby bins start with
/// similar vectors so tolerance errors are cheaper than distant ones.
fn action_token_init(d: usize) -> Matrix {
    let half = d / 2;
    let lowest = 2.0 * std::f64::consts::PI / 1024.0;
    let norm = (half as f64).sqrt() / ACTION_EMBED_NORM;
    Matrix::from_shape_fn((NUM_BINS, d), |(bin, c)| {
        let j = (c / 2).min(half.saturating_sub(1));
        let freq = if half > 1 { lowest.powf(j as f64 / (half - 1) as f64) } else { lowest };
        let phase = bin as f64 * freq;
        let v = if c % 2 == 0 { phase.sin() } else { phase.cos() };
        v / norm
    })
}

fn sinusoidal_positions(n: usize, d: usize, scale: f64) -> Matrix {
    Matrix::from_shape_fn((n, d), |(pos, c)| {
        let i = (c / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * i / d as f64);
        scale * if c % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    cfg: PolicyConfig,
    tokenizer: Tokenizer,
    pub(crate) embeddings: Embeddings,
    pub(crate) blocks: Vec<Block>,
    pub(crate) final_norm: LayerNorm,
}

impl PartialEq for PolicyModel {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg
            && self.embeddings == other.embeddings
            && self.blocks == other.blocks
            && self.final_norm == other.final_norm
    }
}

impl PolicyModel {
    /// Randomly initialized base without adapters.
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let pp = cfg.patch_size * cfg.patch_size;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let residual_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();

        let mut tokens = randn(&mut rng, (cfg.vocab_size(), d), inv_sqrt_d);
        tokens.slice_mut(s![cfg.base_vocab.., ..]).assign(&action_token_init(d));
        let embeddings = Embeddings {
            patch_w: randn(&mut rng, (d, pp), 1.0 / (pp as f64).sqrt()),
            patch_b: Matrix::zeros((1, d)),
            tokens,
            positions: sinusoidal_positions(cfg.max_seq_len(), d, 0.2),
            action_slots: randn(&mut rng, (ACTION_DIM, d), inv_sqrt_d),
        };
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                norm1: LayerNorm::new(d),
                q: Projection::Dense(randn(&mut rng, (d, d), inv_sqrt_d)),
                k: Projection::Dense(randn(&mut rng, (d, d), inv_sqrt_d)),
                v: Projection::Dense(randn(&mut rng, (d, d), inv_sqrt_d)),
                o: Projection::Dense(randn(&mut rng, (d, d), inv_sqrt_d * residual_scale)),
                norm2: LayerNorm::new(d),
                w1: randn(&mut rng, (cfg.d_ff, d), inv_sqrt_d),
                b1: Matrix::zeros((1, cfg.d_ff)),
                w2: randn(&mut rng, (d, cfg.d_ff), residual_scale / (cfg.d_ff as f64).sqrt()),
                b2: Matrix::zeros((1, d)),
            })
            .collect();
        Ok(Self { tokenizer: Tokenizer::new(cfg.base_vocab), cfg, embeddings, blocks, final_norm: LayerNorm::new(d) })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn embeddings(&self) -> &Embeddings {
        &self.embeddings
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks.iter().any(|b| b.projections().iter().any(|(_, p)| p.adapter().is_some()))
    }

    /// Wrap Q, K, V and O of every layer with its own adapter. Each
    /// adapter's `A` is drawn from a seed derived from `(seed, layer, slot)`.
    pub fn attach_adapters(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<(), PolicyError> {
        if self.has_adapters() {
            return Err(PolicyError::AdaptersPresent);
        }
        for (layer, block) in self.blocks.iter_mut().enumerate() {
            for (slot, proj) in block.projections_mut().into_iter().enumerate() {
                let Projection::Dense(w) = proj else { unreachable!("checked above") };
                let sub_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((layer * 4 + slot) as u64 + 1);
                let adapter = LoraAdapter::init(w.clone(), rank, alpha, sub_seed)?;
                *proj = Projection::Adapted(adapter);
            }
        }
        Ok(())
    }

    /// Fold every adapter into its base weight.
    pub fn merge_adapters(&mut self) {
        for block in &mut self.blocks {
            for proj in block.projections_mut() {
                if let Projection::Adapted(ad) = proj {
                    *proj = Projection::Dense(ad.merge());
                }
            }
        }
    }

    pub fn adapters(&self) -> Vec<(String, &LoraAdapter)> {
        let mut out = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            for (name, p) in block.projections() {
                if let Some(ad) = p.adapter() {
                    out.push((format!("blocks.{l}.attn.{name}"), ad));
                }
            }
        }
        out
    }

    /// Every weight that is not a LoRA factor, by stable name. For adapted
    /// projections this is the frozen `W0`.
    pub fn named_base_tensors(&self) -> Vec<(String, &Matrix)> {
        let e = &self.embeddings;
        let mut out = vec![
            ("embed.patch_w".to_string(), &e.patch_w),
            ("embed.patch_b".to_string(), &e.patch_b),
            ("embed.tokens".to_string(), &e.tokens),
            ("embed.positions".to_string(), &e.positions),
            ("embed.action_slots".to_string(), &e.action_slots),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.norm1.gamma"), &b.norm1.gamma));
            out.push((format!("blocks.{l}.norm1.beta"), &b.norm1.beta));
            for (name, p) in b.projections() {
                out.push((format!("blocks.{l}.attn.{name}"), p.base()));
            }
            out.push((format!("blocks.{l}.norm2.gamma"), &b.norm2.gamma));
            out.push((format!("blocks.{l}.norm2.beta"), &b.norm2.beta));
            out.push((format!("blocks.{l}.ff.w1"), &b.w1));
            out.push((format!("blocks.{l}.ff.b1"), &b.b1));
            out.push((format!("blocks.{l}.ff.w2"), &b.w2));
            out.push((format!("blocks.{l}.ff.b2"), &b.b2));
        }
        out.push(("final_norm.gamma".to_string(), &self.final_norm.gamma));
        out.push(("final_norm.beta".to_string(), &self.final_norm.beta));
        out
    }

    /// Mutable view of the same tensors as [`Self::named_base_tensors`];
    /// only valid before adapters are attached.
    pub(crate) fn named_base_tensors_mut(&mut self) -> Result<Vec<(String, &mut Matrix)>, PolicyError> {
        if self.has_adapters() {
            return Err(PolicyError::AdaptersPresent);
        }
        let e = &mut self.embeddings;
        let mut out = vec![
            ("embed.patch_w".to_string(), &mut e.patch_w),
            ("embed.patch_b".to_string(), &mut e.patch_b),
            ("embed.tokens".to_string(), &mut e.tokens),
            ("embed.positions".to_string(), &mut e.positions),
            ("embed.action_slots".to_string(), &mut e.action_slots),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{l}.norm1.gamma"), &mut b.norm1.gamma));
            out.push((format!("blocks.{l}.norm1.beta"), &mut b.norm1.beta));
            for (name, p) in ["q", "k", "v", "o"].into_iter().zip([&mut b.q, &mut b.k, &mut b.v, &mut b.o]) {
                if let Projection::Dense(w) = p {
                    out.push((format!("blocks.{l}.attn.{name}"), w));
                }
            }
            out.push((format!("blocks.{l}.norm2.gamma"), &mut b.norm2.gamma));
            out.push((format!("blocks.{l}.norm2.beta"), &mut b.norm2.beta));
            out.push((format!("blocks.{l}.ff.w1"), &mut b.w1));
            out.push((format!("blocks.{l}.ff.b1"), &mut b.b1));
            out.push((format!("blocks.{l}.ff.w2"), &mut b.w2));
            out.push((format!("blocks.{l}.ff.b2"), &mut b.b2));
        }
        out.push(("final_norm.gamma".to_string(), &mut self.final_norm.gamma));
        out.push(("final_norm.beta".to_string(), &mut self.final_norm.beta));
        Ok(out)
    }

    /// Wrap one named projection (`blocks.{l}.attn.{q|k|v|o}`) with an
    /// adapter built from its current weight.
    pub(crate) fn wrap_projection(
        &mut self,
        name: &str,
        build: impl FnOnce(Matrix) -> Result<LoraAdapter, PolicyError>,
    ) -> Result<(), PolicyError> {
        let bad = || PolicyError::Checkpoint(format!("unknown projection {name}"));
        let rest = name.strip_prefix("blocks.").ok_or_else(bad)?;
        let (layer, slot) = rest.split_once(".attn.").ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        let block = self.blocks.get_mut(layer).ok_or_else(bad)?;
        let proj = match slot {
            "q" => &mut block.q,
            "k" => &mut block.k,
            "v" => &mut block.v,
            "o" => &mut block.o,
            _ => return Err(bad()),
        };
        let Projection::Dense(w) = proj else {
            return Err(PolicyError::Checkpoint(format!("{name} already adapted")));
        };
        *proj = Projection::Adapted(build(w.clone())?);
        Ok(())
    }

    /// SHA-256 over the exact bits of every base tensor.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.named_base_tensors() {
            h.update(name.as_bytes());
            tensor::hash_matrix(&mut h, m);
        }
        hex::encode(h.finalize())
    }

    /// Trainable tensors for `mode`, in the order of [`ModelGrads::tensors`].
    pub fn trainable_mut(&mut self, mode: GradMode) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        let full = mode == GradMode::Full;
        if full {
            let e = &mut self.embeddings;
            out.extend([&mut e.patch_w, &mut e.patch_b, &mut e.tokens, &mut e.positions, &mut e.action_slots]);
        }
        for b in &mut self.blocks {
            if full {
                out.extend([&mut b.norm1.gamma, &mut b.norm1.beta]);
            }
            for p in [&mut b.q, &mut b.k, &mut b.v, &mut b.o] {
                match p {
                    Projection::Dense(w) if full => out.push(w),
                    Projection::Adapted(ad) if !full => {
                        let (a, bm) = ad.factors_mut();
                        out.extend([a, bm]);
                    }
                    _ => {}
                }
            }
            if full {
                out.extend([&mut b.norm2.gamma, &mut b.norm2.beta]);
                out.extend([&mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
            }
        }
        if full {
            out.extend([&mut self.final_norm.gamma, &mut self.final_norm.beta]);
        }
        out
    }

    fn check_mode(&self, mode: GradMode) -> Result<(), PolicyError> {
        match (mode, self.has_adapters()) {
            (GradMode::Full, true) => Err(PolicyError::AdaptersPresent),
            (GradMode::AdaptersOnly, false) => Err(PolicyError::AdaptersMissing),
            _ => Ok(()),
        }
    }

    pub fn assemble(&self, ex: &TrainingExample) -> Result<AssembledSequence, PolicyError> {
        let patches = sequence::extract_patches(&ex.observation, &self.cfg)?;
        sequence::assemble(&self.tokenizer, &self.cfg, patches, &ex.instruction, Some(ex.target_tokens))
    }

    /// Assemble from pre-extracted patches (see [`sequence::extract_patches`]).
    pub fn assemble_with_patches(
        &self,
        patches: Matrix,
        instruction: &str,
        targets: Option<[u32; ACTION_DIM]>,
    ) -> Result<AssembledSequence, PolicyError> {
        sequence::assemble(&self.tokenizer, &self.cfg, patches, instruction, targets)
    }

    pub fn assemble_query(&self, obs: &Observation, instruction: &str) -> Result<AssembledSequence, PolicyError> {
        let patches = sequence::extract_patches(obs, &self.cfg)?;
        sequence::assemble(&self.tokenizer, &self.cfg, patches, instruction, None)
    }

    fn validate_batch(&self, batch: &[AssembledSequence], need_targets: bool) -> Result<(), PolicyError> {
        if batch.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let pp = self.cfg.patch_size * self.cfg.patch_size;
        for seq in batch {
            if seq.patches.dim() != (self.cfg.n_patches(), pp) {
                return Err(PolicyError::Resolution {
                    expected: self.cfg.image_size,
                    width: seq.patches.nrows(),
                    height: seq.patches.ncols(),
                });
            }
            if seq.instruction_ids.is_empty() {
                return Err(PolicyError::EmptyInstruction);
            }
            if seq.instruction_ids.len() > self.cfg.max_instruction_tokens {
                return Err(PolicyError::InstructionTooLong(seq.instruction_ids.len()));
            }
            let vocab = self.cfg.vocab_size() as u32;
            if let Some(&bad) = seq.instruction_ids.iter().find(|&&id| id >= vocab) {
                return Err(PolicyError::TargetOutOfVocab(bad));
            }
            match (&seq.targets, need_targets) {
                (None, true) => return Err(PolicyError::MissingTargets),
                (Some(t), _) => {
                    if let Some(&bad) = t.iter().find(|&&id| id >= vocab) {
                        return Err(PolicyError::TargetOutOfVocab(bad));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn embed(&self, batch: &[AssembledSequence], layout: &BatchLayout) -> (Matrix, Matrix) {
        let np = self.cfg.n_patches();
        let pp = self.cfg.patch_size * self.cfg.patch_size;
        let mut patches = Matrix::zeros((batch.len() * np, pp));
        for (i, seq) in batch.iter().enumerate() {
            patches.slice_mut(s![i * np..(i + 1) * np, ..]).assign(&seq.patches);
        }
        let e = &self.embeddings;
        let projected = patches.dot(&e.patch_w.t()) + &e.patch_b;
        let mut x = Matrix::zeros((layout.total, self.cfg.d_model));
        for (i, seq) in batch.iter().enumerate() {
            let o = layout.offsets[i];
            x.slice_mut(s![o..o + np, ..]).assign(&projected.slice(s![i * np..(i + 1) * np, ..]));
            for (j, &id) in seq.instruction_ids.iter().enumerate() {
                x.row_mut(o + np + j).assign(&e.tokens.row(id as usize));
            }
            let slot0 = o + np + seq.instruction_ids.len();
            x.slice_mut(s![slot0..slot0 + ACTION_DIM, ..]).assign(&e.action_slots);
            let mut rows = x.slice_mut(s![o..o + layout.lens[i], ..]);
            rows += &e.positions.slice(s![..layout.lens[i], ..]);
        }
        (x, patches)
    }

    fn attention(&self, q: &Matrix, k: &Matrix, v: &Matrix, layout: &BatchLayout, keep: bool) -> (Matrix, Vec<Matrix>) {
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Matrix::zeros(q.dim());
        let mut probs = Vec::new();
        for (&o, &t) in layout.offsets.iter().zip(&layout.lens) {
            for h in 0..self.cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qv = q.slice(s![o..o + t, cols.clone()]);
                let kv = k.slice(s![o..o + t, cols.clone()]);
                let vv = v.slice(s![o..o + t, cols.clone()]);
                let mut scores = qv.dot(&kv.t());
                scores *= scale;
                causal_softmax_rows(&mut scores);
                ctx.slice_mut(s![o..o + t, cols]).assign(&scores.dot(&vv));
                if keep {
                    probs.push(scores);
                }
            }
        }
        (ctx, probs)
    }

    fn attention_backward(&self, tape: &BlockTape, dctx: &Matrix, layout: &BatchLayout) -> (Matrix, Matrix, Matrix) {
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (mut dq, mut dk, mut dv) =
            (Matrix::zeros(dctx.dim()), Matrix::zeros(dctx.dim()), Matrix::zeros(dctx.dim()));
        let mut probs = tape.probs.iter();
        for (&o, &t) in layout.offsets.iter().zip(&layout.lens) {
            for h in 0..self.cfg.n_heads {
                let p = probs.next().expect("one probability matrix per sequence and head");
                let cols = h * dh..(h + 1) * dh;
                let rows = o..o + t;
                let qv = tape.q.slice(s![rows.clone(), cols.clone()]);
                let kv = tape.k.slice(s![rows.clone(), cols.clone()]);
                let vv = tape.v.slice(s![rows.clone(), cols.clone()]);
                let dc = dctx.slice(s![rows.clone(), cols.clone()]);
                let mut ds = dc.dot(&vv.t());
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dc));
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                    drow.zip_mut_with(&prow, |d, &pv| *d = pv * (*d - dot) * scale);
                }
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kv));
                dk.slice_mut(s![rows, cols]).assign(&ds.t().dot(&qv));
            }
        }
        (dq, dk, dv)
    }

    fn block_forward(&self, block: &Block, x: Matrix, layout: &BatchLayout, keep: bool) -> (Matrix, Option<BlockTape>) {
        let (h1, n1) = block.norm1.forward(&x);
        let (q, xa_q) = block.q.forward(&h1);
        let (k, xa_k) = block.k.forward(&h1);
        let (v, xa_v) = block.v.forward(&h1);
        let (ctx, probs) = self.attention(&q, &k, &v, layout, keep);
        let (att, xa_o) = block.o.forward(&ctx);
        let x2 = x + &att;
        let (h2, n2) = block.norm2.forward(&x2);
        let u = h2.dot(&block.w1.t()) + &block.b1;
        let g = u.mapv(gelu);
        let f = g.dot(&block.w2.t()) + &block.b2;
        let out = x2 + &f;
        let tape = keep.then(|| BlockTape { n1, h1, q, k, v, xa: [xa_q, xa_k, xa_v, xa_o], probs, ctx, n2, h2, u, g });
        (out, tape)
    }

    fn block_backward(
        &self,
        block: &Block,
        tape: &BlockTape,
        dout: Matrix,
        layout: &BatchLayout,
        mode: GradMode,
    ) -> (Matrix, BlockGrads) {
        let full = mode == GradMode::Full;
        let mut du = dout.dot(&block.w2);
        du.zip_mut_with(&tape.u, |d, &u| *d *= gelu_grad(u));
        let ff = full.then(|| FeedForwardGrads {
            w2: dout.t().dot(&tape.g),
            b2: dout.sum_axis(Axis(0)).insert_axis(Axis(0)),
            w1: du.t().dot(&tape.h2),
            b1: du.sum_axis(Axis(0)).insert_axis(Axis(0)),
        });
        let dh2 = du.dot(&block.w1);
        let (dn2, norm2) = block.norm2.backward(&tape.n2, &dh2, full);
        let dx2 = dout + &dn2;

        let (o, dctx) = block.o.backward(&tape.ctx, tape.xa[3].as_ref(), &dx2, mode);
        let (dq, dk, dv) = self.attention_backward(tape, &dctx, layout);
        let (q, mut dh1) = block.q.backward(&tape.h1, tape.xa[0].as_ref(), &dq, mode);
        let (k, dh1_k) = block.k.backward(&tape.h1, tape.xa[1].as_ref(), &dk, mode);
        let (v, dh1_v) = block.v.backward(&tape.h1, tape.xa[2].as_ref(), &dv, mode);
        dh1 += &dh1_k;
        dh1 += &dh1_v;
        let (dn1, norm1) = block.norm1.backward(&tape.n1, &dh1, full);
        (dx2 + &dn1, BlockGrads { norm1, q, k, v, o, norm2, ff })
    }

    /// Final-norm hidden states at the action slots (`7·B × d`).
    fn forward(&self, batch: &[AssembledSequence], keep: bool) -> (Matrix, BatchLayout, Option<Tape>) {
        let layout = BatchLayout::new(batch);
        let (mut x, patches) = self.embed(batch, &layout);
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, tape) = self.block_forward(block, x, &layout, keep);
            x = next;
            tapes.extend(tape);
        }
        let rows: Vec<usize> = layout.action_rows().collect();
        let at_slots = x.select(Axis(0), &rows);
        let (hidden, final_norm) = self.final_norm.forward(&at_slots);
        let tape = keep.then(|| Tape { patches, blocks: tapes, final_norm, hidden: hidden.clone() });
        (hidden, layout, tape)
    }

    /// Logits over the full vocabulary at every action slot, one row per
    /// `(sequence, dimension)` pair in batch order.
    pub fn action_logits(&self, batch: &[AssembledSequence]) -> Result<Matrix, PolicyError> {
        self.validate_batch(batch, false)?;
        let (hidden, _, _) = self.forward(batch, false);
        Ok(hidden.dot(&self.embeddings.tokens.t()))
    }

    /// Mean cross-entropy over the action slots of the batch.
    pub fn loss(&self, batch: &[AssembledSequence]) -> Result<f64, PolicyError> {
        let logits = self.action_logits(batch)?;
        let targets = flat_targets(batch)?;
        Ok(cross_entropy(&logits, &targets, false).0)
    }

    /// Mean cross-entropy plus gradients of the parameters selected by `mode`.
    pub fn loss_and_grads(
        &self,
        batch: &[AssembledSequence],
        mode: GradMode,
    ) -> Result<(f64, ModelGrads), PolicyError> {
        self.check_mode(mode)?;
        self.validate_batch(batch, true)?;
        let targets = flat_targets(batch)?;
        let (hidden, layout, tape) = self.forward(batch, true);
        let tape = tape.expect("forward keeps a tape when asked");
        let tokens = &self.embeddings.tokens;
        let logits = hidden.dot(&tokens.t());
        let (loss, dlogits) = cross_entropy(&logits, &targets, true);
        let dlogits = dlogits.expect("gradient requested");
        let full = mode == GradMode::Full;

        let dhidden = dlogits.dot(tokens);
        let mut dtokens = full.then(|| dlogits.t().dot(&tape.hidden));
        let (dslots, final_norm) = self.final_norm.backward(&tape.final_norm, &dhidden, full);

        let mut dx = Matrix::zeros((layout.total, self.cfg.d_model));
        for (r, row) in layout.action_rows().zip(dslots.rows()) {
            dx.row_mut(r).assign(&row);
        }
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, btape) in self.blocks.iter().zip(&tape.blocks).rev() {
            let (dprev, g) = self.block_backward(block, btape, dx, &layout, mode);
            dx = dprev;
            block_grads.push(g);
        }
        block_grads.reverse();

        let embeddings = if full {
            let np = self.cfg.n_patches();
            let e = &self.embeddings;
            let mut dpatch_rows = Matrix::zeros((batch.len() * np, self.cfg.d_model));
            let mut dpositions = Matrix::zeros(e.positions.dim());
            let mut dslots_emb = Matrix::zeros(e.action_slots.dim());
            let dtok = dtokens.as_mut().expect("full mode");
            for (i, seq) in batch.iter().enumerate() {
                let (o, t) = (layout.offsets[i], layout.lens[i]);
                let rows = dx.slice(s![o..o + t, ..]);
                dpositions.slice_mut(s![..t, ..]).scaled_add(1.0, &rows);
                dpatch_rows.slice_mut(s![i * np..(i + 1) * np, ..]).assign(&rows.slice(s![..np, ..]));
                for (j, &id) in seq.instruction_ids.iter().enumerate() {
                    let mut trow = dtok.row_mut(id as usize);
                    trow += &rows.row(np + j);
                }
                let slot0 = np + seq.instruction_ids.len();
                dslots_emb += &rows.slice(s![slot0..slot0 + ACTION_DIM, ..]);
            }
            Some(EmbeddingGrads {
                patch_w: dpatch_rows.t().dot(&tape.patches),
                patch_b: dpatch_rows.sum_axis(Axis(0)).insert_axis(Axis(0)),
                tokens: dtokens.take().expect("full mode"),
                positions: dpositions,
                action_slots: dslots_emb,
            })
        } else {
            None
        };
        Ok((loss, ModelGrads { embeddings, blocks: block_grads, final_norm }))
    }

    /// Greedy decode restricted to the reserved action tokens; ties go to
    /// the lower token ID.
    pub fn predict_batch(&self, batch: &[AssembledSequence]) -> Result<Vec<BinVector>, PolicyError> {
        let logits = self.action_logits(batch)?;
        let map = self.cfg.token_map();
        let offset = map.offset() as usize;
        let mut out = Vec::with_capacity(batch.len());
        for chunk in logits.axis_chunks_iter(Axis(0), ACTION_DIM) {
            let mut ids = [0u32; ACTION_DIM];
            for (d, row) in chunk.rows().into_iter().enumerate() {
                let reserved = row.slice(s![offset..offset + NUM_BINS]);
                let mut best = 0;
                for (i, &v) in reserved.iter().enumerate() {
                    if v > reserved[best] {
                        best = i;
                    }
                }
                ids[d] = (offset + best) as u32;
            }
            out.push(tokens_to_bins(&ids, &map)?);
        }
        Ok(out)
    }

    pub fn predict(&self, obs: &Observation, instruction: &str) -> Result<BinVector, PolicyError> {
        let seq = self.assemble_query(obs, instruction)?;
        Ok(self.predict_batch(std::slice::from_ref(&seq))?[0])
    }
}

fn flat_targets(batch: &[AssembledSequence]) -> Result<Vec<usize>, PolicyError> {
    let mut out = Vec::with_capacity(batch.len() * ACTION_DIM);
    for seq in batch {
        let t = seq.targets.ok_or(PolicyError::MissingTargets)?;
        out.extend(t.iter().map(|&id| id as usize));
    }
    Ok(out)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax, and
/// optionally its gradient with respect to the logits.
fn cross_entropy(logits: &Matrix, targets: &[usize], want_grad: bool) -> (f64, Option<Matrix>) {
    let m = logits.nrows() as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Matrix::zeros(logits.dim()));
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[targets[i]];
        if let Some(g) = grad.as_mut() {
            let mut grow = g.row_mut(i);
            grow.zip_mut_with(&row, |gv, &v| *gv = (v - lse).exp() / m);
            grow[targets[i]] -= 1.0 / m;
        }
    }
    (total / m, grad)
}
