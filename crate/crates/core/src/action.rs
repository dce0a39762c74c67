//! Continuous 7-DoF actions, their normalization into `[-1, 1]`, uniform
//! 256-bin quantization, and the mapping from bins onto reserved vocabulary
//! token IDs.
//!
//! Dimension order is fixed everywhere: `dx, dy, dz, droll, dpitch, dyaw,
//! gripper`.

use serde::{Deserialize, Serialize};

/// Number of action dimensions.
pub const ACTION_DIM: usize = 7;
/// Number of discrete bins per dimension (and reserved action tokens).
pub const NUM_BINS: usize = 256;
/// Width of one bin in normalized space.
pub const BIN_WIDTH: f64 = 2.0 / NUM_BINS as f64;

/// Half-width used when a dimension has zero spread in the fitted sample.
const DEGENERATE_WIDENING: f64 = 1e-6;
const LOWER_PERCENTILE: usize = 1;
const UPPER_PERCENTILE: usize = 99;

pub const DIMENSION_NAMES: [&str; ACTION_DIM] = ["dx", "dy", "dz", "droll", "dpitch", "dyaw", "gripper"];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CodecError {
    #[error("no actions")]
    NoActions,
    #[error("invalid action: dimension {dim} is {value}")]
    InvalidAction { dim: usize, value: f64 },
    #[error("invalid normalization stats: dimension {dim} has lo {lo} >= hi {hi}")]
    InvalidStats { dim: usize, lo: f64, hi: f64 },
    #[error("normalized value {value} in dimension {dim} is outside [-1, 1]")]
    OutOfRange { dim: usize, value: f64 },
    #[error("not an action token: {0}")]
    NotActionToken(u32),
    #[error("reserved range [{offset}, {offset}+255] does not fit a vocabulary of {vocab_size}")]
    InvalidTokenMap { vocab_size: u32, offset: u32 },
}

/// A 7-dimensional end-effector delta: Cartesian displacement in meters,
/// orientation delta in radians, and a unitless gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; ACTION_DIM]", into = "[f64; ACTION_DIM]")]
pub struct Action([f64; ACTION_DIM]);

impl Action {
    pub fn new(values: [f64; ACTION_DIM]) -> Result<Self, CodecError> {
        if let Some((dim, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(CodecError::InvalidAction { dim, value });
        }
        Ok(Self(values))
    }

    pub fn zero() -> Self {
        Self([0.0; ACTION_DIM])
    }

    pub fn as_array(&self) -> &[f64; ACTION_DIM] {
        &self.0
    }

    pub fn dx(&self) -> f64 {
        self.0[0]
    }
    pub fn dy(&self) -> f64 {
        self.0[1]
    }
    pub fn dz(&self) -> f64 {
        self.0[2]
    }
    pub fn droll(&self) -> f64 {
        self.0[3]
    }
    pub fn dpitch(&self) -> f64 {
        self.0[4]
    }
    pub fn dyaw(&self) -> f64 {
        self.0[5]
    }
    pub fn gripper(&self) -> f64 {
        self.0[6]
    }
}

impl TryFrom<[f64; ACTION_DIM]> for Action {
    type Error = CodecError;

    fn try_from(values: [f64; ACTION_DIM]) -> Result<Self, Self::Error> {
        Action::new(values)
    }
}

impl From<Action> for [f64; ACTION_DIM] {
    fn from(a: Action) -> Self {
        a.0
    }
}

/// Per-dimension bounds of the normalization map, fitted on training actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStats", into = "RawStats")]
pub struct NormalizationStats {
    lo: [f64; ACTION_DIM],
    hi: [f64; ACTION_DIM],
}

#[derive(Serialize, Deserialize)]
struct RawStats {
    lo: [f64; ACTION_DIM],
    hi: [f64; ACTION_DIM],
}

impl TryFrom<RawStats> for NormalizationStats {
    type Error = CodecError;

    fn try_from(raw: RawStats) -> Result<Self, Self::Error> {
        NormalizationStats::new(raw.lo, raw.hi)
    }
}

impl From<NormalizationStats> for RawStats {
    fn from(s: NormalizationStats) -> Self {
        RawStats { lo: s.lo, hi: s.hi }
    }
}

impl NormalizationStats {
    pub fn new(lo: [f64; ACTION_DIM], hi: [f64; ACTION_DIM]) -> Result<Self, CodecError> {
        for dim in 0..ACTION_DIM {
            let (l, h) = (lo[dim], hi[dim]);
            if !(l.is_finite() && h.is_finite() && l < h) {
                return Err(CodecError::InvalidStats { dim, lo: l, hi: h });
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> &[f64; ACTION_DIM] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64; ACTION_DIM] {
        &self.hi
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Nearest-rank percentile of an ascending-sorted, non-empty sample.
/// `percent` is an integer in `1..=100`.
fn nearest_rank(sorted: &[f64], percent: usize) -> f64 {
    let n = sorted.len();
    let rank = (percent * n).div_ceil(100).max(1);
    sorted[rank - 1]
}

/// Fit per-dimension bounds as the 1st and 99th nearest-rank percentiles.
pub fn fit_stats(actions: &[Action]) -> Result<NormalizationStats, CodecError> {
    if actions.is_empty() {
        return Err(CodecError::NoActions);
    }
    let mut lo = [0.0; ACTION_DIM];
    let mut hi = [0.0; ACTION_DIM];
    let mut column = Vec::with_capacity(actions.len());
    for dim in 0..ACTION_DIM {
        column.clear();
        for a in actions {
            let v = a.0[dim];
            // Action::new already guarantees this; deserialized data goes through it too.
            if !v.is_finite() {
                return Err(CodecError::InvalidAction { dim, value: v });
            }
            column.push(v);
        }
        column.sort_by(f64::total_cmp);
        let (mut l, mut h) = (nearest_rank(&column, LOWER_PERCENTILE), nearest_rank(&column, UPPER_PERCENTILE));
        if l == h {
            l -= DEGENERATE_WIDENING;
            h += DEGENERATE_WIDENING;
        }
        lo[dim] = l;
        hi[dim] = h;
    }
    NormalizationStats::new(lo, hi)
}

/// Affine map of each dimension onto `[-1, 1]`, clamped.
pub fn normalize(a: &Action, s: &NormalizationStats) -> [f64; ACTION_DIM] {
    std::array::from_fn(|d| {
        let v = 2.0 * (a.0[d] - s.lo[d]) / (s.hi[d] - s.lo[d]) - 1.0;
        v.clamp(-1.0, 1.0)
    })
}

/// Inverse of [`normalize`] for values inside `[-1, 1]`.
pub fn denormalize(v: &[f64; ACTION_DIM], s: &NormalizationStats) -> [f64; ACTION_DIM] {
    std::array::from_fn(|d| s.lo[d] + (v[d] + 1.0) * 0.5 * (s.hi[d] - s.lo[d]))
}

/// Seven bin indices, one per action dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinVector(pub [u8; ACTION_DIM]);

impl BinVector {
    pub fn splat(bin: u8) -> Self {
        Self([bin; ACTION_DIM])
    }

    pub fn bins(&self) -> &[u8; ACTION_DIM] {
        &self.0
    }
}

fn quantize_scalar(v: f64) -> u8 {
    let bin = ((v + 1.0) * 0.5 * NUM_BINS as f64).floor() as usize;
    bin.min(NUM_BINS - 1) as u8
}

/// Uniform binning: bins are half-open `[edge, next_edge)` except the top
/// one, which also takes `1.0`.
pub fn quantize(v: &[f64; ACTION_DIM]) -> Result<BinVector, CodecError> {
    let mut bins = [0u8; ACTION_DIM];
    for (dim, (&x, bin)) in v.iter().zip(bins.iter_mut()).enumerate() {
        if !(-1.0..=1.0).contains(&x) {
            return Err(CodecError::OutOfRange { dim, value: x });
        }
        *bin = quantize_scalar(x);
    }
    Ok(BinVector(bins))
}

/// Center of a bin in normalized space.
pub fn bin_center(bin: u8) -> f64 {
    -1.0 + (bin as f64 + 0.5) * BIN_WIDTH
}

pub fn dequantize(b: &BinVector) -> [f64; ACTION_DIM] {
    std::array::from_fn(|d| bin_center(b.0[d]))
}

/// Convenience: normalize with `stats`, then quantize.
pub fn encode(a: &Action, stats: &NormalizationStats) -> BinVector {
    // normalize clamps into [-1, 1] so quantize cannot fail.
    let v = normalize(a, stats);
    BinVector(std::array::from_fn(|d| quantize_scalar(v[d])))
}

/// Location of the 256 reserved action tokens inside a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMap {
    vocab_size: u32,
    offset: u32,
}

impl TokenMap {
    pub fn new(vocab_size: u32, offset: u32) -> Result<Self, CodecError> {
        let fits = (offset as u64) + NUM_BINS as u64 <= vocab_size as u64;
        if !fits {
            return Err(CodecError::InvalidTokenMap { vocab_size, offset });
        }
        Ok(Self { vocab_size, offset })
    }

    /// Reserve the last 256 IDs of a vocabulary.
    pub fn last_256(vocab_size: u32) -> Result<Self, CodecError> {
        let offset =
            vocab_size.checked_sub(NUM_BINS as u32).ok_or(CodecError::InvalidTokenMap { vocab_size, offset: 0 })?;
        Self::new(vocab_size, offset)
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn offset(&self) -> u32 {
        self.offset
    }

    pub fn is_action_token(&self, id: u32) -> bool {
        id >= self.offset && id - self.offset < NUM_BINS as u32
    }

    pub fn bin_to_token(&self, bin: u8) -> u32 {
        self.offset + bin as u32
    }

    pub fn token_to_bin(&self, id: u32) -> Result<u8, CodecError> {
        if self.is_action_token(id) {
            Ok((id - self.offset) as u8)
        } else {
            Err(CodecError::NotActionToken(id))
        }
    }
}

pub fn bins_to_tokens(b: &BinVector, m: &TokenMap) -> [u32; ACTION_DIM] {
    std::array::from_fn(|d| m.bin_to_token(b.0[d]))
}

pub fn tokens_to_bins(ids: &[u32; ACTION_DIM], m: &TokenMap) -> Result<BinVector, CodecError> {
    let mut bins = [0u8; ACTION_DIM];
    for (bin, &id) in bins.iter_mut().zip(ids) {
        *bin = m.token_to_bin(id)?;
    }
    Ok(BinVector(bins))
}
