//! Low-rank adaptation of a frozen projection matrix.
//!
//! For a frozen `W0` (out × in) the adapter learns `A` (r × in) and
//! `B` (out × r) and computes
//!
//! ```text
//! y = x·W0ᵀ + (alpha / r)·(x·Aᵀ)·Bᵀ
//! ```
//!
//! `A` starts as small Gaussian noise and `B` at zero, so a fresh adapter
//! reproduces the base projection exactly. `W0` is only reachable through a
//! shared reference once the adapter exists.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{self, Matrix};

/// Standard deviation of the Gaussian used for `A`.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum LoraError {
    #[error("rank {rank} exceeds min(out={out}, in={inp})")]
    RankTooLarge { rank: usize, out: usize, inp: usize },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    Shape { what: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error("adapter checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_shape(what: &'static str, expected: (usize, usize), got: (usize, usize)) -> Result<(), LoraError> {
    if expected == got {
        Ok(())
    } else {
        Err(LoraError::Shape { what, expected, got })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    w0: Matrix,
    a: Matrix,
    b: Matrix,
    rank: usize,
    alpha: f64,
    seed: u64,
}

/// Gradients with respect to the two trainable factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub da: Matrix,
    pub db: Matrix,
}

impl AdapterGrads {
    pub fn zeros_like(ad: &LoraAdapter) -> Self {
        Self { da: Matrix::zeros(ad.a.dim()), db: Matrix::zeros(ad.b.dim()) }
    }

    pub fn accumulate(&mut self, other: &AdapterGrads) {
        self.da += &other.da;
        self.db += &other.db;
    }
}

impl LoraAdapter {
    /// Wrap `w0` with a fresh adapter: `A ~ N(0, 0.02²)` drawn from `seed`,
    /// `B = 0`.
    pub fn init(w0: Matrix, rank: usize, alpha: f64, seed: u64) -> Result<Self, LoraError> {
        let (out, inp) = w0.dim();
        validate_hyper(rank, alpha, out, inp)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let a = Array2::from_shape_simple_fn((rank, inp), || normal.sample(&mut rng));
        let b = Matrix::zeros((out, rank));
        Ok(Self { w0, a, b, rank, alpha, seed })
    }

    /// Assemble an adapter from explicit factors.
    pub fn from_parts(w0: Matrix, a: Matrix, b: Matrix, alpha: f64, seed: u64) -> Result<Self, LoraError> {
        let (out, inp) = w0.dim();
        let rank = a.nrows();
        validate_hyper(rank, alpha, out, inp)?;
        check_shape("A", (rank, inp), a.dim())?;
        check_shape("B", (out, rank), b.dim())?;
        Ok(Self { w0, a, b, rank, alpha, seed })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Effective multiplier on `B·A`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn in_features(&self) -> usize {
        self.w0.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.w0.nrows()
    }

    pub fn base(&self) -> &Matrix {
        &self.w0
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// Mutable access to the trainable factors `(A, B)`.
    pub fn factors_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.a, &mut self.b)
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), LoraError> {
        if x.ncols() != self.in_features() {
            return Err(LoraError::Shape { what: "input", expected: (x.nrows(), self.in_features()), got: x.dim() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, LoraError> {
        self.check_input(&x.view())?;
        Ok(self.forward_with_hidden(x.view()).0)
    }

    /// Forward pass that also returns the rank-space activation `x·Aᵀ`,
    /// which the backward pass reuses.
    pub(crate) fn forward_with_hidden(&self, x: ArrayView2<f64>) -> (Matrix, Matrix) {
        let xa = x.dot(&self.a.t());
        let mut y = x.dot(&self.w0.t());
        tensor::gemm_acc(&mut y, self.scale(), &xa.view(), &self.b.t());
        (y, xa)
    }

    pub fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<(AdapterGrads, Matrix), LoraError> {
        self.check_input(&x.view())?;
        check_shape("dy", (x.nrows(), self.out_features()), dy.dim())?;
        let xa = x.dot(&self.a.t());
        Ok(self.backward_with_hidden(x.view(), xa.view(), dy.view()))
    }

    /// `dB = s·dyᵀ·(x·Aᵀ)`, `dA = s·(dy·B)ᵀ·x`, `dx = dy·W0 + s·(dy·B)·A`.
    pub(crate) fn backward_with_hidden(
        &self,
        x: ArrayView2<f64>,
        xa: ArrayView2<f64>,
        dy: ArrayView2<f64>,
    ) -> (AdapterGrads, Matrix) {
        let s = self.scale();
        let dy_b = dy.dot(&self.b);
        let mut db = dy.t().dot(&xa);
        db *= s;
        let mut da = dy_b.t().dot(&x);
        da *= s;
        let mut dx = dy.dot(&self.w0);
        tensor::gemm_acc(&mut dx, s, &dy_b.view(), &self.a.view());
        (AdapterGrads { da, db }, dx)
    }

    /// Fold the adapter into a plain weight: `W0 + s·B·A`.
    pub fn merge(&self) -> Matrix {
        let mut w = self.w0.clone();
        tensor::gemm_acc(&mut w, self.scale(), &self.b.view(), &self.a.view());
        w
    }

    /// Write `A` and `B` as a length-prefixed JSON header followed by
    /// row-major little-endian f32 payloads. `W0` is not stored.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), LoraError> {
        let header = AdapterHeader {
            format: ADAPTER_FORMAT.to_string(),
            version: 1,
            out_features: self.out_features(),
            in_features: self.in_features(),
            rank: self.rank,
            alpha: self.alpha,
            seed: self.seed,
        };
        let json = serde_json::to_vec(&header).map_err(|e| LoraError::Checkpoint(e.to_string()))?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        tensor::write_f32_le(&mut w, &self.a)?;
        tensor::write_f32_le(&mut w, &self.b)?;
        Ok(())
    }

    /// Read factors written by [`write_checkpoint`](Self::write_checkpoint)
    /// and attach them to `w0`.
    pub fn read_checkpoint<R: Read>(mut r: R, w0: Matrix) -> Result<Self, LoraError> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = u32::from_le_bytes(len) as usize;
        if len > 1 << 20 {
            return Err(LoraError::Checkpoint(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: AdapterHeader = serde_json::from_slice(&json).map_err(|e| LoraError::Checkpoint(e.to_string()))?;
        if header.format != ADAPTER_FORMAT || header.version != 1 {
            return Err(LoraError::Checkpoint(format!("unsupported format {} v{}", header.format, header.version)));
        }
        check_shape("W0", (header.out_features, header.in_features), w0.dim())?;
        let a = tensor::read_f32_le(&mut r, (header.rank, header.in_features))?;
        let b = tensor::read_f32_le(&mut r, (header.out_features, header.rank))?;
        Self::from_parts(w0, a, b, header.alpha, header.seed)
    }
}

const ADAPTER_FORMAT: &str = "lora-adapter";

#[derive(Debug, Serialize, Deserialize)]
struct AdapterHeader {
    format: String,
    version: u32,
    out_features: usize,
    in_features: usize,
    rank: usize,
    alpha: f64,
    seed: u64,
}

fn validate_hyper(rank: usize, alpha: f64, out: usize, inp: usize) -> Result<(), LoraError> {
    if rank == 0 {
        return Err(LoraError::ZeroRank);
    }
    if rank > out.min(inp) {
        return Err(LoraError::RankTooLarge { rank, out, inp });
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(LoraError::BadAlpha(alpha));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::randn;
    use ndarray::array;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn fresh_adapter_is_the_base_projection() {
        let mut r = rng(1);
        let w0 = randn(&mut r, (6, 5), 1.0);
        let ad = LoraAdapter::init(w0.clone(), 3, 6.0, 9).unwrap();
        let x = randn(&mut r, (4, 5), 1.0);
        assert_eq!(ad.forward(&x).unwrap(), x.dot(&w0.t()));
        assert!(ad.b().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_rank_and_alpha_give_scale_two() {
        let ad = LoraAdapter::init(Matrix::zeros((64, 64)), 32, 64.0, 0).unwrap();
        assert_eq!(ad.scale(), 2.0);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let w0 = Matrix::zeros((8, 8));
        let a1 = LoraAdapter::init(w0.clone(), 4, 8.0, 42).unwrap();
        let a2 = LoraAdapter::init(w0.clone(), 4, 8.0, 42).unwrap();
        let a3 = LoraAdapter::init(w0, 4, 8.0, 43).unwrap();
        assert_eq!(a1.a(), a2.a());
        assert_ne!(a1.a(), a3.a());
    }

    #[test]
    fn init_rejects_bad_hyperparameters() {
        let w0 = Matrix::zeros((4, 6));
        assert!(matches!(
            LoraAdapter::init(w0.clone(), 5, 1.0, 0),
            Err(LoraError::RankTooLarge { rank: 5, out: 4, inp: 6 })
        ));
        assert!(matches!(LoraAdapter::init(w0.clone(), 0, 1.0, 0), Err(LoraError::ZeroRank)));
        assert!(LoraAdapter::init(w0, 2, -1.0, 0).is_err());
    }

    #[test]
    fn hand_computed_forward() {
        let ad =
            LoraAdapter::from_parts(Matrix::zeros((2, 2)), array![[1.0, 0.0]], array![[1.0], [0.0]], 1.0, 0).unwrap();
        let y = ad.forward(&array![[3.0, 5.0]]).unwrap();
        assert_eq!(y, array![[3.0, 0.0]]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let ad = LoraAdapter::init(Matrix::zeros((3, 4)), 2, 2.0, 0).unwrap();
        assert!(matches!(ad.forward(&Matrix::zeros((2, 3))), Err(LoraError::Shape { .. })));
        assert!(ad.backward(&Matrix::zeros((2, 4)), &Matrix::zeros((2, 2))).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut r = rng(3);
        let ad = LoraAdapter::from_parts(
            randn(&mut r, (5, 4), 1.0),
            randn(&mut r, (2, 4), 1.0),
            randn(&mut r, (5, 2), 1.0),
            4.0,
            0,
        )
        .unwrap();
        let x = randn(&mut r, (3, 4), 1.0);
        let (g, dx) = ad.backward(&x, &Matrix::zeros((3, 5))).unwrap();
        assert!(g.da.iter().chain(g.db.iter()).chain(dx.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_b_means_zero_da_but_not_db() {
        let mut r = rng(4);
        let ad = LoraAdapter::init(randn(&mut r, (5, 4), 1.0), 2, 4.0, 1).unwrap();
        let x = randn(&mut r, (3, 4), 1.0);
        let dy = randn(&mut r, (3, 5), 1.0);
        let (g, _) = ad.backward(&x, &dy).unwrap();
        assert!(g.da.iter().all(|&v| v == 0.0));
        assert!(g.db.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn merge_with_zero_b_is_base() {
        let mut r = rng(5);
        let w0 = randn(&mut r, (6, 6), 1.0);
        let ad = LoraAdapter::init(w0.clone(), 2, 3.0, 0).unwrap();
        assert_eq!(ad.merge(), w0);
    }

    #[test]
    fn merge_uses_alpha_over_rank() {
        let mut r = rng(6);
        let (w0, a, b) = (randn(&mut r, (64, 64), 1.0), randn(&mut r, (32, 64), 1.0), randn(&mut r, (64, 32), 1.0));
        let ad = LoraAdapter::from_parts(w0.clone(), a.clone(), b.clone(), 64.0, 0).unwrap();
        let expected = &w0 + &(b.dot(&a) * 2.0);
        let diff = (&ad.merge() - &expected).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_at_f32_precision() {
        let mut r = rng(7);
        let w0 = randn(&mut r, (6, 4), 1.0);
        let ad = LoraAdapter::from_parts(w0.clone(), randn(&mut r, (2, 4), 1.0), randn(&mut r, (6, 2), 1.0), 4.0, 17)
            .unwrap();
        let mut buf = Vec::new();
        ad.write_checkpoint(&mut buf).unwrap();
        let header_len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
        assert_eq!(buf.len(), 4 + header_len + 4 * (2 * 4 + 6 * 2));
        let header: serde_json::Value = serde_json::from_slice(&buf[4..4 + header_len]).unwrap();
        assert_eq!(header["rank"], 2);
        assert_eq!(header["seed"], 17);

        let back = LoraAdapter::read_checkpoint(&buf[..], w0).unwrap();
        assert_eq!(back.a(), &ad.a().mapv(|v| v as f32 as f64));
        assert_eq!(back.b(), &ad.b().mapv(|v| v as f32 as f64));
        assert_eq!(back.alpha(), 4.0);
        assert!(LoraAdapter::read_checkpoint(&buf[..], Matrix::zeros((4, 4))).is_err());
    }
}
