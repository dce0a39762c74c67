//! Dense matrix helpers shared by the adapter and the surrogate policy.

use std::io::{self, Read, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub type Matrix = Array2<f64>;

/// `c += alpha · a · b`
pub fn gemm_acc(c: &mut Matrix, alpha: f64, a: &ArrayView2<f64>, b: &ArrayView2<f64>) {
    general_mat_mul(alpha, a, b, 1.0, c);
}

pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || normal.sample(rng))
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Row-major little-endian f32.
pub fn write_f32_le<W: Write>(w: &mut W, m: &Matrix) -> io::Result<()> {
    let mut buf = Vec::with_capacity(m.len() * 4);
    for &v in m.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_f32_le<R: Read>(r: &mut R, shape: (usize, usize)) -> io::Result<Matrix> {
    let mut buf = vec![0u8; shape.0 * shape.1 * 4];
    r.read_exact(&mut buf)?;
    let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(Array2::from_shape_vec(shape, data).expect("shape matches buffer"))
}

/// Feed the exact bit pattern of a matrix (shape included) into a hasher.
pub fn hash_matrix(h: &mut Sha256, m: &Matrix) {
    h.update((m.nrows() as u64).to_le_bytes());
    h.update((m.ncols() as u64).to_le_bytes());
    for &v in m.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
}
