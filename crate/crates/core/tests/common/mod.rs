//! Finite-difference oracles shared by the gradient tests and the
//! acceptance harness.
#![allow(dead_code)]

use ndarray::Array2;
use paravla_core::action::{BinVector, ACTION_DIM};
use paravla_core::eval::PredictionRecord;
use paravla_core::lora::LoraAdapter;
use paravla_core::policy::{AssembledSequence, GradMode, PolicyModel};
use paravla_core::tensor::{randn, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;

/// Entries whose gradients are both below this are compared absolutely.
const FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// `L = 0.5·‖y‖² + Σ r⊙y` for a fixed random `r`; returns `(L, dL/dy)`.
fn quadratic_loss(y: &Matrix, r: &Matrix) -> (f64, Matrix) {
    let l = 0.5 * y.iter().map(|v| v * v).sum::<f64>() + (y * r).sum();
    (l, y + r)
}

/// Worst relative error of `dA`, `dB` and `dx` over every entry of a
/// random adapter with non-zero `B`.
pub fn adapter_grad_error(out: usize, inp: usize, rank: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = randn(&mut rng, (out, inp), 0.5);
    let a = randn(&mut rng, (rank, inp), 0.5);
    let b = randn(&mut rng, (out, rank), 0.5);
    let alpha = 2.0 * rank as f64;
    let x = randn(&mut rng, (3, inp), 1.0);
    let r = randn(&mut rng, (3, out), 1.0);
    let ad = LoraAdapter::from_parts(w0.clone(), a.clone(), b.clone(), alpha, seed).unwrap();
    let (_, dy) = quadratic_loss(&ad.forward(&x).unwrap(), &r);
    let (g, dx) = ad.backward(&x, &dy).unwrap();

    let loss_at = |a: &Matrix, b: &Matrix, x: &Matrix| {
        let ad = LoraAdapter::from_parts(w0.clone(), a.clone(), b.clone(), alpha, seed).unwrap();
        quadratic_loss(&ad.forward(x).unwrap(), &r).0
    };
    let mut worst: f64 = 0.0;
    let mut probe = |target: &Matrix, analytic: &Matrix, f: &dyn Fn(&Matrix) -> f64| {
        for idx in ndarray::indices(target.dim()) {
            let mut plus = target.clone();
            plus[idx] += EPS;
            let mut minus = target.clone();
            minus[idx] -= EPS;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[idx], numeric));
        }
    };
    probe(&a, &g.da, &|m| loss_at(m, &b, &x));
    probe(&b, &g.db, &|m| loss_at(&a, m, &x));
    probe(&x, &dx, &|m| loss_at(&a, &b, m));
    worst
}

/// A batch of random sequences sized for `model`.
pub fn random_batch(model: &PolicyModel, n: usize, seed: u64) -> Vec<AssembledSequence> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instructions = ["put the spoon on the plate", "move the cup into the pot please", "grab it"];
    let map = cfg.token_map();
    (0..n)
        .map(|i| {
            let pp = cfg.patch_size * cfg.patch_size;
            let patches = Array2::from_shape_simple_fn((cfg.n_patches(), pp), || rng.random::<f64>());
            let targets = std::array::from_fn(|_| map.bin_to_token(rng.random()));
            model.assemble_with_patches(patches, instructions[i % instructions.len()], Some(targets)).unwrap()
        })
        .collect()
}

/// Fill every LoRA `B` with noise so that `dA` is not trivially zero.
pub fn randomize_adapters(model: &mut PolicyModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, m) in model.trainable_mut(GradMode::AdaptersOnly).into_iter().enumerate() {
        if i % 2 == 1 {
            *m = randn(&mut rng, m.dim(), 0.3);
        }
    }
}

/// Worst relative error between analytic and central-difference gradients
/// of the mean action-token loss, probing up to `per_tensor` entries of
/// every trainable tensor.
pub fn model_grad_error(model: &PolicyModel, batch: &[AssembledSequence], mode: GradMode, per_tensor: usize) -> f64 {
    let (_, grads) = model.loss_and_grads(batch, mode).unwrap();
    let analytic: Vec<Matrix> = grads.tensors().into_iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for (p, g) in analytic.iter().enumerate() {
        let all: Vec<(usize, usize)> = ndarray::indices(g.dim()).into_iter().collect();
        let picks: Vec<(usize, usize)> = if all.len() <= per_tensor {
            all
        } else {
            (0..per_tensor).map(|_| all[rng.random_range(0..all.len())]).collect()
        };
        for idx in picks {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                m.trainable_mut(mode)[p][idx] += delta;
                m.loss(batch).unwrap()
            };
            let numeric = (shifted(EPS) - shifted(-EPS)) / (2.0 * EPS);
            let e = rel_err(g[idx], numeric);
            worst = worst.max(e);
        }
    }
    worst
}

/// Double loop over records and dimensions; counts in integers.
#[allow(clippy::needless_range_loop)]
pub fn brute_force_kbin(records: &[PredictionRecord], k: u32) -> ([f64; ACTION_DIM], f64) {
    let mut per = [0.0; ACTION_DIM];
    let mut total = 0usize;
    for d in 0..ACTION_DIM {
        let mut hits = 0usize;
        for r in records {
            let (a, b) = (r.truth.0[d] as i64, r.pred.0[d] as i64);
            if (a - b).abs() <= k as i64 {
                hits += 1;
            }
        }
        per[d] = hits as f64 / records.len() as f64;
        total += hits;
    }
    (per, total as f64 / (records.len() * ACTION_DIM) as f64)
}

/// `n` records whose predictions sit near the truth often enough that
/// small k values are informative.
pub fn random_records(n: usize, seed: u64) -> Vec<PredictionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let truth: [u8; ACTION_DIM] = std::array::from_fn(|_| rng.random());
            let pred = truth.map(|t| {
                if rng.random_bool(0.5) {
                    t.saturating_add_signed(rng.random_range(-8i8..=8))
                } else {
                    rng.random()
                }
            });
            PredictionRecord {
                trajectory_id: format!("t{}", i % 7),
                step: i,
                instruction: String::new(),
                truth: BinVector(truth),
                pred: BinVector(pred),
            }
        })
        .collect()
}
