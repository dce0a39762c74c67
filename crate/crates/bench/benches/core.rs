use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use paravla_core::action::{bins_to_tokens, encode, fit_stats, quantize};
use paravla_core::dataset::{actions_of, synthesize};
use paravla_core::eval::{kbin_accuracy, PredictionRecord};
use paravla_core::lora::LoraAdapter;
use paravla_core::policy::{GradMode, PolicyConfig, PolicyModel, TrainingExample};
use paravla_core::{BinVector, Matrix, ACTION_DIM};

fn codec(c: &mut Criterion) {
    let trajs = synthesize(8, 25, 0).unwrap();
    let actions = actions_of(&trajs);
    let stats = fit_stats(&actions).unwrap();
    let v: [f64; ACTION_DIM] = [-1.0, -0.5, -0.01, 0.0, 0.3, 0.99, 1.0];
    c.bench_function("quantize", |b| b.iter(|| quantize(black_box(&v)).unwrap()));
    c.bench_function("encode_200_actions", |b| {
        b.iter(|| actions.iter().map(|a| encode(a, &stats)).fold(0u32, |acc, x| acc + x.0[0] as u32))
    });
}

fn lora(c: &mut Criterion) {
    let w0 = Matrix::from_shape_fn((64, 64), |(i, j)| ((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.5);
    let ad = LoraAdapter::init(w0, 8, 16.0, 1).unwrap();
    let x = Matrix::from_shape_fn((48, 64), |(i, j)| ((i + 3 * j) % 7) as f64 / 7.0);
    c.bench_function("lora_forward_48x64_r8", |b| b.iter(|| ad.forward(black_box(&x)).unwrap()));
    c.bench_function("lora_merge_64x64_r8", |b| b.iter(|| ad.merge()));
}

fn policy(c: &mut Criterion) {
    let trajs = synthesize(2, 8, 3).unwrap();
    let stats = fit_stats(&actions_of(&trajs)).unwrap();
    let mut model = PolicyModel::new(PolicyConfig::default(), 0).unwrap();
    model.attach_adapters(8, 16.0, 1).unwrap();
    let map = model.config().token_map();
    let batch: Vec<_> = trajs
        .iter()
        .flat_map(|t| t.frames.iter().map(move |f| (t, f)))
        .map(|(t, f)| {
            let ex = TrainingExample {
                observation: f.observation.clone(),
                instruction: t.canonical_instruction().unwrap().to_string(),
                target_tokens: bins_to_tokens(&encode(&f.action, &stats), &map),
            };
            model.assemble(&ex).unwrap()
        })
        .collect();
    c.bench_function("loss_and_grads_adapters_16", |b| {
        b.iter(|| model.loss_and_grads(black_box(&batch), GradMode::AdaptersOnly).unwrap().0)
    });
    c.bench_function("predict_batch_16", |b| b.iter(|| model.predict_batch(black_box(&batch)).unwrap()));
    c.bench_function("merge_adapters", |b| {
        b.iter_batched(|| model.clone(), |mut m| m.merge_adapters(), BatchSize::LargeInput)
    });
}

fn evaluator(c: &mut Criterion) {
    let records: Vec<_> = (0..10_000u32)
        .map(|i| PredictionRecord {
            trajectory_id: format!("t{}", i % 40),
            step: i as usize,
            instruction: String::new(),
            truth: BinVector(std::array::from_fn(|d| ((i * 7 + d as u32 * 13) % 256) as u8)),
            pred: BinVector(std::array::from_fn(|d| ((i * 11 + d as u32 * 5) % 256) as u8)),
        })
        .collect();
    c.bench_function("kbin_accuracy_10k_k5", |b| b.iter(|| kbin_accuracy(black_box(&records), 5).unwrap()));
}

criterion_group!(benches, codec, lora, policy, evaluator);
criterion_main!(benches);
