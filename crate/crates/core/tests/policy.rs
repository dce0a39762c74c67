mod common;

use std::collections::BTreeMap;

use paravla_core::action::fit_stats;
use paravla_core::dataset::{actions_of, synthesize, Trajectory};
use paravla_core::policy::{
    load_checkpoint, pretrain, save_checkpoint, train, FixedInstruction, GradMode, PolicyConfig, PolicyError,
    PolicyModel, PretrainConfig, TrainConfig, TrainItem,
};
use paravla_core::tensor::max_abs_diff;

fn items_for(model: &PolicyModel, trajs: &[Trajectory]) -> Vec<TrainItem> {
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let stats = fit_stats(&actions_of(trajs)).unwrap();
    TrainItem::from_trajectories(model, &refs, &stats).unwrap()
}

#[test]
fn batched_loss_equals_sum_of_single_losses() {
    let model = PolicyModel::new(PolicyConfig::tiny(), 4).unwrap();
    let batch = common::random_batch(&model, 9, 5);
    let batched = model.loss(&batch).unwrap() * batch.len() as f64;
    let sequential: f64 = batch.iter().map(|s| model.loss(std::slice::from_ref(s)).unwrap()).sum();
    assert!((batched - sequential).abs() <= 1e-6, "{batched} vs {sequential}");
}

#[test]
fn batched_gradients_equal_sum_of_single_gradients() {
    let mut model = PolicyModel::new(PolicyConfig::tiny(), 8).unwrap();
    model.attach_adapters(2, 4.0, 1).unwrap();
    common::randomize_adapters(&mut model, 2);
    let batch = common::random_batch(&model, 4, 3);
    let (_, g) = model.loss_and_grads(&batch, GradMode::AdaptersOnly).unwrap();
    let singles: Vec<_> = batch
        .iter()
        .map(|s| model.loss_and_grads(std::slice::from_ref(s), GradMode::AdaptersOnly).unwrap().1)
        .collect();
    for (i, whole) in g.tensors().into_iter().enumerate() {
        let summed = singles.iter().map(|s| s.tensors()[i].clone()).reduce(|a, b| a + b).unwrap();
        assert!(max_abs_diff(&(whole * batch.len() as f64), &summed) <= 1e-9);
    }
}

#[test]
fn fresh_adapters_leave_logits_unchanged() {
    let mut model = PolicyModel::new(PolicyConfig::tiny(), 2).unwrap();
    let batch = common::random_batch(&model, 3, 9);
    let before = model.action_logits(&batch).unwrap();
    model.attach_adapters(4, 8.0, 3).unwrap();
    assert_eq!(model.action_logits(&batch).unwrap(), before);
}

#[test]
fn merged_model_matches_adapter_model() {
    let mut model = PolicyModel::new(PolicyConfig::tiny(), 2).unwrap();
    model.attach_adapters(1, 2.0, 3).unwrap();
    common::randomize_adapters(&mut model, 4);
    let batch = common::random_batch(&model, 3, 5);
    let adapted = model.action_logits(&batch).unwrap();
    model.merge_adapters();
    assert!(!model.has_adapters());
    assert!(max_abs_diff(&adapted, &model.action_logits(&batch).unwrap()) <= 1e-6);
}

#[test]
fn greedy_decode_ignores_non_action_tokens_and_breaks_ties_low() {
    let mut model = PolicyModel::new(PolicyConfig::tiny(), 6).unwrap();
    let map = model.config().token_map();
    let batch = common::random_batch(&model, 4, 1);
    {
        let tokens = &mut model.trainable_mut(GradMode::Full)[2];
        assert_eq!(tokens.nrows(), map.vocab_size() as usize);
        // reserved rows all zero: every action logit ties at 0, while the
        // ordinary vocabulary rows are scaled up to dominate any argmax
        for (i, mut row) in tokens.rows_mut().into_iter().enumerate() {
            if map.is_action_token(i as u32) {
                row.fill(0.0);
            } else {
                row *= 50.0;
            }
        }
    }
    for p in model.predict_batch(&batch).unwrap() {
        assert_eq!(p.0, [0; 7]);
    }
}

#[test]
fn predictions_are_reserved_tokens_for_random_models() {
    for seed in 0..5 {
        let model = PolicyModel::new(PolicyConfig::tiny(), seed).unwrap();
        let batch = common::random_batch(&model, 3, seed);
        let logits = model.action_logits(&batch).unwrap();
        assert_eq!(logits.dim(), (21, model.config().vocab_size()));
        assert_eq!(model.predict_batch(&batch).unwrap().len(), 3);
    }
}

#[test]
fn resolution_and_instruction_errors() {
    let model = PolicyModel::new(PolicyConfig::default(), 0).unwrap();
    let small = synthesize(1, 3, 0).unwrap();
    let obs = &small[0].frames[0].observation;
    assert!(model.predict(obs, "move it").is_ok());
    assert!(matches!(model.predict(obs, "   "), Err(PolicyError::EmptyInstruction)));
    // overlong instructions are cut to the configured token budget
    let words: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
    let cut = words[..model.config().max_instruction_tokens].join(" ");
    assert_eq!(model.predict(obs, &words.join(" ")).unwrap(), model.predict(obs, &cut).unwrap());
    let mut seq = model.assemble_query(obs, "move it").unwrap();
    seq.instruction_ids = vec![5; 100];
    assert!(matches!(model.predict_batch(&[seq]), Err(PolicyError::InstructionTooLong(100))));
    let tiny = PolicyModel::new(PolicyConfig::tiny(), 0).unwrap();
    assert!(matches!(tiny.predict(obs, "move it"), Err(PolicyError::Resolution { .. })));
}

fn short_run(lr: f64, seed: u64) -> (PolicyModel, Vec<f64>, String) {
    let trajs = synthesize(2, 6, 3).unwrap();
    let mut model = PolicyModel::new(PolicyConfig::default(), 1).unwrap();
    let items = items_for(&model, &trajs);
    let src = FixedInstruction::canonical(&trajs).unwrap();
    pretrain(&mut model, &items, &src, &PretrainConfig { epochs: 2, ..Default::default() }).unwrap();
    let digest = model.frozen_digest();
    let cfg = TrainConfig { epochs: 3, learning_rate: lr, seed, batch_size: 4, ..Default::default() };
    let out = train(&mut model, &items, &src, &cfg).unwrap();
    (model, out.curve.iter().map(|r| r.loss).collect(), digest)
}

#[test]
fn adapter_training_never_touches_the_base() {
    let (model, curve, digest) = short_run(5e-3, 0);
    assert_eq!(model.frozen_digest(), digest);
    assert_eq!(curve.len(), 3);
    assert!(model.adapters().iter().any(|(_, a)| a.b().iter().any(|&v| v != 0.0)));
}

#[test]
fn zero_learning_rate_keeps_adapters_at_init() {
    let (model, _, _) = short_run(0.0, 0);
    for (name, ad) in model.adapters() {
        assert!(ad.b().iter().all(|&v| v == 0.0), "{name}");
        let fresh = paravla_core::lora::LoraAdapter::init(ad.base().clone(), ad.rank(), ad.alpha(), ad.seed()).unwrap();
        assert_eq!(ad.a(), fresh.a(), "{name}");
    }
}

#[test]
fn training_is_seed_deterministic() {
    let (a, ca, _) = short_run(5e-3, 9);
    let (b, cb, _) = short_run(5e-3, 9);
    assert_eq!(ca, cb);
    for ((na, x), (nb, y)) in a.adapters().into_iter().zip(b.adapters()) {
        assert_eq!(na, nb);
        assert_eq!(x, y);
    }
}

#[test]
fn unknown_trajectory_instruction_is_an_error() {
    let trajs = synthesize(1, 4, 0).unwrap();
    let mut model = PolicyModel::new(PolicyConfig::default(), 1).unwrap();
    let items = items_for(&model, &trajs);
    let src = FixedInstruction::new(BTreeMap::new());
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    assert!(train(&mut model, &items, &src, &cfg).is_err());
    assert!(matches!(train(&mut model, &[], &src, &cfg), Err(PolicyError::EmptyDataset)));
}

#[test]
fn checkpoint_round_trip_is_stable() {
    let mut model = PolicyModel::new(PolicyConfig::tiny(), 5).unwrap();
    model.attach_adapters(2, 4.0, 6).unwrap();
    common::randomize_adapters(&mut model, 7);
    let dir = tempfile::tempdir().unwrap();
    let prov = serde_json::json!({ "seed": 5 });
    save_checkpoint(&model, dir.path(), prov.clone()).unwrap();
    let (loaded, back) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, prov);
    let batch = common::random_batch(&model, 3, 8);
    let diff = max_abs_diff(&model.action_logits(&batch).unwrap(), &loaded.action_logits(&batch).unwrap());
    assert!(diff < 1e-4, "{diff}");

    // a loaded model is already at storage precision
    let dir2 = tempfile::tempdir().unwrap();
    save_checkpoint(&loaded, dir2.path(), prov).unwrap();
    let (again, _) = load_checkpoint(dir2.path()).unwrap();
    assert_eq!(again.frozen_digest(), loaded.frozen_digest());
    assert_eq!(again.action_logits(&batch).unwrap(), loaded.action_logits(&batch).unwrap());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let model = PolicyModel::new(PolicyConfig::tiny(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path(), serde_json::Value::Null).unwrap();
    std::fs::write(dir.path().join("tensors/final_norm.gamma.bin"), [0u8; 3]).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
}
