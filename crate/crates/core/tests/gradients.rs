mod common;

use paravla_core::policy::{GradMode, PolicyConfig, PolicyModel};

#[test]
fn adapter_gradients_match_central_differences() {
    for (i, &(out, inp)) in [(4, 4), (7, 5), (16, 16)].iter().enumerate() {
        for rank in [1, 2, 4] {
            let err = common::adapter_grad_error(out, inp, rank, 10 * i as u64 + rank as u64);
            assert!(err <= 1e-4, "{out}x{inp} r={rank}: relative error {err:e}");
        }
    }
}

#[test]
fn adapter_gradients_through_the_surrogate() {
    let mut model = PolicyModel::new(PolicyConfig::tiny(), 3).unwrap();
    model.attach_adapters(2, 4.0, 5).unwrap();
    common::randomize_adapters(&mut model, 6);
    let batch = common::random_batch(&model, 3, 7);
    let err = common::model_grad_error(&model, &batch, GradMode::AdaptersOnly, 12);
    assert!(err <= 1e-3, "relative error {err:e}");
}

#[test]
fn base_gradients_through_the_surrogate() {
    let model = PolicyModel::new(PolicyConfig::tiny(), 11).unwrap();
    let batch = common::random_batch(&model, 2, 12);
    let err = common::model_grad_error(&model, &batch, GradMode::Full, 10);
    assert!(err <= 1e-3, "relative error {err:e}");
}

#[test]
fn grad_mode_must_match_adapter_state() {
    let mut model = PolicyModel::new(PolicyConfig::tiny(), 1).unwrap();
    let batch = common::random_batch(&model, 1, 2);
    assert!(model.loss_and_grads(&batch, GradMode::AdaptersOnly).is_err());
    model.attach_adapters(1, 1.0, 0).unwrap();
    assert!(model.loss_and_grads(&batch, GradMode::Full).is_err());
}
