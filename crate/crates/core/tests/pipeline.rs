use std::fs;
use std::path::Path;

use paravla_core::instruction::{MockLlm, RetryPolicy};
use paravla_core::pipeline::{
    cmd_compare, cmd_curate_accept_all, cmd_eval, cmd_gen, cmd_synth, cmd_train, EvalRequest, InstructionChoice,
    PipelineError, PipelineLock, SplitConfig, TrainRequest, Workspace,
};
use paravla_core::policy::{PretrainConfig, TrainConfig};

const WELL_FORMED: &str = include_str!("fixtures/well_formed.txt");
const EXAMPLE: &str = include_str!("fixtures/output_example.txt");

fn prepared(n: usize, steps: usize, seed: u64) -> (tempfile::TempDir, Workspace) {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path().join("out"));
    cmd_synth(&ws, n, steps, seed).unwrap();
    cmd_gen(&ws, &ws.dataset_dir(), &MockLlm::paraphraser(), "mock", &RetryPolicy::default(), 2).unwrap();
    (dir, ws)
}

fn quick(run: &str, single: bool, seed: u64) -> TrainRequest {
    TrainRequest {
        run: run.into(),
        single_instruction: single,
        split: SplitConfig { test_fraction: 0.25, seed },
        pretrain: PretrainConfig { epochs: 2, seed, ..Default::default() },
        train: TrainConfig { epochs: 2, seed, learning_rate: 1e-3, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn synth_twice_gives_identical_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_synth(&Workspace::new(dir.path().join("a")), 5, 25, 7).unwrap();
    let b = cmd_synth(&Workspace::new(dir.path().join("b")), 5, 25, 7).unwrap();
    let c = cmd_synth(&Workspace::new(dir.path().join("c")), 5, 25, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let manifest = fs::read_to_string(dir.path().join("a/dataset/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 7"), "{manifest}");
}

#[test]
fn gen_with_fixture_client_persists_five_candidates_each() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path());
    cmd_synth(&ws, 3, 5, 1).unwrap();
    let s =
        cmd_gen(&ws, &ws.dataset_dir(), &MockLlm::canned(WELL_FORMED), "fixture", &RetryPolicy::default(), 3).unwrap();
    assert_eq!(s.written, 3);
    let store = ws.store().unwrap();
    for id in store.candidate_ids().unwrap() {
        let set = store.load_candidates(&id).unwrap().unwrap();
        assert_eq!(set.candidates.len(), 5);
        assert_eq!(set.provenance.unwrap()["client"], "fixture");
    }
}

#[test]
fn gen_failures_name_the_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path());
    cmd_synth(&ws, 2, 5, 1).unwrap();
    let err =
        cmd_gen(&ws, &ws.dataset_dir(), &MockLlm::canned(EXAMPLE), "fixture", &RetryPolicy::default(), 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("traj_0000") && msg.contains("traj_0001") && msg.contains("found 2"), "{msg}");
    assert!(ws.store().unwrap().candidate_ids().unwrap().is_empty());
}

#[test]
fn training_without_curations_lists_uncurated_ids() {
    let (_dir, ws) = prepared(4, 5, 2);
    let err = cmd_train(&ws, &ws.dataset_dir(), &quick("p", false, 0)).unwrap_err();
    match err {
        PipelineError::Uncurated(ids) => assert_eq!(ids.len(), 3),
        other => panic!("unexpected {other}"),
    }
    assert!(!ws.run_dir("p").join("model").exists());
}

#[test]
fn missing_paths_fail_before_anything_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path().join("fresh"));
    let missing = dir.path().join("no-dataset");
    assert!(matches!(cmd_train(&ws, &missing, &quick("r", true, 0)), Err(PipelineError::Missing(_))));
    assert!(matches!(cmd_eval(&ws, &missing, &EvalRequest::new("r")), Err(PipelineError::Missing(_))));
    let gen = cmd_gen(&ws, &missing, &MockLlm::paraphraser(), "m", &RetryPolicy::default(), 1);
    assert!(matches!(gen, Err(PipelineError::Missing(_))));
    assert!(!ws.out().exists());
}

#[test]
fn a_held_lock_blocks_other_commands() {
    let (_dir, ws) = prepared(2, 5, 3);
    let lock = PipelineLock::acquire(ws.out()).unwrap();
    let err = cmd_synth(&ws, 2, 5, 3).unwrap_err();
    assert!(matches!(err, PipelineError::Locked(..)), "{err}");
    drop(lock);
    assert!(!ws.out().join(".pipeline.lock").exists());
    cmd_synth(&ws, 2, 5, 3).unwrap();
}

#[test]
fn bad_run_names_are_rejected() {
    let (_dir, ws) = prepared(2, 5, 3);
    let req = TrainRequest { run: "../x".into(), ..quick("x", true, 0) };
    assert!(matches!(cmd_train(&ws, &ws.dataset_dir(), &req), Err(PipelineError::Invalid(_))));
}

/// synth → gen → curate → baseline → augmented → eval both → compare.
fn end_to_end(root: &Path) -> (String, String, String) {
    let ws = Workspace::new(root);
    cmd_synth(&ws, 4, 5, 5).unwrap();
    let ds = ws.dataset_dir();
    cmd_gen(&ws, &ds, &MockLlm::paraphraser(), "mock", &RetryPolicy::default(), 2).unwrap();
    assert_eq!(cmd_curate_accept_all(&ws, &ds, "auto").unwrap(), 4);
    let base = cmd_train(&ws, &ds, &quick("baseline", true, 1)).unwrap();
    let req = TrainRequest { base_run: Some("baseline".into()), ..quick("proposed", false, 1) };
    let aug = cmd_train(&ws, &ds, &req).unwrap();
    assert_eq!(base.frozen_digest, aug.frozen_digest);
    for f in ["model/config.json", "base/config.json", "stats.json", "split.json", "pretrain_loss.csv", "config.json"] {
        assert!(ws.run_dir("baseline").join(f).exists(), "{f}");
    }
    assert!(ws.run_dir("proposed").join("loss.csv").exists());

    let (ra, pa) = cmd_eval(&ws, &ds, &EvalRequest::new("baseline")).unwrap();
    let (rb, pb) = cmd_eval(&ws, &ds, &EvalRequest::new("proposed")).unwrap();
    assert_eq!(ra.records, 5 * 5, "one test trajectory, five paraphrases");
    assert_eq!(rb.n, ra.n);
    let canon = EvalRequest { instructions: InstructionChoice::Canonical, ..EvalRequest::new("proposed") };
    assert_eq!(cmd_eval(&ws, &ds, &canon).unwrap().0.records, 5);
    let cmp = cmd_compare(&ws, &pa, &pb).unwrap();
    assert_eq!(cmp.metrics.len(), 2);
    assert!(ws.reports_dir().join("compare.baseline.proposed.txt").exists());
    let read = |p: &Path| fs::read_to_string(p).unwrap();
    (read(&pa), read(&pb), cmp.to_json())
}

#[test]
fn full_workflow_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let first = end_to_end(&dir.path().join("one"));
    let second = end_to_end(&dir.path().join("two"));
    assert_eq!(first, second);
    assert!(first.0.contains("\"provenance\""));
}
