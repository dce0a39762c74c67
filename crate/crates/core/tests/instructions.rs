use std::collections::BTreeMap;
use std::thread;

use paravla_core::dataset::{export, synthesize};
use paravla_core::instruction::{
    build_prompt, pair, parse_candidates, CuratedSet, CurationRequest, CurationService, CurationStore,
    InstructionError, LlmClient, MockLlm,
};
use proptest::prelude::*;

/// Dataset of `n` trajectories with mock candidates stored for all of them.
fn service(n: usize) -> (tempfile::TempDir, CurationService) {
    let dir = tempfile::tempdir().unwrap();
    let trajs = synthesize(n, 7, 2).unwrap();
    export(&dir.path().join("dataset"), &trajs, None).unwrap();
    let store = CurationStore::open(dir.path()).unwrap();
    for t in &trajs {
        let p = build_prompt(t).unwrap();
        let raw = MockLlm::paraphraser().complete(&p).unwrap();
        store.save_candidates(&parse_candidates(&raw, &t.id).unwrap()).unwrap();
    }
    let svc = CurationService::new(store, &dir.path().join("dataset")).unwrap();
    (dir, svc)
}

fn texts(svc: &CurationService, id: &str) -> Vec<String> {
    svc.detail(id).unwrap().candidates.texts().map(String::from).collect()
}

#[test]
fn curation_round_trip_through_the_service() {
    let (_dir, svc) = service(3);
    let list = svc.list().unwrap();
    assert_eq!(list.len(), 3);
    assert!(list.iter().all(|s| !s.curated && s.candidates == 5 && s.steps == 7));

    let id = &list[1].id;
    let detail = svc.detail(id).unwrap();
    assert_eq!(detail.keyframes.iter().map(|k| k.frame_index).collect::<Vec<_>>(), [0, 3, 6]);
    assert_eq!(detail.keyframes[2].url, format!("/api/trajectories/{id}/frames/6"));

    let chosen = texts(&svc, id);
    let saved = svc.submit(id, CurationRequest { selected: chosen.clone(), curator: "ana".into() }).unwrap();
    assert_eq!(saved.selected, chosen);
    assert!(chrono::DateTime::parse_from_rfc3339(&saved.timestamp).is_ok());

    let list = svc.list().unwrap();
    assert_eq!(list.iter().filter(|s| s.curated).count(), 1);
    assert_eq!(svc.detail(id).unwrap().curation.unwrap().selected, chosen);

    // re-curation replaces the previous selection
    svc.submit(id, CurationRequest { selected: chosen[..2].to_vec(), curator: "ana".into() }).unwrap();
    assert_eq!(svc.store().load_curation(id).unwrap().unwrap().selected, chosen[..2]);
}

#[test]
fn invalid_curations_are_rejected_and_not_persisted() {
    let (_dir, svc) = service(1);
    let id = "traj_0000";
    let mut chosen = texts(&svc, id);
    let req = |selected: Vec<String>| CurationRequest { selected, curator: "c".into() };
    assert!(matches!(svc.submit(id, req(vec![])), Err(InstructionError::InvalidCuration(_))));
    assert!(matches!(svc.submit(id, req(vec!["invented".into()])), Err(InstructionError::InvalidCuration(_))));
    let dup = vec![chosen[0].clone(), chosen[0].clone()];
    assert!(matches!(svc.submit(id, req(dup)), Err(InstructionError::InvalidCuration(_))));
    chosen.push(chosen[0].clone());
    assert!(matches!(svc.submit(id, req(chosen)), Err(InstructionError::InvalidCuration(_))));
    assert!(matches!(svc.submit("traj_9999", req(vec![])), Err(InstructionError::NotFound(_))));
    assert!(matches!(svc.submit("../etc", req(vec![])), Err(InstructionError::NotFound(_))));
    assert!(svc.store().load_curation(id).unwrap().is_none());
}

#[test]
fn frames_are_served_as_png() {
    let (_dir, svc) = service(1);
    let png = svc.frame_png("traj_0000", 3).unwrap();
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    assert!(matches!(svc.frame_png("traj_0000", 7), Err(InstructionError::NotFound(_))));
}

#[test]
fn concurrent_submissions_leave_valid_files() {
    let (_dir, svc) = service(4);
    let ids: Vec<String> = svc.list().unwrap().into_iter().map(|s| s.id).collect();
    thread::scope(|s| {
        for round in 0..4 {
            for id in &ids {
                let svc = &svc;
                s.spawn(move || {
                    let t = texts(svc, id);
                    let req = CurationRequest { selected: t[..1 + round].to_vec(), curator: format!("c{round}") };
                    svc.submit(id, req).unwrap();
                });
            }
        }
    });
    for id in &ids {
        let c = svc.store().load_curation(id).unwrap().unwrap();
        let cands = svc.store().load_candidates(id).unwrap().unwrap();
        c.validate_against(&cands).unwrap();
    }
}

#[test]
fn accept_all_skips_curated_trajectories() {
    let (_dir, svc) = service(3);
    let t = texts(&svc, "traj_0001");
    svc.submit("traj_0001", CurationRequest { selected: t[..1].to_vec(), curator: "x".into() }).unwrap();
    assert_eq!(svc.accept_all("auto").unwrap(), 2);
    assert_eq!(svc.store().load_curations().unwrap().len(), 3);
    assert_eq!(svc.store().load_curation("traj_0001").unwrap().unwrap().selected.len(), 1);
    assert_eq!(svc.accept_all("auto").unwrap(), 0);
}

fn curated(k: usize) -> BTreeMap<String, CuratedSet> {
    let set = CuratedSet {
        trajectory_id: "t".into(),
        selected: (0..k).map(|i| format!("s{i}")).collect(),
        curator: "c".into(),
        timestamp: String::new(),
    };
    BTreeMap::from([("t".to_string(), set)])
}

#[test]
fn pairing_frequencies_are_uniform_within_five_sigma() {
    let sets = curated(5);
    let draws = 10_000;
    let mut counts = [0usize; 5];
    for epoch in 0..draws {
        let s = pair(&sets, "t", epoch, 42).unwrap();
        counts[s[1..].parse::<usize>().unwrap()] += 1;
    }
    let p = 0.2;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let mut chi2 = 0.0;
    for c in counts {
        let dev = c as f64 - draws as f64 * p;
        assert!(dev.abs() <= 5.0 * sigma, "{counts:?}");
        chi2 += dev * dev / (draws as f64 * p);
    }
    // 4 degrees of freedom; 0.999 quantile is 18.47
    assert!(chi2 < 18.47, "chi2 {chi2}");
}

#[test]
fn pairing_errors_for_uncurated_ids() {
    let err = pair(&curated(2), "other", 0, 0).unwrap_err();
    assert_eq!(err.to_string(), "trajectory uncurated: other");
}

proptest! {
    #[test]
    fn pairing_is_a_pure_function(seed in any::<u64>(), epoch in 0usize..10_000, k in 1usize..=5) {
        let sets = curated(k);
        let a = pair(&sets, "t", epoch, seed).unwrap();
        prop_assert_eq!(a, pair(&sets, "t", epoch, seed).unwrap());
        prop_assert!(sets["t"].selected.iter().any(|s| s == a));
    }
}
