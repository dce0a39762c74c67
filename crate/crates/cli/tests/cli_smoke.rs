use std::path::Path;
use std::process::{Command, Output};

fn paravla(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paravla"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("VLA_LLM_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = paravla(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let checksum = ok(out, &["synth", "--n", "6", "--steps", "6", "--seed", "2"]);
    assert_eq!(checksum.trim().len(), 64);
    ok(out, &["gen", "--mock"]);
    assert_eq!(std::fs::read_dir(out.join("candidates")).unwrap().count(), 6);
    ok(out, &["curate", "--accept-all", "--curator", "ci"]);

    let small = ["--pretrain-epochs", "2", "--epochs", "2", "--test-fraction", "0.5"];
    let mut args = vec!["train", "--run", "base", "--single-instruction"];
    args.extend(small);
    ok(out, &args);
    let mut args = vec!["train", "--run", "aug", "--base-run", "base"];
    args.extend(small);
    ok(out, &args);
    assert!(out.join("runs/aug/model").is_dir());

    let table = ok(out, &["eval", "--run", "base"]);
    assert!(table.contains("Top-1"), "{table}");
    ok(out, &["eval", "--run", "aug", "--k", "0", "--k", "5"]);
    let a = out.join("reports/base.test.curated.json");
    let b = out.join("reports/aug.test.curated.json");
    assert!(a.is_file() && b.is_file());

    let cmp = ok(out, &["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(cmp.contains("delta (b - a)"), "{cmp}");
    assert!(out.join("reports/compare.base.aug.json").is_file());
    assert!(!out.join(".pipeline.lock").exists());
}

#[test]
fn fixture_replies_are_parsed() {
    let dir = tempfile::tempdir().unwrap();
    let reply = dir.path().join("reply.txt");
    std::fs::write(&reply, "No. 1 Pick up the cube.\nNo. 2 Grab it.\nNo. 3 Lift it.\nNo. 4 Take it.\nNo. 5 Get it.\n")
        .unwrap();
    let out = dir.path().join("out");
    ok(&out, &["synth", "--n", "2", "--steps", "5"]);
    ok(&out, &["gen", "--fixture", reply.to_str().unwrap()]);
    let set = std::fs::read_to_string(out.join("candidates/traj_0000.json")).unwrap();
    assert!(set.contains("Grab it."));
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let o = paravla(&out, &["train", "--run", "x"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("error:"), "{err}");
    assert!(!out.exists(), "nothing written on a missing dataset");

    ok(&out, &["synth", "--n", "2", "--steps", "5"]);
    let o = paravla(&out, &["gen"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("VLA_LLM_ENDPOINT"));

    let o = paravla(&out, &["eval", "--run", "nope"]);
    assert!(!o.status.success());
}

#[test]
fn config_file_sets_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"split": {"test_fraction": 0.5, "seed": 3}, "pretrain": {"epochs": 1}}"#).unwrap();
    ok(&out, &["synth", "--n", "4", "--steps", "5"]);
    ok(&out, &["--config", cfg.to_str().unwrap(), "train", "--run", "b", "--single-instruction"]);
    let split: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("runs/b/split.json")).unwrap()).unwrap();
    assert_eq!(split["test"].as_array().unwrap().len(), 2);

    std::fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    let o = paravla(&out, &["--config", cfg.to_str().unwrap(), "synth"]);
    assert!(!o.status.success());
}
