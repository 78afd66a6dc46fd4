//! The `dtmerge` binary against the library.

use std::path::Path;
use std::process::{Command, Output};

use dtmerge_core::checkpoint::Checkpoint;
use dtmerge_core::dataset::{generate_dataset, DatasetQuality};
use dtmerge_core::dt::{evaluate, DtModel, EnvBinding, EvalResult};
use dtmerge_core::env::EnvKind;
use dtmerge_core::merge::interpolate;
use dtmerge_core::report::CSV_HEADER;
use dtmerge_core::rng::derive_seed;
use dtmerge_core::{ArchConfig, LayerSelector};

fn dtmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtmerge")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_model(kind: EnvKind, seed: u64) -> DtModel {
    let ds = generate_dataset(kind, DatasetQuality::Expert, 3, seed).unwrap();
    let arch = ArchConfig {
        d_embed: 8,
        d_mlp: 32,
        context_positions: 15,
        ..ArchConfig::default()
    };
    DtModel::new(arch, EnvBinding::from_dataset(&ds), seed).unwrap()
}

#[test]
fn merge_then_eval_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (tiny_model(EnvKind::Swing, 1), tiny_model(EnvKind::Arm2, 2));
    let (pa, pb, pm, pe) = (
        dir.path().join("a.dtmc"),
        dir.path().join("b.dtmc"),
        dir.path().join("m.dtmc"),
        dir.path().join("eval.json"),
    );
    Checkpoint::from_model(&a).save(&pa).unwrap();
    Checkpoint::from_model(&b).save(&pb).unwrap();
    let out = dtmerge(&["merge", "--a", p(&pa), "--b", p(&pb), "--select", "attention", "--lambda", "0.5", "--out", p(&pm)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = dtmerge(&["eval", "--model", p(&pm), "--episodes", "3", "--seed", "7", "--out", p(&pe)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let from_cli: EvalResult = serde_json::from_slice(&std::fs::read(&pe).unwrap()).unwrap();

    let params = interpolate(&a.params, &b.params, 0.5, &LayerSelector::AttentionAll).unwrap();
    let merged = DtModel { params, ..a };
    let loaded = Checkpoint::load(&pm).unwrap().into_model().unwrap();
    assert!(loaded.params.bit_eq(&merged.params));
    let lib = evaluate(&merged, 1.0, 3, derive_seed(7, "eval")).unwrap();
    assert_eq!(from_cli, lib);
    assert_eq!(
        from_cli.episode_returns.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        lib.episode_returns.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn damaged_inputs_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.dtmc");
    let bytes = Checkpoint::from_model(&tiny_model(EnvKind::PointMass2D, 3)).to_bytes().unwrap();
    std::fs::write(&good, &bytes).unwrap();

    let truncated = dir.path().join("truncated.dtmc");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let out_path = dir.path().join("out.dtmc");
    let out = dtmerge(&["perturb", "--model", p(&truncated), "--mode", "identity", "--out", p(&out_path)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out_path.exists());
    let out = dtmerge(&["merge", "--a", p(&good), "--b", p(&truncated), "--lambda", "0.5", "--out", p(&out_path)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out_path.exists());

    let mut wrong = bytes.clone();
    wrong[..4].copy_from_slice(b"NOPE");
    let bad_magic = dir.path().join("magic.dtmc");
    std::fs::write(&bad_magic, wrong).unwrap();
    assert_eq!(dtmerge(&["eval", "--model", p(&bad_magic)]).status.code(), Some(3));

    let mut newer = bytes.clone();
    newer[4..6].copy_from_slice(&99u16.to_le_bytes());
    let version = dir.path().join("version.dtmc");
    std::fs::write(&version, newer).unwrap();
    assert_eq!(dtmerge(&["eval", "--model", p(&version)]).status.code(), Some(4));

    assert_eq!(dtmerge(&["eval", "--model", p(&good), "--frobnicate"]).status.code(), Some(2));
    assert_eq!(dtmerge(&["merge", "--a", p(&good)]).status.code(), Some(2));
    assert_eq!(dtmerge(&["merge", "--a", p(&good), "--b", p(&good), "--select", "bogus", "--lambda", "0.5", "--out", "x"]).status.code(), Some(2));

    let missing = dtmerge(&["eval", "--model", "/nonexistent/m.dtmc"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/m.dtmc"));
}

#[test]
fn grid_and_report_commands() {
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.dtmc"), dir.path().join("b.dtmc"));
    Checkpoint::from_model(&tiny_model(EnvKind::PointMass2D, 4)).save(&pa).unwrap();
    Checkpoint::from_model(&tiny_model(EnvKind::Swing, 5)).save(&pb).unwrap();
    let cfg = dir.path().join("grid.json");
    let grid = serde_json::json!({
        "run_id": "sweep",
        "experiment": "attention_sweep",
        "models": [pa, pb],
        "coefficients": [0.0, 0.5, 1.0],
        "episodes": 2,
        "seed": 3
    });
    std::fs::write(&cfg, serde_json::to_vec(&grid).unwrap()).unwrap();
    let reports = dir.path().join("reports");
    let out = dtmerge(&["grid", "--config", p(&cfg), "--out-dir", p(&reports)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(reports.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(csv.lines().count(), 1 + 6);

    let out = dtmerge(&["report", "--in", p(&reports.join("sweep.json")), "--format", "csv"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);

    // re-running with the same seeds reproduces the same bytes under the same run id
    let again = dtmerge(&["grid", "--config", p(&cfg), "--out-dir", p(&reports)]);
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    assert_eq!(std::fs::read_to_string(reports.join("sweep.csv")).unwrap(), csv);

    // a failing cell still writes the partial report and exits nonzero
    let bad = serde_json::json!({
        "run_id": "bad",
        "experiment": "attention_sweep",
        "models": [pa, pb],
        "coefficients": [0.5, 2.0],
        "episodes": 2
    });
    std::fs::write(&cfg, serde_json::to_vec(&bad).unwrap()).unwrap();
    let out = dtmerge(&["grid", "--config", p(&cfg), "--out-dir", p(&reports)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(std::fs::read_to_string(reports.join("bad.csv")).unwrap().contains("FAILED"));
}

#[test]
fn end_to_end_small_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    for (env, name) in [("pointmass2d", "p"), ("arm2", "a")] {
        let ds = d(&format!("{name}.dtds"));
        let out = dtmerge(&["gen-data", "--env", env, "--trajectories", "4", "--out", p(&ds)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = dtmerge(&[
            "train", "--data", p(&ds), "--out", p(&d(&format!("{name}.dtmc"))), "--steps", "3", "--batch-size", "4",
            "--d-embed", "8", "--context", "5",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = dtmerge(&[
        "mff", "--models", p(&d("p.dtmc")), p(&d("a.dtmc")), "--data", p(&d("p.dtds")), p(&d("a.dtds")),
        "--select", "attention+mlp", "--steps", "3", "--batch-size", "4", "--audit-every", "1", "--out", p(&d("bundle")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = dtmerge(&["eval", "--bundle", p(&d("bundle")), "--task", "1", "--episodes", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: EvalResult = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r.env, EnvKind::Arm2);
    let out = dtmerge(&["attention", "--model", p(&d("p.dtmc")), "--transitions", "5", "--out", p(&d("attn.csv"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(d("attn.csv")).unwrap().lines().count(), 1 + 3 * 15);
}
