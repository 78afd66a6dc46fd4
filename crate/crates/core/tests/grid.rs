//! Experiment grid plumbing on tiny untrained models.

use std::path::{Path, PathBuf};

use dtmerge_core::checkpoint::Checkpoint;
use dtmerge_core::dataset::{generate_dataset, DatasetQuality};
use dtmerge_core::dt::{DtModel, EnvBinding, TrainConfig};
use dtmerge_core::env::EnvKind;
use dtmerge_core::grid::{run_grid, Experiment, GridConfig};
use dtmerge_core::{ArchConfig, Error};

fn artifacts(dir: &Path) -> (Vec<PathBuf>, Vec<PathBuf>) {
    let arch = ArchConfig {
        d_embed: 8,
        d_mlp: 32,
        context_positions: 15,
        ..ArchConfig::default()
    };
    let mut models = Vec::new();
    let mut data = Vec::new();
    for (i, kind) in [EnvKind::PointMass2D, EnvKind::Swing].into_iter().enumerate() {
        let ds = generate_dataset(kind, DatasetQuality::Expert, 4, i as u64).unwrap();
        let m = DtModel::new(arch.clone(), EnvBinding::from_dataset(&ds), 30 + i as u64).unwrap();
        let (mp, dp) = (dir.join(format!("{kind}.dtmc")), dir.join(format!("{kind}.dtds")));
        Checkpoint::from_model(&m).save(&mp).unwrap();
        ds.save(&dp).unwrap();
        models.push(mp);
        data.push(dp);
    }
    (models, data)
}

fn config(experiment: Experiment, models: Vec<PathBuf>) -> GridConfig {
    GridConfig {
        run_id: experiment.name().into(),
        experiment,
        models,
        episodes: 2,
        seed: 4,
        train: TrainConfig {
            steps: 4,
            batch_size: 4,
            ..TrainConfig::default()
        },
        epochs: 2,
        ..GridConfig::default()
    }
}

#[test]
fn attention_sweep_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (models, _) = artifacts(dir.path());
    let cfg = GridConfig {
        coefficients: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        ..config(Experiment::AttentionSweep, models)
    };
    let a = run_grid(&cfg).unwrap();
    assert_eq!(a.rows.len(), 2 * 5);
    assert!(!a.failed());
    assert_eq!(a.baselines.len(), 2);
    // lambda = 0 keeps model A intact
    let first = &a.rows[0];
    assert_eq!(first.env, "pointmass2d");
    assert!((first.pct_of_original.unwrap() - 100.0).abs() < 1e-9);
    let b = run_grid(&cfg).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn single_layer_at_zero_is_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (models, _) = artifacts(dir.path());
    let cfg = GridConfig {
        coefficients: vec![0.0],
        ..config(Experiment::SingleLayer, models)
    };
    let r = run_grid(&cfg).unwrap();
    // 2 directions x 13 units, then 13 mean rows
    assert_eq!(r.rows.len(), 2 * 13 + 13);
    for row in &r.rows {
        assert!((row.pct_of_original.unwrap() - 100.0).abs() < 1e-9, "{row:?}");
    }
    assert!(r.rows[26..].iter().all(|row| row.env == "mean"));
    assert!(r.notes.contains_key("l2_distance/pointmass2d-swing"));
}

#[test]
fn failing_cells_are_marked_and_the_rest_still_run() {
    let dir = tempfile::tempdir().unwrap();
    let (models, _) = artifacts(dir.path());
    let cfg = GridConfig {
        coefficients: vec![0.5, 1.5],
        ..config(Experiment::AttentionSweep, models)
    };
    let r = run_grid(&cfg).unwrap();
    assert!(r.failed());
    assert_eq!(r.rows.len(), 4);
    assert!(r.rows[..2].iter().all(|row| row.error.is_none()));
    assert!(r.rows[2..].iter().all(|row| row.error.is_some()));
    assert!(r.to_csv().contains("FAILED"));
}

#[test]
fn missing_artifacts_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let (mut models, _) = artifacts(dir.path());
    let missing = dir.path().join("nope.dtmc");
    models.push(missing.clone());
    match run_grid(&config(Experiment::Perturb, models)) {
        Err(Error::MissingArtifact(p)) => assert_eq!(p, missing),
        other => panic!("expected a missing artifact, got {:?}", other.map(|r| r.rows.len())),
    }
}

#[test]
fn perturb_mff_and_init_transfer_grids_run() {
    let dir = tempfile::tempdir().unwrap();
    let (models, data) = artifacts(dir.path());
    let perturb = run_grid(&config(Experiment::Perturb, models.clone())).unwrap();
    assert_eq!(perturb.rows.len(), 2 * 3);
    assert!(!perturb.failed());

    let mff = run_grid(&GridConfig {
        datasets: data.clone(),
        selectors: vec!["attention".into()],
        ..config(Experiment::Mff, models.clone())
    })
    .unwrap();
    assert!(!mff.failed(), "{:?}", mff.rows.iter().find(|r| r.error.is_some()));
    // M and MFF rows for the pair plus two frozen-transfer rows
    assert_eq!(mff.rows.len(), 2 + 2 + 2);
    assert!(mff.notes.contains_key("size/attention/2"));

    let curves = run_grid(&GridConfig {
        datasets: data,
        ..config(Experiment::InitTransfer, models)
    })
    .unwrap();
    assert!(!curves.failed());
    // per target: random, from other, merged attention, merged transformer; epochs 0..=2
    assert_eq!(curves.rows.len(), 2 * 4 * 3);
}
