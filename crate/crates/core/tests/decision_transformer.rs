//! Environments, datasets, tokenization and the DT forward/backward pass.

use dtmerge_core::dataset::{generate_dataset, DatasetQuality, OfflineDataset};
use dtmerge_core::dt::{compute_rtg, detokenize, evaluate, BatchSampler, DtBatch, DtModel, EnvBinding, Window};
use dtmerge_core::env::{self, EnvKind, References};
use dtmerge_core::rng::substream;
use dtmerge_core::transformer::bind_params;
use dtmerge_core::{ArchConfig, Error};
use dtmerge_tensor::Graph;
use rand::Rng;

fn small_arch() -> ArchConfig {
    ArchConfig {
        d_embed: 8,
        d_mlp: 32,
        context_positions: 15,
        dropout: 0.0,
        ..ArchConfig::default()
    }
}

fn dataset(kind: EnvKind) -> OfflineDataset {
    generate_dataset(kind, DatasetQuality::MediumExpert, 6, 11).unwrap()
}

#[test]
fn rtg_matches_brute_force() {
    let mut rng = substream(5, "rewards");
    let rewards: Vec<f32> = (0..1000).map(|_| rng.random_range(-3.0..1.0)).collect();
    let rtg = compute_rtg(&rewards).unwrap();
    for t in (0..1000).step_by(7) {
        let want: f64 = rewards[t..].iter().map(|&r| r as f64).sum();
        assert!((rtg[t] as f64 - want).abs() <= 1e-3 * want.abs().max(1.0), "t={t}");
    }
    assert_eq!(rtg[999], rewards[999]);
    assert!(matches!(compute_rtg(&[]), Err(Error::EmptySequence)));
}

#[test]
fn datasets_are_deterministic_and_round_trip() {
    for kind in EnvKind::ALL {
        let a = dataset(kind);
        let b = dataset(kind);
        assert_eq!(a, b);
        assert_eq!(a.trajectories.len(), 12);
        let bytes = a.to_bytes().unwrap();
        assert_eq!(OfflineDataset::from_bytes(&bytes).unwrap(), a);
        assert_eq!(OfflineDataset::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
        assert_ne!(generate_dataset(kind, DatasetQuality::Expert, 6, 12).unwrap().trajectories, a.trajectories[6..]);
        let spec = kind.spec();
        for t in &a.trajectories {
            assert_eq!(t.len(), spec.horizon);
            assert!(t.actions.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(t.states.len(), t.len() * spec.state_dim);
        }
    }
}

#[test]
fn references_are_ordered() {
    for kind in EnvKind::ALL {
        let r = References::compute(kind).unwrap();
        assert!(r.random < r.medium && r.medium < r.expert, "{kind}: {r:?}");
        assert_eq!(r.normalize(r.random as f64).unwrap(), 0.0);
        assert!((r.normalize(r.expert as f64).unwrap() - 100.0).abs() < 1e-9);
    }
}

#[test]
fn env_steps_are_deterministic_and_clipped() {
    for kind in EnvKind::ALL {
        let spec = kind.spec();
        let s = env::reset(kind, 3);
        let big = vec![5.0; spec.action_dim];
        let one = vec![1.0; spec.action_dim];
        assert_eq!(env::step(kind, &s, &big).unwrap(), env::step(kind, &s, &one).unwrap());
        assert_eq!(env::step(kind, &s, &one).unwrap(), env::step(kind, &s, &one).unwrap());
        assert!(env::step(kind, &s, &vec![0.0; spec.action_dim + 1]).is_err());
    }
}

#[test]
fn tokens_round_trip() {
    let ds = dataset(EnvKind::Arm2);
    let (sd, ad) = (6, 2);
    let traj = &ds.trajectories[3];
    let rtg = compute_rtg(&traj.rewards).unwrap();
    let windows: Vec<Window> = [0, 40, 95]
        .iter()
        .map(|&s| Window::from_trajectory(traj, &rtg, s, 5, sd, ad))
        .collect();
    let batch = DtBatch::from_windows(&windows, 5, sd, ad).unwrap();
    for (b, w) in windows.iter().enumerate() {
        let tokens = batch.tokens(b);
        assert_eq!(tokens.len(), 3 * w.len());
        assert_eq!(&detokenize(&tokens, w.timesteps[0]).unwrap(), w);
    }
    // the last window is right-padded
    assert_eq!(windows[2].len(), 5);
    let short = Window::from_trajectory(traj, &rtg, 98, 5, sd, ad);
    let padded = DtBatch::from_windows(&[short], 5, sd, ad).unwrap();
    assert_eq!(padded.mask, vec![true, true, false, false, false]);
}

#[test]
fn fully_padded_batch_is_rejected() {
    let ds = dataset(EnvKind::PointMass2D);
    let model = DtModel::new(small_arch(), EnvBinding::from_dataset(&ds), 1).unwrap();
    let empty = Window {
        rtg: vec![],
        states: vec![],
        actions: vec![],
        timesteps: vec![],
    };
    let batch = DtBatch::from_windows(&[empty.clone(), empty], 5, 4, 2).unwrap();
    let mut g = Graph::new();
    let vars = bind_params(&mut g, &model.params, |_| false).unwrap();
    assert!(model.loss(&mut g, &vars, &batch).is_err());
    assert!(matches!(model.act(&batch), Err(Error::EmptySequence)));
}

#[test]
fn dt_loss_gradient_matches_finite_differences() {
    let ds = dataset(EnvKind::Swing);
    let model = DtModel::new(small_arch(), EnvBinding::from_dataset(&ds), 2).unwrap();
    let batch = BatchSampler::new(&ds, model.k(), 3).unwrap().sample(3).unwrap();
    let loss_of = |m: &DtModel| -> f64 {
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &m.params, |_| true).unwrap();
        let (l, _) = m.loss(&mut g, &vars, &batch).unwrap();
        g.value(l).item() as f64
    };
    let mut g = Graph::new();
    let vars = bind_params(&mut g, &model.params, |_| false).unwrap();
    let (loss, _) = model.loss(&mut g, &vars, &batch).unwrap();
    let grads = g.backward(loss).unwrap();
    let h = 1e-3f32;
    let mut rng = substream(4, "probe");
    let mut worst = 0.0f64;
    for (name, var) in &vars {
        let analytic = grads.get_or_zero(*var);
        for _ in 0..3 {
            let i = rng.random_range(0..analytic.numel());
            let mut plus = model.clone();
            plus.params.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = model.clone();
            minus.params.get_mut(name).unwrap().data_mut()[i] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h as f64);
            let a = analytic.data()[i] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    assert!(worst < 5e-2, "worst relative error {worst}");
}

#[test]
fn evaluation_is_deterministic() {
    let ds = dataset(EnvKind::PointMass2D);
    let model = DtModel::new(small_arch(), EnvBinding::from_dataset(&ds), 5).unwrap();
    let a = evaluate(&model, 1.0, 4, 9).unwrap();
    let b = evaluate(&model, 1.0, 4, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.episode_returns.len(), 4);
    let c = evaluate(&model, 1.0, 4, 10).unwrap();
    assert_ne!(a.episode_returns, c.episode_returns);
    let mean = a.episode_returns.iter().sum::<f64>() / 4.0;
    assert!((a.mean_return - mean).abs() < 1e-9);
    assert!((a.normalized - ds.references.normalize(mean).unwrap()).abs() < 1e-9);
}

#[test]
fn forward_rejects_wrong_env_dimensions() {
    let ds = dataset(EnvKind::PointMass2D);
    let model = DtModel::new(small_arch(), EnvBinding::from_dataset(&ds), 5).unwrap();
    let other = dataset(EnvKind::Arm2);
    let batch = BatchSampler::new(&other, model.k(), 1).unwrap().sample(2).unwrap();
    let mut g = Graph::new();
    let vars = bind_params(&mut g, &model.params, |_| true).unwrap();
    assert!(matches!(model.forward(&mut g, &vars, &batch), Err(Error::Dimension { .. })));
}
