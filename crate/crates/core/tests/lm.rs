//! Language-model pretraining, token clustering and co-training.

use dtmerge_core::dataset::{generate_dataset, DatasetQuality};
use dtmerge_core::dt::{train_step, BatchSampler, OptimConfig};
use dtmerge_core::env::EnvKind;
use dtmerge_core::lm::{
    cluster_token_embeddings, cotrain_step, dt_from_lm, is_lm_param, kmeans, pretrain_lm, sample_lm_batch,
    unigram_perplexity, CoTrainConfig, Corpus, LmModel, LmTrainConfig,
};
use dtmerge_core::rng::substream;
use dtmerge_core::{Activation, ArchConfig};
use dtmerge_tensor::Tensor;
use rand::Rng;

fn arch() -> ArchConfig {
    ArchConfig {
        d_embed: 16,
        d_mlp: 64,
        context_positions: 30,
        activation: Activation::Gelu,
        dropout: 0.0,
        ..ArchConfig::default()
    }
}

#[test]
fn corpus_properties() {
    let c = Corpus::generate(9, 50_000).unwrap();
    assert_eq!(c.tokens.len(), 50_000);
    assert_eq!(c.train_tokens().len() + c.holdout_tokens().len(), 50_000);
    assert!(c.holdout_tokens().len() >= 2_000);
    let text = c.decode(&c.tokens[..200]);
    assert!(text.contains(' '));
    let uni = unigram_perplexity(&c);
    assert!(uni > 5.0 && uni < c.vocab_size() as f64, "{uni}");
}

#[test]
fn pretraining_lowers_holdout_loss() {
    let c = Corpus::generate(1, 40_000).unwrap();
    let cfg = LmTrainConfig {
        steps: 150,
        batch_size: 8,
        optimizer: OptimConfig {
            lr: 3e-3,
            ..OptimConfig::default()
        },
        seed: 2,
    };
    let before = LmModel::new(arch(), c.vocab_size(), cfg.seed).unwrap().holdout_loss(&c, 16).unwrap();
    let (lm, losses) = pretrain_lm(&c, &arch(), &cfg).unwrap();
    assert_eq!(losses.len(), 150);
    let after = lm.holdout_loss(&c, 16).unwrap();
    assert!(after < before - 0.5, "{before} -> {after}");
    assert!(lm.perplexity(&c, 16).unwrap() < unigram_perplexity(&c));
    let (again, _) = pretrain_lm(&c, &arch(), &cfg).unwrap();
    assert!(again.params.bit_eq(&lm.params));
}

#[test]
fn kmeans_objective_is_nonincreasing() {
    let mut rng = substream(3, "points");
    let pts = Tensor::from_fn(&[200, 5], |_| rng.random_range(-1.0..1.0));
    for k in [2, 8, 32] {
        let km = kmeans(&pts, k, 4, 100).unwrap();
        assert!(km.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9), "k={k}: {:?}", km.objective);
        assert_eq!(km.centers.shape(), [k, 5]);
        assert!(km.assignments.iter().all(|&a| a < k));
        let again = kmeans(&pts, k, 4, 100).unwrap();
        assert!(again.centers.bit_eq(&km.centers));
    }
    assert!(kmeans(&pts, 0, 0, 10).is_err());
    assert!(kmeans(&pts, 201, 0, 10).is_err());
}

#[test]
fn cotraining_without_auxiliary_terms_is_plain_training() {
    let c = Corpus::generate(5, 20_000).unwrap();
    let lm = LmModel::new(arch(), c.vocab_size(), 6).unwrap();
    let ds = generate_dataset(EnvKind::Swing, DatasetQuality::Expert, 4, 1).unwrap();
    let base = dt_from_lm(&lm, &ds, 7).unwrap();
    let centers = cluster_token_embeddings(&lm, 4, 8).unwrap().centers;
    let batch = BatchSampler::new(&ds, base.k(), 9).unwrap().sample(4).unwrap();
    let (input, target) = sample_lm_batch(c.train_tokens(), 2, 30, &mut substream(1, "lm"));
    let config = CoTrainConfig {
        lambda1_init: 0.0,
        lambda2: 0.0,
        ..CoTrainConfig::default()
    };
    let opt_cfg = OptimConfig::default();

    let mut co = base.clone();
    let losses = cotrain_step(&mut co, &mut opt_cfg.adamw(), &batch, &input, &target, &centers, &config, 11).unwrap();
    assert_eq!(losses.total, losses.mse);

    let mut plain = base.clone();
    plain.params = plain.params.filter(|n| !is_lm_param(n));
    let mse = train_step(&mut plain, &mut opt_cfg.adamw(), &batch, 11, &|_| false).unwrap();
    assert_eq!(mse, losses.mse);
    for (name, t) in plain.params.iter() {
        assert!(t.bit_eq(&co.params[name]), "{name}");
    }

    // with the LM term on, the trunk moves differently
    let mut with_lm = base.clone();
    let on = CoTrainConfig {
        lambda1_init: 0.0,
        ..CoTrainConfig::default()
    };
    let l = cotrain_step(&mut with_lm, &mut opt_cfg.adamw(), &batch, &input, &target, &centers, &on, 11).unwrap();
    assert!((l.total - (l.mse + l.lm)).abs() < 1e-4);
    assert!(!with_lm.params["block0.attn.q.weight"].bit_eq(&co.params["block0.attn.q.weight"]));
    assert!(l.cos >= 0.0 && l.cos <= 2.0);
}

#[test]
fn lambda1_is_zero_after_decay() {
    let c = CoTrainConfig::default();
    assert_eq!(c.lambda1(5_001), 0.0);
    assert_eq!(c.lambda1(1_000_000), 0.0);
    assert!(c.lambda1(4_999) > 0.0);
}
