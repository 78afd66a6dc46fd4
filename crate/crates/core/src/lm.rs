//! Character-level language-model pretraining of the shared trunk, k-means
//! over its token embeddings, and DT co-training with auxiliary cosine and
//! language-modeling losses.
//!
//! LM-specific parameters live under `lm_head.`:
//!
//! ```text
//! lm_head.token_embed.weight  [vocab, d]
//! lm_head.pos_embed.weight    [context, d]
//! lm_head.out.{weight|bias}   [d, vocab] / [vocab]
//! ```

use std::ops::ControlFlow;

use dtmerge_tensor::{AdamW, Graph, ParameterTree, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Activation, ArchConfig};
use crate::dataset::OfflineDataset;
use crate::dt::{check_loss, collect_grads, BatchSampler, DtBatch, DtModel, OptimConfig};
use crate::rng::{derive_seed, substream};
use crate::transformer::{self, bind_params, init_transformer, model_forward, var, VarMap};
use crate::{Error, Result};

pub const LM_PREFIX: &str = "lm_head.";

const DETERMINERS: &[&str] = &["the", "a", "every", "some", "this", "that", "no", "one"];
const ADJECTIVES: &[&str] = &[
    "quick", "lazy", "green", "quiet", "bright", "small", "heavy", "curious", "old", "young", "wet", "frozen",
];
const NOUNS: &[&str] = &[
    "fox", "dog", "river", "lamp", "garden", "robot", "engine", "bird", "valley", "kettle", "wizard", "jazz",
    "mountain", "queen", "box", "pixel",
];
const VERBS: &[&str] = &[
    "sees", "likes", "moves", "jumps over", "follows", "builds", "carries", "watches", "fixes", "quizzes",
];
const ADVERBS: &[&str] = &["slowly", "quickly", "often", "never", "gladly", "rarely"];
const PREPOSITIONS: &[&str] = &["near", "under", "behind", "with", "beyond", "inside"];

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut String) {
    out.push_str(DETERMINERS.choose(rng).expect("nonempty"));
    out.push(' ');
    if rng.random_bool(0.5) {
        out.push_str(ADJECTIVES.choose(rng).expect("nonempty"));
        out.push(' ');
    }
    out.push_str(NOUNS.choose(rng).expect("nonempty"));
    if rng.random_bool(0.2) {
        out.push(' ');
        out.push_str(PREPOSITIONS.choose(rng).expect("nonempty"));
        out.push(' ');
        out.push_str(DETERMINERS.choose(rng).expect("nonempty"));
        out.push(' ');
        out.push_str(NOUNS.choose(rng).expect("nonempty"));
    }
}

fn clause(rng: &mut ChaCha8Rng, out: &mut String) {
    noun_phrase(rng, out);
    out.push(' ');
    if rng.random_bool(0.25) {
        out.push_str(ADVERBS.choose(rng).expect("nonempty"));
        out.push(' ');
    }
    out.push_str(VERBS.choose(rng).expect("nonempty"));
    out.push(' ');
    noun_phrase(rng, out);
}

fn sentence(rng: &mut ChaCha8Rng, out: &mut String) {
    let start = out.len();
    clause(rng, out);
    while rng.random_bool(0.3) {
        out.push_str(if rng.random_bool(0.5) { ", and " } else { "; " });
        clause(rng, out);
    }
    let first = out[start..start + 1].to_ascii_uppercase();
    out.replace_range(start..start + 1, &first);
    let end = match rng.random_range(0..10) {
        0 => '!',
        1 => '?',
        _ => '.',
    };
    out.push(end);
}

/// Deterministic synthetic text over a character vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub vocab: Vec<char>,
    pub tokens: Vec<usize>,
}

pub const DEFAULT_CORPUS_CHARS: usize = 1_000_000;
const HOLDOUT_FRACTION: f64 = 0.05;

impl Corpus {
    /// Exactly `n_chars` characters of grammar output.
    pub fn generate(seed: u64, n_chars: usize) -> Result<Self> {
        let mut rng = substream(seed, "corpus");
        let mut text = String::with_capacity(n_chars + 256);
        let mut in_paragraph = 0;
        while text.len() < n_chars {
            sentence(&mut rng, &mut text);
            in_paragraph += 1;
            if in_paragraph >= 4 && rng.random_bool(0.3) {
                text.push('\n');
                in_paragraph = 0;
            } else {
                text.push(' ');
            }
        }
        text.truncate(n_chars);
        let mut vocab: Vec<char> = text.chars().collect();
        vocab.sort_unstable();
        vocab.dedup();
        if vocab.len() > 128 {
            return Err(Error::Config(format!("vocabulary of {} exceeds 128", vocab.len())));
        }
        let tokens = text
            .chars()
            .map(|c| vocab.binary_search(&c).expect("char in vocab"))
            .collect();
        Ok(Corpus { seed, vocab, tokens })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn split(&self) -> usize {
        ((1.0 - HOLDOUT_FRACTION) * self.tokens.len() as f64) as usize
    }

    pub fn train_tokens(&self) -> &[usize] {
        &self.tokens[..self.split()]
    }

    pub fn holdout_tokens(&self) -> &[usize] {
        &self.tokens[self.split()..]
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.vocab[t]).collect()
    }
}

/// Perplexity on the holdout split of a unigram model fit to the training
/// split, with add-one smoothing.
pub fn unigram_perplexity(corpus: &Corpus) -> f64 {
    let v = corpus.vocab_size();
    let mut counts = vec![1.0f64; v];
    for &t in corpus.train_tokens() {
        counts[t] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let holdout = corpus.holdout_tokens();
    let nll: f64 = holdout.iter().map(|&t| -(counts[t] / total).ln()).sum();
    (nll / holdout.len() as f64).exp()
}

#[derive(Clone, Debug)]
pub struct LmModel {
    pub arch: ArchConfig,
    pub vocab_size: usize,
    pub params: ParameterTree,
}

pub fn is_lm_param(name: &str) -> bool {
    name.starts_with(LM_PREFIX)
}

/// Next-token logits `[B * T, vocab]` for `tokens` laid out as `[B, T]`.
pub fn lm_logits(g: &mut Graph, arch: &ArchConfig, vars: &VarMap, tokens: &[usize], b: usize, t: usize) -> Result<Var> {
    if t > arch.context_positions {
        return Err(Error::SequenceTooLong {
            len: t,
            max: arch.context_positions,
        });
    }
    let n = b * t;
    let tok = g.gather_rows(var(vars, "lm_head.token_embed.weight")?, tokens, &[b, t])?;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let pos = g.gather_rows(var(vars, "lm_head.pos_embed.weight")?, &positions, &[b, t])?;
    let x = g.add(tok, pos)?;
    let x = g.dropout(x, arch.dropout)?;
    let out = model_forward(g, arch, vars, x)?;
    let h = g.reshape(out.hidden, &[n, arch.d_embed])?;
    let logits = g.matmul(h, var(vars, "lm_head.out.weight")?, false)?;
    Ok(g.add(logits, var(vars, "lm_head.out.bias")?)?)
}

/// `batch` windows of `len + 1` tokens drawn uniformly from `tokens`;
/// returns inputs and next-token targets, both `[batch * len]`.
pub fn sample_lm_batch(tokens: &[usize], batch: usize, len: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(batch * len);
    let mut target = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let start = rng.random_range(0..tokens.len() - len);
        input.extend_from_slice(&tokens[start..start + len]);
        target.extend_from_slice(&tokens[start + 1..start + len + 1]);
    }
    (input, target)
}

impl LmModel {
    pub fn new(arch: ArchConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut params = init_transformer(&arch, &mut substream(seed, "trunk"))?;
        params.extend(init_lm_head(&arch, vocab_size, &mut substream(seed, "lm-head"))?)?;
        Ok(LmModel {
            arch,
            vocab_size,
            params,
        })
    }

    pub fn trunk(&self) -> ParameterTree {
        self.params.filter(transformer::is_transformer_param)
    }

    pub fn head(&self) -> ParameterTree {
        self.params.filter(is_lm_param)
    }

    /// Mean next-token cross-entropy over non-overlapping holdout windows (no dropout).
    pub fn holdout_loss(&self, corpus: &Corpus, max_windows: usize) -> Result<f64> {
        let len = self.arch.context_positions;
        let tokens = corpus.holdout_tokens();
        let windows = ((tokens.len() - 1) / len).min(max_windows);
        if windows == 0 {
            return Err(Error::Config("holdout split shorter than one window".into()));
        }
        let mut total = 0.0f64;
        for chunk in (0..windows).collect::<Vec<_>>().chunks(32) {
            let mut input = Vec::new();
            let mut target = Vec::new();
            for &w in chunk {
                input.extend_from_slice(&tokens[w * len..(w + 1) * len]);
                target.extend_from_slice(&tokens[w * len + 1..(w + 1) * len + 1]);
            }
            let mut g = Graph::new();
            let vars = bind_params(&mut g, &self.params, |_| true)?;
            let logits = lm_logits(&mut g, &self.arch, &vars, &input, chunk.len(), len)?;
            let loss = g.cross_entropy_loss(logits, &target)?;
            total += g.value(loss).item() as f64 * chunk.len() as f64;
        }
        Ok(total / windows as f64)
    }

    pub fn perplexity(&self, corpus: &Corpus, max_windows: usize) -> Result<f64> {
        Ok(self.holdout_loss(corpus, max_windows)?.exp())
    }
}

pub fn init_lm_head(arch: &ArchConfig, vocab_size: usize, rng: &mut impl Rng) -> Result<ParameterTree> {
    let d = arch.d_embed;
    let mut t = ParameterTree::new();
    t.insert(
        "lm_head.token_embed.weight",
        transformer::normal(rng, &[vocab_size, d], transformer::INIT_STD),
    )?;
    t.insert(
        "lm_head.pos_embed.weight",
        transformer::normal(rng, &[arch.context_positions, d], transformer::INIT_STD),
    )?;
    t.insert(
        "lm_head.out.weight",
        transformer::normal(rng, &[d, vocab_size], transformer::INIT_STD),
    )?;
    t.insert("lm_head.out.bias", Tensor::zeros(&[vocab_size]))?;
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimConfig,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            steps: 2_000,
            batch_size: 32,
            optimizer: OptimConfig {
                lr: 1e-3,
                ..OptimConfig::default()
            },
            seed: 0,
        }
    }
}

/// Architecture of the language-model trunk: the DT default with GELU.
pub fn lm_arch() -> ArchConfig {
    ArchConfig {
        activation: Activation::Gelu,
        ..ArchConfig::default()
    }
}

/// Next-token pretraining on the training split. Returns the model and the
/// per-step training losses.
pub fn pretrain_lm(corpus: &Corpus, arch: &ArchConfig, config: &LmTrainConfig) -> Result<(LmModel, Vec<f32>)> {
    let mut model = LmModel::new(arch.clone(), corpus.vocab_size(), config.seed)?;
    let mut opt = config.optimizer.adamw();
    let mut rng = substream(config.seed, "lm-batches");
    let dropout_seed = derive_seed(config.seed, "lm-dropout");
    let len = arch.context_positions;
    let mut losses = Vec::with_capacity(config.steps as usize);
    for step in 0..config.steps {
        let (input, target) = sample_lm_batch(corpus.train_tokens(), config.batch_size, len, &mut rng);
        let mut g = Graph::training(dropout_seed, step);
        let vars = bind_params(&mut g, &model.params, |_| false)?;
        let logits = lm_logits(&mut g, arch, &vars, &input, config.batch_size, len)?;
        let loss = g.cross_entropy_loss(logits, &target)?;
        let value = g.value(loss).item();
        check_loss(step, &[("lm", value)])?;
        let mut grads = g.backward(loss)?;
        let grads = collect_grads(&mut grads, &vars, |_| false);
        opt.step(&mut model.params, &grads, |_| false)?;
        losses.push(value);
    }
    Ok((model, losses))
}

/// Result of seeded k-means.
#[derive(Clone, Debug)]
pub struct KMeans {
    /// `[k, d]`
    pub centers: Tensor,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

/// k-means with k-means++ seeding and Lloyd iterations. A cluster left empty
/// is reseeded at the point farthest from its current center.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let (n, d) = (points.rows(), points.last_dim());
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} must be in 1..={n}")));
    }
    let row = |i: usize| &points.data()[i * d..(i + 1) * d];
    let mut rng = substream(seed, "kmeans");
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push(row(first).iter().map(|&v| v as f64).collect());
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c: Vec<f64> = row(pick).iter().map(|&v| v as f64).collect();
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(row(i), &c));
        }
        centers.push(c);
    }

    let mut assignments = vec![0usize; n];
    let mut objective = Vec::new();
    for _ in 0..max_iter {
        let mut cost = 0.0;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (best, dist) = centers
                .iter()
                .enumerate()
                .map(|(c, center)| (c, sq_dist(row(i), center)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            *a = best;
            cost += dist;
        }
        let converged = objective.last().is_some_and(|&prev| prev <= cost);
        objective.push(cost);
        if converged {
            break;
        }
        let mut sums = vec![vec![0.0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&x, &y| {
                        let dx = sq_dist(row(x), &centers[assignments[x]]);
                        let dy = sq_dist(row(y), &centers[assignments[y]]);
                        dx.total_cmp(&dy).then(y.cmp(&x))
                    })
                    .expect("nonempty");
                centers[c] = row(far).iter().map(|&v| v as f64).collect();
                counts[c] = 1;
                counts[assignments[far]] -= 1;
                assignments[far] = c;
            }
        }
    }
    let data = centers.iter().flatten().map(|&v| v as f32).collect();
    Ok(KMeans {
        centers: Tensor::new(vec![k, d], data)?,
        assignments,
        objective,
    })
}

pub const DEFAULT_CLUSTERS: usize = 32;

/// Cluster centers of the LM's token embeddings.
pub fn cluster_token_embeddings(lm: &LmModel, k: usize, seed: u64) -> Result<KMeans> {
    let emb = lm
        .params
        .get("lm_head.token_embed.weight")
        .ok_or_else(|| Error::Config("language model has no token embedding".into()))?;
    kmeans(emb, k, seed, 100)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoTrainConfig {
    pub lambda1_init: f32,
    /// Step at which the cosine weight reaches zero.
    pub lambda1_decay_steps: u64,
    pub lambda2: f32,
    pub clusters: usize,
    pub lm_batch_size: usize,
}

impl Default for CoTrainConfig {
    fn default() -> Self {
        CoTrainConfig {
            lambda1_init: 0.1,
            lambda1_decay_steps: 5_000,
            lambda2: 1.0,
            clusters: DEFAULT_CLUSTERS,
            lm_batch_size: 16,
        }
    }
}

impl CoTrainConfig {
    /// Linear decay from `lambda1_init` to 0 at `lambda1_decay_steps`, then 0.
    pub fn lambda1(&self, step: u64) -> f32 {
        if step >= self.lambda1_decay_steps {
            return 0.0;
        }
        self.lambda1_init * (1.0 - step as f32 / self.lambda1_decay_steps as f32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoTrainLosses {
    pub total: f32,
    pub mse: f32,
    pub cos: f32,
    pub lm: f32,
}

/// `mean(1 - max_c cos(e, c))` over the unpadded token embeddings of `stacked: [B, 3K, d]`.
pub fn cosine_loss(g: &mut Graph, stacked: Var, mask: &[bool], centers: &Tensor) -> Result<Var> {
    let shape = g.value(stacked).shape().to_vec();
    let d = shape[2];
    let rows: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .flat_map(|(r, _)| 3 * r..3 * r + 3)
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = rows.len();
    let emb = g.gather_rows(stacked, &rows, &[n])?;
    let emb = g.normalize_rows(emb)?;
    let unit: Vec<f32> = centers
        .data()
        .chunks_exact(d)
        .flat_map(|c| {
            let norm = c.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            c.iter().map(move |v| v / norm)
        })
        .collect();
    let c = g.constant(Tensor::new(vec![centers.rows(), d], unit)?)?;
    let sims = g.matmul(emb, c, true)?;
    let best = g.max_last(sims)?;
    let mean = g.mean(best)?;
    let neg = g.scale(mean, -1.0)?;
    Ok(g.add_scalar(neg, 1.0)?)
}

/// One co-training update of `model` (which must carry `lm_head.*`).
#[allow(clippy::too_many_arguments)]
pub fn cotrain_step(
    model: &mut DtModel,
    opt: &mut AdamW,
    batch: &DtBatch,
    lm_input: &[usize],
    lm_target: &[usize],
    centers: &Tensor,
    config: &CoTrainConfig,
    seed: u64,
) -> Result<CoTrainLosses> {
    let step = opt.step_count();
    let mut g = Graph::training(seed, step);
    let vars = bind_params(&mut g, &model.params, |_| false)?;
    let (mse, fwd) = model.loss(&mut g, &vars, batch)?;
    let cos = cosine_loss(&mut g, fwd.stacked, &batch.mask, centers)?;
    let t = model.arch.context_positions.min(lm_input.len());
    let b = lm_input.len() / t;
    let logits = lm_logits(&mut g, &model.arch, &vars, lm_input, b, t)?;
    let lm = g.cross_entropy_loss(logits, lm_target)?;

    let lambda1 = config.lambda1(step);
    let mut total = mse;
    if lambda1 != 0.0 {
        let c = g.scale(cos, lambda1)?;
        total = g.add(total, c)?;
    }
    if config.lambda2 != 0.0 {
        let l = g.scale(lm, config.lambda2)?;
        total = g.add(total, l)?;
    }
    let losses = CoTrainLosses {
        total: g.value(total).item(),
        mse: g.value(mse).item(),
        cos: g.value(cos).item(),
        lm: g.value(lm).item(),
    };
    check_loss(
        step,
        &[
            ("total", losses.total),
            ("mse", losses.mse),
            ("cos", losses.cos),
            ("lm", losses.lm),
        ],
    )?;
    let mut grads = g.backward(total)?;
    let grads = collect_grads(&mut grads, &vars, |_| false);
    opt.step(&mut model.params, &grads, |_| false)?;
    Ok(losses)
}

/// DT initialized from the LM trunk, carrying a copy of the LM head.
pub fn dt_from_lm(lm: &LmModel, dataset: &OfflineDataset, seed: u64) -> Result<DtModel> {
    let binding = crate::dt::EnvBinding::from_dataset(dataset);
    let mut model = DtModel::with_trunk(lm.arch.clone(), binding, &lm.trunk(), seed)?;
    model.params.extend(lm.head())?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoTrainRun {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimConfig,
    pub seed: u64,
}

/// Co-trains `model` on `dataset` and `corpus`; returns per-step losses.
/// `on_step(step, model)` runs after every update and may stop training early.
pub fn cotrain(
    model: &mut DtModel,
    dataset: &OfflineDataset,
    corpus: &Corpus,
    centers: &Tensor,
    config: &CoTrainConfig,
    run: &CoTrainRun,
    mut on_step: impl FnMut(u64, &DtModel) -> Result<ControlFlow<()>>,
) -> Result<Vec<CoTrainLosses>> {
    let mut sampler = BatchSampler::new(dataset, model.k(), run.seed)?;
    let mut rng = substream(run.seed, "cotrain-lm-batches");
    let mut opt = run.optimizer.adamw();
    let dropout_seed = derive_seed(run.seed, "cotrain-dropout");
    let len = model.arch.context_positions;
    let mut history = Vec::with_capacity(run.steps as usize);
    for step in 0..run.steps {
        let batch = sampler.sample(run.batch_size)?;
        let (input, target) = sample_lm_batch(corpus.train_tokens(), config.lm_batch_size, len, &mut rng);
        history.push(cotrain_step(
            model,
            &mut opt,
            &batch,
            &input,
            &target,
            centers,
            config,
            dropout_seed,
        )?);
        if on_step(step + 1, model)?.is_break() {
            break;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic() {
        let a = Corpus::generate(3, 20_000).unwrap();
        let b = Corpus::generate(3, 20_000).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 20_000);
        assert!(a.vocab_size() >= 32 && a.vocab_size() <= 128, "{}", a.vocab_size());
        assert!(a.tokens.iter().all(|&t| t < a.vocab_size()));
        assert_ne!(a.tokens, Corpus::generate(4, 20_000).unwrap().tokens);
    }

    #[test]
    fn lambda_schedule() {
        let c = CoTrainConfig::default();
        assert_eq!(c.lambda1(0), 0.1);
        assert!((c.lambda1(2_500) - 0.05).abs() < 1e-7);
        assert_eq!(c.lambda1(5_000), 0.0);
        assert_eq!(c.lambda1(5_001), 0.0);
        let mut prev = f32::INFINITY;
        for s in (0..6_000).step_by(97) {
            assert!(c.lambda1(s) <= prev);
            prev = c.lambda1(s);
        }
    }

    #[test]
    fn kmeans_degenerate_k() {
        let pts = Tensor::from_fn(&[6, 3], |i| ((i * 7919) % 13) as f32 - 6.0);
        let one = kmeans(&pts, 1, 0, 50).unwrap();
        for j in 0..3 {
            let mean: f32 = (0..6).map(|i| pts.data()[i * 3 + j]).sum::<f32>() / 6.0;
            assert!((one.centers.data()[j] - mean).abs() < 1e-5);
        }
        let all = kmeans(&pts, 6, 0, 50).unwrap();
        assert_eq!(*all.objective.last().unwrap(), 0.0);
    }
}
