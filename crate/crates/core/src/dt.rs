//! Decision Transformer: return-to-go conditioning, `(R, s, a)` token
//! interleaving, MSE training on actions and batched evaluation rollouts.
//!
//! Per-environment parameters live under `heads.`:
//!
//! ```text
//! heads.timestep_embed.weight   [horizon, d]
//! heads.return_embed.{weight|bias}   [1, d] / [d]
//! heads.state_embed.{weight|bias}    [state_dim, d] / [d]
//! heads.action_embed.{weight|bias}   [action_dim, d] / [d]
//! heads.embed_ln.{gamma|beta}
//! heads.action_out.{weight|bias}     [d, action_dim] / [action_dim]
//! ```

use std::ops::ControlFlow;

use dtmerge_tensor::{AdamW, AdamWConfig, GradMap, Graph, ParameterTree, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::dataset::OfflineDataset;
use crate::env::{self, EnvKind, References, Trajectory};
use crate::rng::{derive_seed, substream};
use crate::transformer::{self, bind_params, model_forward, var, VarMap};
use crate::{Error, Result};

pub const DEFAULT_CONTEXT: usize = 20;
pub const HEAD_PREFIX: &str = "heads.";

/// Suffix sums: `rtg[t] = sum of rewards[t..]`, accumulated right to left.
pub fn compute_rtg(rewards: &[f32]) -> Result<Vec<f32>> {
    if rewards.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut out = vec![0.0f32; rewards.len()];
    let mut acc = 0.0f32;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    Ok(out)
}

/// Everything a model needs to know about the environment it acts in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvBinding {
    pub env: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_timestep: usize,
    pub state_mean: Vec<f32>,
    pub state_std: Vec<f32>,
    /// Returns-to-go are divided by this before embedding.
    pub rtg_scale: f32,
    /// Best trajectory return in the training data; evaluation targets a multiple of it.
    pub max_return: f32,
    pub references: References,
}

impl EnvBinding {
    pub fn from_dataset(ds: &OfflineDataset) -> Self {
        let spec = ds.env.spec();
        let (state_mean, state_std) = ds.state_stats();
        let rtg_scale = ds
            .trajectories
            .iter()
            .map(|t| t.total_return.abs())
            .fold(1e-3f32, f32::max);
        EnvBinding {
            env: ds.env,
            state_dim: spec.state_dim,
            action_dim: spec.action_dim,
            max_timestep: spec.horizon,
            state_mean,
            state_std,
            rtg_scale,
            max_return: ds.max_return(),
            references: ds.references,
        }
    }
}

/// A context window of consecutive transitions, stored unnormalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub rtg: Vec<f32>,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub timesteps: Vec<usize>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.rtg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtg.is_empty()
    }

    /// Up to `k` transitions of `traj` starting at `start`, with precomputed returns-to-go.
    pub fn from_trajectory(traj: &Trajectory, rtg: &[f32], start: usize, k: usize, sd: usize, ad: usize) -> Self {
        let end = (start + k).min(traj.len());
        Window {
            rtg: rtg[start..end].to_vec(),
            states: traj.states[start * sd..end * sd].to_vec(),
            actions: traj.actions[start * ad..end * ad].to_vec(),
            timesteps: (start..end).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Token {
    Return(f32),
    State(Vec<f32>),
    Action(Vec<f32>),
}

/// Right-padded batch of windows. Padded positions carry zeros, timestep 0 and
/// a false mask, and are excluded from the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct DtBatch {
    pub batch: usize,
    pub k: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub rtg: Vec<f32>,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub timesteps: Vec<usize>,
    pub mask: Vec<bool>,
}

impl DtBatch {
    pub fn from_windows(windows: &[Window], k: usize, state_dim: usize, action_dim: usize) -> Result<Self> {
        let b = windows.len();
        let mut out = DtBatch {
            batch: b,
            k,
            state_dim,
            action_dim,
            rtg: vec![0.0; b * k],
            states: vec![0.0; b * k * state_dim],
            actions: vec![0.0; b * k * action_dim],
            timesteps: vec![0; b * k],
            mask: vec![false; b * k],
        };
        for (i, w) in windows.iter().enumerate() {
            let n = w.len();
            if n > k {
                return Err(Error::SequenceTooLong { len: n, max: k });
            }
            if w.states.len() != n * state_dim || w.actions.len() != n * action_dim || w.timesteps.len() != n {
                return Err(Error::Config("window fields have inconsistent lengths".into()));
            }
            if w.actions.iter().any(|a| !(-1.0..=1.0).contains(a)) {
                return Err(Error::Config("window action outside [-1, 1]".into()));
            }
            let r = i * k;
            out.rtg[r..r + n].copy_from_slice(&w.rtg);
            out.states[r * state_dim..(r + n) * state_dim].copy_from_slice(&w.states);
            out.actions[r * action_dim..(r + n) * action_dim].copy_from_slice(&w.actions);
            out.timesteps[r..r + n].copy_from_slice(&w.timesteps);
            out.mask[r..r + n].iter_mut().for_each(|m| *m = true);
        }
        Ok(out)
    }

    /// Interleaved token stream `(R_0, s_0, a_0, R_1, ...)` of row `b`, unpadded part only.
    pub fn tokens(&self, b: usize) -> Vec<Token> {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut out = Vec::new();
        for t in 0..self.k {
            let r = b * self.k + t;
            if !self.mask[r] {
                break;
            }
            out.push(Token::Return(self.rtg[r]));
            out.push(Token::State(self.states[r * sd..(r + 1) * sd].to_vec()));
            out.push(Token::Action(self.actions[r * ad..(r + 1) * ad].to_vec()));
        }
        out
    }
}

/// Inverse of [`DtBatch::tokens`]; timesteps are not part of the token stream
/// and are numbered from `first_timestep`.
pub fn detokenize(tokens: &[Token], first_timestep: usize) -> Result<Window> {
    if tokens.len() % 3 != 0 {
        return Err(Error::Config(format!("{} tokens do not form whole transitions", tokens.len())));
    }
    let mut w = Window {
        rtg: Vec::new(),
        states: Vec::new(),
        actions: Vec::new(),
        timesteps: Vec::new(),
    };
    for (i, chunk) in tokens.chunks_exact(3).enumerate() {
        match chunk {
            [Token::Return(r), Token::State(s), Token::Action(a)] => {
                w.rtg.push(*r);
                w.states.extend_from_slice(s);
                w.actions.extend_from_slice(a);
                w.timesteps.push(first_timestep + i);
            }
            _ => return Err(Error::Config(format!("transition {i} is not ordered (R, s, a)"))),
        }
    }
    Ok(w)
}

/// Decision Transformer: shared trunk plus per-environment heads.
#[derive(Clone, Debug)]
pub struct DtModel {
    pub arch: ArchConfig,
    pub binding: EnvBinding,
    pub params: ParameterTree,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Fresh heads for `binding`. Linear projections use `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_heads(arch: &ArchConfig, binding: &EnvBinding, rng: &mut impl Rng) -> Result<ParameterTree> {
    let d = arch.d_embed;
    let mut t = ParameterTree::new();
    t.insert(
        "heads.timestep_embed.weight",
        transformer::normal(rng, &[binding.max_timestep, d], transformer::INIT_STD),
    )?;
    for (name, fan_in) in [
        ("return_embed", 1),
        ("state_embed", binding.state_dim),
        ("action_embed", binding.action_dim),
    ] {
        let bound = 1.0 / (fan_in as f32).sqrt();
        t.insert(format!("heads.{name}.weight"), uniform(rng, &[fan_in, d], bound))?;
        t.insert(format!("heads.{name}.bias"), uniform(rng, &[d], bound))?;
    }
    t.insert("heads.embed_ln.gamma", Tensor::full(&[d], 1.0))?;
    t.insert("heads.embed_ln.beta", Tensor::zeros(&[d]))?;
    let bound = 1.0 / (d as f32).sqrt();
    t.insert("heads.action_out.weight", uniform(rng, &[d, binding.action_dim], bound))?;
    t.insert("heads.action_out.bias", uniform(rng, &[binding.action_dim], bound))?;
    Ok(t)
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

/// Forward-pass products needed by training, co-training and analysis.
pub struct DtForward {
    /// `[B * K, action_dim]` predicted actions, read at state tokens.
    pub actions: Var,
    /// `[B, 3K, d]` interleaved token embeddings before the embedding layer norm.
    pub stacked: Var,
    /// Per-layer attention weights `[B * heads, 3K, 3K]`.
    pub attention: Vec<Var>,
}

impl DtModel {
    pub fn new(arch: ArchConfig, binding: EnvBinding, seed: u64) -> Result<Self> {
        let mut params = transformer::init_transformer(&arch, &mut substream(seed, "trunk"))?;
        params.extend(init_heads(&arch, &binding, &mut substream(seed, "heads"))?)?;
        Ok(DtModel { arch, binding, params })
    }

    /// Model with the given trunk and fresh heads.
    pub fn with_trunk(arch: ArchConfig, binding: EnvBinding, trunk: &ParameterTree, seed: u64) -> Result<Self> {
        transformer::check_tree(&arch, trunk)?;
        let mut params = trunk.filter(transformer::is_transformer_param);
        params.extend(init_heads(&arch, &binding, &mut substream(seed, "heads"))?)?;
        Ok(DtModel { arch, binding, params })
    }

    pub fn trunk(&self) -> ParameterTree {
        self.params.filter(transformer::is_transformer_param)
    }

    pub fn k(&self) -> usize {
        self.arch.context_positions / 3
    }

    /// Builds the forward pass on `g` using already-bound `vars`.
    pub fn forward(&self, g: &mut Graph, vars: &VarMap, batch: &DtBatch) -> Result<DtForward> {
        let bind = &self.binding;
        if batch.state_dim != bind.state_dim || batch.action_dim != bind.action_dim {
            return Err(Error::Dimension {
                what: "batch state/action width",
                expected: bind.state_dim + bind.action_dim,
                got: batch.state_dim + batch.action_dim,
            });
        }
        let (b, k) = (batch.batch, batch.k);
        let n = b * k;
        if let Some(&t) = batch.timesteps.iter().find(|&&t| t >= bind.max_timestep) {
            return Err(Error::Config(format!("timestep {t} beyond horizon {}", bind.max_timestep)));
        }
        let rtg: Vec<f32> = batch.rtg.iter().map(|r| r / bind.rtg_scale).collect();
        let states: Vec<f32> = batch
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let j = i % bind.state_dim;
                (s - bind.state_mean[j]) / bind.state_std[j]
            })
            .collect();
        let rtg = g.constant(Tensor::new(vec![n, 1], rtg)?)?;
        let states = g.constant(Tensor::new(vec![n, bind.state_dim], states)?)?;
        let actions = g.constant(Tensor::new(vec![n, bind.action_dim], batch.actions.clone())?)?;

        let time = g.gather_rows(var(vars, "heads.timestep_embed.weight")?, &batch.timesteps, &[n])?;
        let embed = |g: &mut Graph, x: Var, name: &str| -> Result<Var> {
            let y = g.matmul(x, var(vars, &format!("heads.{name}.weight"))?, false)?;
            let y = g.add(y, var(vars, &format!("heads.{name}.bias"))?)?;
            Ok(g.add(y, time)?)
        };
        let r_tok = embed(g, rtg, "return_embed")?;
        let s_tok = embed(g, states, "state_embed")?;
        let a_tok = embed(g, actions, "action_embed")?;
        let all = g.concat_rows(&[r_tok, s_tok, a_tok])?;
        // row (b, 3t + j) of the sequence comes from block j, row b * K + t
        let order: Vec<usize> = (0..b)
            .flat_map(|bi| (0..k).flat_map(move |t| (0..3).map(move |j| j * n + bi * k + t)))
            .collect();
        let stacked = g.gather_rows(all, &order, &[b, 3 * k])?;
        let x = g.layer_norm(
            stacked,
            var(vars, "heads.embed_ln.gamma")?,
            var(vars, "heads.embed_ln.beta")?,
        )?;
        let x = g.dropout(x, self.arch.dropout)?;
        let out = model_forward(g, &self.arch, vars, x)?;
        let state_rows: Vec<usize> = (0..n).map(|r| 3 * r + 1).collect();
        let h = g.gather_rows(out.hidden, &state_rows, &[n])?;
        let a = g.matmul(h, var(vars, "heads.action_out.weight")?, false)?;
        let a = g.add(a, var(vars, "heads.action_out.bias")?)?;
        let actions = g.tanh(a)?;
        Ok(DtForward {
            actions,
            stacked,
            attention: out.attention,
        })
    }

    /// Masked action MSE for `batch`.
    pub fn loss(&self, g: &mut Graph, vars: &VarMap, batch: &DtBatch) -> Result<(Var, DtForward)> {
        let fwd = self.forward(g, vars, batch)?;
        let n = batch.batch * batch.k;
        let target = g.constant(Tensor::new(vec![n, batch.action_dim], batch.actions.clone())?)?;
        let loss = g.mse_loss(fwd.actions, target, Some(&batch.mask))?;
        Ok((loss, fwd))
    }

    /// Deterministic actions for the last valid position of every row.
    pub fn act(&self, batch: &DtBatch) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &self.params, |_| true)?;
        let fwd = self.forward(&mut g, &vars, batch)?;
        let preds = g.value(fwd.actions).data();
        let ad = batch.action_dim;
        (0..batch.batch)
            .map(|b| {
                let len = batch.mask[b * batch.k..(b + 1) * batch.k].iter().filter(|&&m| m).count();
                if len == 0 {
                    return Err(Error::EmptySequence);
                }
                let r = b * batch.k + len - 1;
                Ok(preds[r * ad..(r + 1) * ad].to_vec())
            })
            .collect()
    }
}

/// Gradients of every bound, unfrozen parameter, keyed by name.
pub fn collect_grads(grads: &mut dtmerge_tensor::Gradients, vars: &VarMap, frozen: impl Fn(&str) -> bool) -> GradMap {
    vars.iter()
        .filter(|(name, _)| !frozen(name))
        .map(|(name, &v)| (name.clone(), grads.take(v)))
        .collect()
}

pub fn check_loss(step: u64, parts: &[(&str, f32)]) -> Result<()> {
    if parts.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let detail = parts
        .iter()
        .map(|(n, v)| format!("{n}={v}"))
        .collect::<Vec<_>>()
        .join(" ");
    Err(Error::Diverged { step, detail })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimConfig,
    pub seed: u64,
}

/// Serializable mirror of the optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let d = AdamWConfig::default();
        OptimConfig {
            lr: d.lr,
            weight_decay: d.weight_decay,
            warmup_steps: d.warmup_steps,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            ..AdamWConfig::default()
        })
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5_000,
            batch_size: 64,
            optimizer: OptimConfig::default(),
            seed: 0,
        }
    }
}

/// Samples training windows uniformly over trajectories and start positions.
pub struct BatchSampler<'a> {
    dataset: &'a OfflineDataset,
    rtg: Vec<Vec<f32>>,
    k: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a OfflineDataset, k: usize, seed: u64) -> Result<Self> {
        if dataset.trajectories.is_empty() {
            return Err(Error::Config("dataset has no trajectories".into()));
        }
        let rtg = dataset
            .trajectories
            .iter()
            .map(|t| compute_rtg(&t.rewards))
            .collect::<Result<_>>()?;
        Ok(BatchSampler {
            dataset,
            rtg,
            k,
            rng: substream(seed, "batches"),
        })
    }

    pub fn sample(&mut self, batch_size: usize) -> Result<DtBatch> {
        let spec = self.dataset.env.spec();
        let windows: Vec<Window> = (0..batch_size)
            .map(|_| {
                let i = self.rng.random_range(0..self.dataset.trajectories.len());
                let traj = &self.dataset.trajectories[i];
                let start = self.rng.random_range(0..traj.len());
                Window::from_trajectory(traj, &self.rtg[i], start, self.k, spec.state_dim, spec.action_dim)
            })
            .collect();
        DtBatch::from_windows(&windows, self.k, spec.state_dim, spec.action_dim)
    }
}

/// Runs one optimizer step on the action MSE; returns the loss.
pub fn train_step(
    model: &mut DtModel,
    opt: &mut AdamW,
    batch: &DtBatch,
    seed: u64,
    frozen: &dyn Fn(&str) -> bool,
) -> Result<f32> {
    let step = opt.step_count();
    let mut g = Graph::training(seed, step);
    let vars = bind_params(&mut g, &model.params, frozen)?;
    let (loss, _) = model.loss(&mut g, &vars, batch)?;
    let value = g.value(loss).item();
    check_loss(step, &[("mse", value)])?;
    let mut grads = g.backward(loss)?;
    let grads = collect_grads(&mut grads, &vars, frozen);
    opt.step(&mut model.params, &grads, frozen)?;
    Ok(value)
}

/// Trains `model` on `dataset`; `on_step(step, loss, model)` is called after
/// every update and may end training early with `ControlFlow::Break`.
pub fn train(
    model: &mut DtModel,
    dataset: &OfflineDataset,
    config: &TrainConfig,
    frozen: &dyn Fn(&str) -> bool,
    mut on_step: impl FnMut(u64, f32, &DtModel) -> Result<ControlFlow<()>>,
) -> Result<Vec<f32>> {
    let mut sampler = BatchSampler::new(dataset, model.k(), config.seed)?;
    let mut opt = config.optimizer.adamw();
    let dropout_seed = derive_seed(config.seed, "dropout");
    let mut losses = Vec::with_capacity(config.steps as usize);
    for step in 0..config.steps {
        let batch = sampler.sample(config.batch_size)?;
        let loss = train_step(model, &mut opt, &batch, dropout_seed, frozen)?;
        losses.push(loss);
        if on_step(step + 1, loss, model)?.is_break() {
            break;
        }
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub env: EnvKind,
    pub episodes: usize,
    pub seed: u64,
    pub target_multiplier: f32,
    pub episode_returns: Vec<f64>,
    pub mean_return: f64,
    /// Normalized score of the mean return.
    pub normalized: f64,
}

pub const DEFAULT_EPISODES: usize = 25;

/// Return-conditioned rollouts of every episode in lockstep.
///
/// Initial return-to-go is `multiplier * max_return`; it is decremented by each
/// observed reward and the context is truncated to the last `K` transitions.
pub fn evaluate(model: &DtModel, multiplier: f32, episodes: usize, seed: u64) -> Result<EvalResult> {
    let bind = &model.binding;
    let kind = bind.env;
    let spec = kind.spec();
    let (sd, ad, k) = (spec.state_dim, spec.action_dim, model.k());
    let mut states: Vec<Vec<f32>> = (0..episodes)
        .map(|ep| env::reset(kind, derive_seed(seed, &format!("eval/{ep}"))))
        .collect();
    let mut hist: Vec<Window> = (0..episodes)
        .map(|_| Window {
            rtg: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
            timesteps: Vec::new(),
        })
        .collect();
    let mut remaining = vec![multiplier * bind.max_return; episodes];
    let mut returns = vec![0.0f64; episodes];
    for t in 0..spec.horizon {
        let windows: Vec<Window> = hist
            .iter_mut()
            .zip(&states)
            .zip(&remaining)
            .map(|((h, s), &r)| {
                h.rtg.push(r);
                h.states.extend_from_slice(s);
                h.actions.extend(std::iter::repeat_n(0.0, ad));
                h.timesteps.push(t);
                let from = h.len().saturating_sub(k);
                Window {
                    rtg: h.rtg[from..].to_vec(),
                    states: h.states[from * sd..].to_vec(),
                    actions: h.actions[from * ad..].to_vec(),
                    timesteps: h.timesteps[from..].to_vec(),
                }
            })
            .collect();
        let batch = DtBatch::from_windows(&windows, k, sd, ad)?;
        let actions = model.act(&batch)?;
        for ep in 0..episodes {
            let (next, r) = env::step(kind, &states[ep], &actions[ep])?;
            let h = &mut hist[ep];
            let n = h.actions.len();
            h.actions[n - ad..].copy_from_slice(&actions[ep]);
            states[ep] = next;
            remaining[ep] -= r;
            returns[ep] += r as f64;
        }
    }
    let mean_return = returns.iter().sum::<f64>() / episodes.max(1) as f64;
    Ok(EvalResult {
        env: kind,
        episodes,
        seed,
        target_multiplier: multiplier,
        normalized: bind.references.normalize(mean_return)?,
        episode_returns: returns,
        mean_return,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rtg_suffix_sums() {
        assert_eq!(compute_rtg(&[1.0, 2.0, 3.0]).unwrap(), vec![6.0, 5.0, 3.0]);
        assert_eq!(compute_rtg(&[0.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(matches!(compute_rtg(&[]), Err(Error::EmptySequence)));
    }

    #[test]
    fn padded_batch_layout() {
        let w = Window {
            rtg: vec![3.0, 1.0],
            states: vec![1.0, 2.0, 3.0, 4.0],
            actions: vec![0.5, -0.5],
            timesteps: vec![7, 8],
        };
        let b = DtBatch::from_windows(&[w.clone()], 4, 2, 1).unwrap();
        assert_eq!(b.mask, vec![true, true, false, false]);
        assert_eq!(b.rtg, vec![3.0, 1.0, 0.0, 0.0]);
        assert_eq!(detokenize(&b.tokens(0), 7).unwrap(), w);
        let too_long = DtBatch::from_windows(&[w], 1, 2, 1);
        assert!(matches!(too_long, Err(Error::SequenceTooLong { len: 2, max: 1 })));
    }
}
