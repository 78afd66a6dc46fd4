//! Pre-LN causal transformer trunk.
//!
//! Canonical parameter names, in depth order:
//!
//! ```text
//! block{i}.ln1.{gamma|beta}
//! block{i}.attn.{q|k|v|out}.{weight|bias}
//! block{i}.ln2.{gamma|beta}
//! block{i}.mlp.{fc1|fc2}.{weight|bias}
//! final_ln.{gamma|beta}
//! ```
//!
//! Linear weights are stored `[in, out]` and applied as `x @ W + b`.
//! These names are the contract shared by selectors, checkpoints and reports.

use dtmerge_tensor::{Graph, ParameterTree, Tensor, Var};
use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{Activation, ArchConfig};
use crate::{Error, Result};

pub const INIT_STD: f32 = 0.02;

/// Parameter name → graph variable for one forward pass.
pub type VarMap = IndexMap<String, Var>;

/// Registers every entry of `tree` on the graph. Names for which `frozen`
/// returns true become constants and receive no gradient.
pub fn bind_params(g: &mut Graph, tree: &ParameterTree, frozen: impl Fn(&str) -> bool) -> Result<VarMap> {
    let mut vars = VarMap::with_capacity(tree.len());
    for (name, t) in tree.iter() {
        let v = if frozen(name) {
            g.constant(t.clone())?
        } else {
            g.param(t.clone())?
        };
        vars.insert(name.to_string(), v);
    }
    Ok(vars)
}

pub(crate) fn var(vars: &VarMap, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Incompatible(vec![format!("missing parameter {name}")]))
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Depth-ordered layer units: `block{i}.ln1`, `block{i}.attn`, `block{i}.ln2`,
/// `block{i}.mlp` for each block, then `final_ln`.
pub fn layer_units(n_layers: usize) -> Vec<String> {
    let mut units = Vec::with_capacity(4 * n_layers + 1);
    for i in 0..n_layers {
        for sub in ["ln1", "attn", "ln2", "mlp"] {
            units.push(format!("block{i}.{sub}"));
        }
    }
    units.push("final_ln".to_string());
    units
}

/// Layer unit a parameter name belongs to, or `None` for non-transformer names.
pub fn unit_of(name: &str) -> Option<&str> {
    if let Some(rest) = name.strip_prefix("final_ln.") {
        return (!rest.is_empty()).then_some("final_ln");
    }
    let rest = name.strip_prefix("block")?;
    let dot = rest.find('.')?;
    rest[..dot].parse::<usize>().ok()?;
    let sub_end = rest[dot + 1..].find('.')? + dot + 1;
    match &rest[dot + 1..sub_end] {
        "ln1" | "attn" | "ln2" | "mlp" => Some(&name[..5 + sub_end]),
        _ => None,
    }
}

pub fn is_transformer_param(name: &str) -> bool {
    unit_of(name).is_some()
}

/// Number of blocks present in `tree` (one past the highest block index).
pub fn n_layers_of(tree: &ParameterTree) -> usize {
    tree.names()
        .filter_map(|n| n.strip_prefix("block")?.split_once('.')?.0.parse::<usize>().ok())
        .map(|i| i + 1)
        .max()
        .unwrap_or(0)
}

/// Shape of every trunk parameter, in canonical order.
pub fn param_shapes(arch: &ArchConfig) -> Vec<(String, Vec<usize>)> {
    let d = arch.d_embed;
    let h = arch.d_mlp;
    let mut out = Vec::new();
    for i in 0..arch.n_layers {
        let b = format!("block{i}");
        out.push((format!("{b}.ln1.gamma"), vec![d]));
        out.push((format!("{b}.ln1.beta"), vec![d]));
        for p in ["q", "k", "v", "out"] {
            out.push((format!("{b}.attn.{p}.weight"), vec![d, d]));
            out.push((format!("{b}.attn.{p}.bias"), vec![d]));
        }
        out.push((format!("{b}.ln2.gamma"), vec![d]));
        out.push((format!("{b}.ln2.beta"), vec![d]));
        out.push((format!("{b}.mlp.fc1.weight"), vec![d, h]));
        out.push((format!("{b}.mlp.fc1.bias"), vec![h]));
        out.push((format!("{b}.mlp.fc2.weight"), vec![h, d]));
        out.push((format!("{b}.mlp.fc2.bias"), vec![d]));
    }
    out.push(("final_ln.gamma".into(), vec![d]));
    out.push(("final_ln.beta".into(), vec![d]));
    out
}

/// Fresh trunk: N(0, 0.02) weights, residual projections scaled by
/// `1 / sqrt(2 * n_layers)`, zero biases, unit layer-norm gain.
pub fn init_transformer(arch: &ArchConfig, rng: &mut impl Rng) -> Result<ParameterTree> {
    arch.validate()?;
    let resid_std = INIT_STD / (2.0 * arch.n_layers as f32).sqrt();
    let mut tree = ParameterTree::new();
    for (name, shape) in param_shapes(arch) {
        let t = if name.ends_with(".gamma") {
            Tensor::full(&shape, 1.0)
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else if name.ends_with("attn.out.weight") || name.ends_with("mlp.fc2.weight") {
            normal(rng, &shape, resid_std)
        } else {
            normal(rng, &shape, INIT_STD)
        };
        tree.insert(name, t)?;
    }
    Ok(tree)
}

/// Fresh attention parameters for every block (used by random perturbation).
pub fn init_attention(arch: &ArchConfig, rng: &mut impl Rng) -> Result<ParameterTree> {
    let full = init_transformer(arch, rng)?;
    Ok(full.filter(|n| unit_of(n).is_some_and(|u| u.ends_with(".attn"))))
}

/// Checks that `tree` holds exactly the trunk parameters of `arch` with the right shapes.
pub fn check_tree(arch: &ArchConfig, tree: &ParameterTree) -> Result<()> {
    let mut problems = Vec::new();
    for (name, shape) in param_shapes(arch) {
        match tree.get(&name) {
            None => problems.push(format!("{name}: missing")),
            Some(t) if t.shape() != shape.as_slice() => {
                problems.push(format!("{name}: shape {:?}, expected {shape:?}", t.shape()))
            }
            _ => {}
        }
    }
    for name in tree.names() {
        if is_transformer_param(name) && !name_in_arch(arch, name) {
            problems.push(format!("{name}: not part of the architecture"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(problems))
    }
}

fn name_in_arch(arch: &ArchConfig, name: &str) -> bool {
    param_shapes(arch).iter().any(|(n, _)| n == name)
}

pub struct TransformerOutput {
    /// `[B, T, d]` after the final layer norm.
    pub hidden: Var,
    /// Per-layer attention weights `[B * H, T, T]`; empty when attention is removed.
    pub attention: Vec<Var>,
}

fn linear(g: &mut Graph, x: Var, vars: &VarMap, prefix: &str) -> Result<Var> {
    let w = var(vars, &format!("{prefix}.weight"))?;
    let b = var(vars, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w, false)?;
    Ok(g.add(y, b)?)
}

fn layer_norm(g: &mut Graph, x: Var, vars: &VarMap, prefix: &str) -> Result<Var> {
    let gamma = var(vars, &format!("{prefix}.gamma"))?;
    let beta = var(vars, &format!("{prefix}.beta"))?;
    Ok(g.layer_norm(x, gamma, beta)?)
}

/// Causal self-attention on `x: [B, T, d]`; returns the projected output and
/// the attention weights.
pub fn attention_forward(
    g: &mut Graph,
    arch: &ArchConfig,
    vars: &VarMap,
    block: usize,
    x: Var,
) -> Result<(Var, Var)> {
    let shape = g.value(x).shape().to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if t > arch.context_positions {
        return Err(Error::SequenceTooLong {
            len: t,
            max: arch.context_positions,
        });
    }
    let (heads, hd) = (arch.n_heads, arch.head_dim());
    let prefix = format!("block{block}.attn");
    let split = |g: &mut Graph, v: Var| -> Result<Var> {
        let v = g.reshape(v, &[b, t, heads, hd])?;
        let v = if heads > 1 { g.swap_axes_12(v)? } else { v };
        Ok(g.reshape(v, &[b * heads, t, hd])?)
    };
    let q = linear(g, x, vars, &format!("{prefix}.q"))?;
    let k = linear(g, x, vars, &format!("{prefix}.k"))?;
    let v = linear(g, x, vars, &format!("{prefix}.v"))?;
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (hd as f32).sqrt())?;
    let probs = g.causal_softmax(scores)?;
    let dropped = g.dropout(probs, arch.dropout)?;
    let y = g.bmm(dropped, v, false)?;
    let y = g.reshape(y, &[b, heads, t, hd])?;
    let y = if heads > 1 { g.swap_axes_12(y)? } else { y };
    let y = g.reshape(y, &[b, t, d])?;
    let out = linear(g, y, vars, &format!("{prefix}.out"))?;
    Ok((out, probs))
}

fn mlp_forward(g: &mut Graph, arch: &ArchConfig, vars: &VarMap, block: usize, x: Var) -> Result<Var> {
    let h = linear(g, x, vars, &format!("block{block}.mlp.fc1"))?;
    let h = match arch.activation {
        Activation::Relu => g.relu(h)?,
        Activation::Gelu => g.gelu(h)?,
    };
    linear(g, h, vars, &format!("block{block}.mlp.fc2"))
}

/// One pre-LN block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub fn block_forward(
    g: &mut Graph,
    arch: &ArchConfig,
    vars: &VarMap,
    block: usize,
    x: Var,
) -> Result<(Var, Option<Var>)> {
    let mut probs = None;
    let mut x = x;
    if !arch.attention_removed {
        let h = layer_norm(g, x, vars, &format!("block{block}.ln1"))?;
        let (a, p) = attention_forward(g, arch, vars, block, h)?;
        let a = g.dropout(a, arch.dropout)?;
        x = g.add(x, a)?;
        probs = Some(p);
    }
    let h = layer_norm(g, x, vars, &format!("block{block}.ln2"))?;
    let m = mlp_forward(g, arch, vars, block, h)?;
    let m = g.dropout(m, arch.dropout)?;
    Ok((g.add(x, m)?, probs))
}

/// Full trunk on `x: [B, T, d]`.
pub fn model_forward(g: &mut Graph, arch: &ArchConfig, vars: &VarMap, x: Var) -> Result<TransformerOutput> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != arch.d_embed {
        return Err(Error::Dimension {
            what: "transformer input width",
            expected: arch.d_embed,
            got: shape.last().copied().unwrap_or(0),
        });
    }
    if shape[1] > arch.context_positions {
        return Err(Error::SequenceTooLong {
            len: shape[1],
            max: arch.context_positions,
        });
    }
    let mut x = x;
    let mut attention = Vec::new();
    for i in 0..arch.n_layers {
        let (y, p) = block_forward(g, arch, vars, i, x)?;
        x = y;
        attention.extend(p);
    }
    let hidden = layer_norm(g, x, vars, "final_ln")?;
    Ok(TransformerOutput { hidden, attention })
}
