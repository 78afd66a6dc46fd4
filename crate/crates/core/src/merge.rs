//! Weight-space operations on parameter trees: layer merging, interpolation,
//! task vectors, incremental merging, per-layer distances and attention
//! perturbation.
//!
//! Every function is pure. Entries outside the selection are copied bit for
//! bit, and per-environment heads are never selected.

use std::fmt;
use std::str::FromStr;

use dtmerge_tensor::{ParameterTree, Tensor};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::rng::substream;
use crate::selector::LayerSelector;
use crate::transformer::{init_attention, layer_units, n_layers_of, unit_of};
use crate::{Error, Result};

fn check_coefficient(c: f32) -> Result<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(Error::Coefficient(c))
    }
}

/// Names selected in `target`, after checking `source` holds each of them with the same shape.
fn compatible_selection(target: &ParameterTree, source: &ParameterTree, sel: &LayerSelector) -> Result<Vec<String>> {
    let names = sel.selected_names(target, n_layers_of(target));
    if names.is_empty() {
        return Err(Error::EmptySelection(sel.to_string()));
    }
    let problems: Vec<String> = names
        .iter()
        .filter_map(|n| match source.get(n) {
            None => Some(format!("{n}: missing from source")),
            Some(s) if s.shape() != target.get(n).expect("selected").shape() => Some(format!(
                "{n}: {:?} vs {:?}",
                target.get(n).expect("selected").shape(),
                s.shape()
            )),
            _ => None,
        })
        .collect();
    if problems.is_empty() {
        Ok(names)
    } else {
        Err(Error::Incompatible(problems))
    }
}

fn blend(t: &Tensor, s: &Tensor, p: f32) -> Tensor {
    if p == 0.0 {
        return t.clone();
    }
    if p == 1.0 {
        return s.clone();
    }
    let q = 1.0 - p;
    let data = t.data().iter().zip(s.data()).map(|(a, b)| q * a + p * b).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// `theta_t <- (1 - p) theta_t + p theta_s` on the selected entries of `target`.
pub fn merge_layer(target: &ParameterTree, source: &ParameterTree, sel: &LayerSelector, p: f32) -> Result<ParameterTree> {
    check_coefficient(p)?;
    let names = compatible_selection(target, source, sel)?;
    let mut out = target.clone();
    for n in names {
        let merged = blend(&target[n.as_str()], &source[n.as_str()], p);
        out.set(&n, merged);
    }
    Ok(out)
}

/// `(1 - lambda) A + lambda B` on the selection; endpoints reproduce A or B exactly.
pub fn interpolate(a: &ParameterTree, b: &ParameterTree, lambda: f32, sel: &LayerSelector) -> Result<ParameterTree> {
    merge_layer(a, b, sel, lambda)
}

fn same_layout(a: &ParameterTree, b: &ParameterTree) -> Result<()> {
    let mut problems = Vec::new();
    for (n, t) in a.iter() {
        match b.get(n) {
            None => problems.push(format!("{n}: missing")),
            Some(u) if u.shape() != t.shape() => problems.push(format!("{n}: {:?} vs {:?}", t.shape(), u.shape())),
            _ => {}
        }
    }
    problems.extend(b.names().filter(|n| !a.contains(n)).map(|n| format!("{n}: unexpected")));
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(problems))
    }
}

/// `theta - theta_pre`, entry by entry.
pub fn task_vector(theta: &ParameterTree, pre: &ParameterTree) -> Result<ParameterTree> {
    same_layout(theta, pre)?;
    Ok(theta
        .iter()
        .map(|(n, t)| {
            let data = t.data().iter().zip(pre[n].data()).map(|(a, b)| a - b).collect();
            (n.to_string(), Tensor::new(t.shape().to_vec(), data).expect("same shape"))
        })
        .collect())
}

/// `theta_pre + scale * sum(deltas)`.
pub fn apply_task_vectors(pre: &ParameterTree, deltas: &[ParameterTree], scale: f32) -> Result<ParameterTree> {
    for d in deltas {
        same_layout(pre, d)?;
    }
    Ok(pre
        .iter()
        .map(|(n, t)| {
            let mut sum = vec![0.0f32; t.numel()];
            for d in deltas {
                for (s, v) in sum.iter_mut().zip(d[n].data()) {
                    *s += v;
                }
            }
            let data = t.data().iter().zip(&sum).map(|(p, s)| p + scale * s).collect();
            (n.to_string(), Tensor::new(t.shape().to_vec(), data).expect("same shape"))
        })
        .collect())
}

/// Equal-weight average of several trees on the selection (`1/m` each).
pub fn average(trees: &[&ParameterTree], sel: &LayerSelector) -> Result<ParameterTree> {
    let first = *trees
        .first()
        .ok_or_else(|| Error::Config("nothing to average".into()))?;
    let mut names = Vec::new();
    for t in &trees[1..] {
        names = compatible_selection(first, t, sel)?;
    }
    if trees.len() == 1 {
        names = sel.selected_names(first, n_layers_of(first));
    }
    let w = 1.0 / trees.len() as f32;
    let mut out = first.clone();
    for n in names {
        let numel = first[n.as_str()].numel();
        let mut acc = vec![0.0f32; numel];
        for t in trees {
            for (a, v) in acc.iter_mut().zip(t[n.as_str()].data()) {
                *a += w * v;
            }
        }
        out.set(&n, Tensor::new(first[n.as_str()].shape().to_vec(), acc).expect("same shape"));
    }
    Ok(out)
}

/// One entry per depth `k = 0..=units`: the names of the first `k` layer units
/// and `target` with exactly those units merged from `source`.
pub fn incremental_merge(
    target: &ParameterTree,
    source: &ParameterTree,
    p: f32,
) -> Result<Vec<(Vec<String>, ParameterTree)>> {
    check_coefficient(p)?;
    let units = layer_units(n_layers_of(target));
    let mut out = Vec::with_capacity(units.len() + 1);
    let mut current = target.clone();
    out.push((Vec::new(), current.clone()));
    for k in 1..=units.len() {
        current = merge_layer(&current, source, &LayerSelector::unit(&units[k - 1])?, p)?;
        out.push((units[..k].to_vec(), current.clone()));
    }
    Ok(out)
}

/// Euclidean distance between `a` and `b` per layer unit, over every
/// parameter of the unit (weights, biases and layer-norm affine terms).
pub fn l2_distance(a: &ParameterTree, b: &ParameterTree) -> Result<IndexMap<String, f64>> {
    let units = layer_units(n_layers_of(a));
    let mut sums: IndexMap<String, f64> = units.into_iter().map(|u| (u, 0.0)).collect();
    let mut problems = Vec::new();
    for (n, t) in a.iter() {
        let Some(unit) = unit_of(n) else { continue };
        let Some(u) = b.get(n).filter(|u| u.shape() == t.shape()) else {
            problems.push(n.to_string());
            continue;
        };
        let s: f64 = t
            .data()
            .iter()
            .zip(u.data())
            .map(|(x, y)| {
                let d = *x as f64 - *y as f64;
                d * d
            })
            .sum();
        *sums.entry(unit.to_string()).or_insert(0.0) += s;
    }
    if !problems.is_empty() {
        return Err(Error::Incompatible(problems));
    }
    Ok(sums.into_iter().map(|(u, s)| (u, s.sqrt())).collect())
}

/// Post-training replacement of every attention sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum PerturbMode {
    /// Fresh initialization from a fixed seed.
    Random { seed: u64 },
    /// Every attention weight entry 1, biases 0.
    Identity,
    /// Identity matrices for the weights, biases 0. Comparison variant only.
    Eye,
    /// Attention sublayers skipped in the forward pass.
    Removed,
}

pub const DEFAULT_PERTURB_SEED: u64 = 17;

impl fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbMode::Random { seed } => write!(f, "random:{seed}"),
            PerturbMode::Identity => f.write_str("identity"),
            PerturbMode::Eye => f.write_str("eye"),
            PerturbMode::Removed => f.write_str("removed"),
        }
    }
}

impl FromStr for PerturbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(PerturbMode::Identity),
            "eye" => Ok(PerturbMode::Eye),
            "removed" => Ok(PerturbMode::Removed),
            "random" => Ok(PerturbMode::Random {
                seed: DEFAULT_PERTURB_SEED,
            }),
            _ => s
                .strip_prefix("random:")
                .and_then(|v| v.parse().ok())
                .map(|seed| PerturbMode::Random { seed })
                .ok_or_else(|| Error::Config(format!("unknown perturbation mode {s:?}"))),
        }
    }
}

/// Applies `mode` to the attention parameters of `tree`; `removed` only flips
/// the architecture flag and leaves the weights untouched.
pub fn perturb_attention(arch: &ArchConfig, tree: &ParameterTree, mode: PerturbMode) -> Result<(ArchConfig, ParameterTree)> {
    let attn = LayerSelector::AttentionAll.selected_names(tree, n_layers_of(tree));
    if attn.is_empty() {
        return Err(Error::EmptySelection(LayerSelector::AttentionAll.to_string()));
    }
    let mut arch = arch.clone();
    let mut out = tree.clone();
    match mode {
        PerturbMode::Removed => arch.attention_removed = true,
        PerturbMode::Random { seed } => {
            let fresh = init_attention(&arch, &mut substream(seed, "perturb"))?;
            for n in &attn {
                let t = fresh
                    .get(n)
                    .ok_or_else(|| Error::Incompatible(vec![format!("{n}: not in architecture")]))?;
                out.set(n, t.clone());
            }
        }
        PerturbMode::Identity | PerturbMode::Eye => {
            for n in &attn {
                let shape = out[n.as_str()].shape().to_vec();
                let t = if n.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else if mode == PerturbMode::Identity {
                    Tensor::full(&shape, 1.0)
                } else {
                    let cols = shape[1];
                    Tensor::from_fn(&shape, |i| if i / cols == i % cols { 1.0 } else { 0.0 })
                };
                out.set(n, t);
            }
        }
    }
    Ok((arch, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::init_transformer;

    fn pair() -> (ParameterTree, ParameterTree) {
        let arch = ArchConfig::tiny(8);
        (
            init_transformer(&arch, &mut substream(1, "a")).unwrap(),
            init_transformer(&arch, &mut substream(2, "b")).unwrap(),
        )
    }

    #[test]
    fn merge_arithmetic() {
        let mut t = ParameterTree::new();
        t.insert("block0.ln1.gamma", Tensor::new(vec![2], vec![2.0, 4.0]).unwrap()).unwrap();
        let mut s = ParameterTree::new();
        s.insert("block0.ln1.gamma", Tensor::new(vec![2], vec![0.0, 2.0]).unwrap()).unwrap();
        let m = merge_layer(&t, &s, &LayerSelector::TransformerAll, 0.5).unwrap();
        assert_eq!(m["block0.ln1.gamma"].data(), &[1.0, 3.0]);
    }

    #[test]
    fn coefficient_range() {
        let (a, b) = pair();
        assert!(matches!(
            interpolate(&a, &b, 1.5, &LayerSelector::AttentionAll),
            Err(Error::Coefficient(_))
        ));
        assert!(matches!(
            interpolate(&a, &b, 0.5, &LayerSelector::None),
            Err(Error::EmptySelection(_))
        ));
    }

    #[test]
    fn shape_mismatch_lists_names() {
        let (a, _) = pair();
        let other = init_transformer(&ArchConfig::tiny(16), &mut substream(3, "c")).unwrap();
        match merge_layer(&a, &other, &LayerSelector::single(0, crate::Sublayer::Attn), 0.5) {
            Err(Error::Incompatible(names)) => {
                assert_eq!(names.len(), 8);
                assert!(names[0].starts_with("block0.attn.q.weight"));
            }
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }

    #[test]
    fn perturb_modes() {
        let arch = ArchConfig::tiny(8);
        let (a, _) = pair();
        let (_, ident) = perturb_attention(&arch, &a, PerturbMode::Identity).unwrap();
        assert!(ident["block1.attn.k.weight"].data().iter().all(|&v| v == 1.0));
        assert!(ident["block1.attn.k.bias"].data().iter().all(|&v| v == 0.0));
        let (_, eye) = perturb_attention(&arch, &a, PerturbMode::Eye).unwrap();
        assert_eq!(eye["block0.attn.q.weight"].data()[9], 1.0);
        assert_eq!(eye["block0.attn.q.weight"].data()[1], 0.0);
        let (removed_arch, removed) = perturb_attention(&arch, &a, PerturbMode::Removed).unwrap();
        assert!(removed_arch.attention_removed && removed.bit_eq(&a));
        let r1 = perturb_attention(&arch, &a, PerturbMode::Random { seed: 17 }).unwrap().1;
        let r2 = perturb_attention(&arch, &a, PerturbMode::Random { seed: 17 }).unwrap().1;
        assert!(r1.bit_eq(&r2) && !r1.bit_eq(&a));
        assert!(r1["block0.mlp.fc1.weight"].bit_eq(&a["block0.mlp.fc1.weight"]));
        assert_eq!("random:5".parse::<PerturbMode>().unwrap(), PerturbMode::Random { seed: 5 });
        assert!("shuffle".parse::<PerturbMode>().is_err());
    }
}
