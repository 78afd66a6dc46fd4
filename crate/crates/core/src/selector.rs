use std::fmt;
use std::str::FromStr;

use dtmerge_tensor::ParameterTree;
use serde::{Deserialize, Serialize};

use crate::transformer::unit_of;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sublayer {
    Ln1,
    Attn,
    Ln2,
    Mlp,
}

impl Sublayer {
    fn as_str(self) -> &'static str {
        match self {
            Sublayer::Ln1 => "ln1",
            Sublayer::Attn => "attn",
            Sublayer::Ln2 => "ln2",
            Sublayer::Mlp => "mlp",
        }
    }

    fn depth_offset(self) -> usize {
        match self {
            Sublayer::Ln1 => 0,
            Sublayer::Attn => 1,
            Sublayer::Ln2 => 2,
            Sublayer::Mlp => 3,
        }
    }
}

/// Which transformer parameters an operation addresses. Never matches the
/// per-environment input/output projections.
///
/// String forms: `none`, `attention`, `mlp`, `layernorm`, `transformer`,
/// `block{i}.{ln1|attn|ln2|mlp}`, `final_ln`, `depth:{k}` and `+`-joined unions
/// such as `attention+mlp`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSelector {
    None,
    AttentionAll,
    MlpAll,
    LayerNormAll,
    TransformerAll,
    Single { block: usize, sublayer: Sublayer },
    FinalLn,
    /// The first `k` layer units in depth order.
    DepthPrefix(usize),
    Union(Vec<LayerSelector>),
}

fn depth_index(unit: &str, n_layers: usize) -> Option<usize> {
    if unit == "final_ln" {
        return Some(4 * n_layers);
    }
    let rest = unit.strip_prefix("block")?;
    let (block, sub) = rest.split_once('.')?;
    let block: usize = block.parse().ok()?;
    let sub = parse_sublayer(sub)?;
    Some(4 * block + sub.depth_offset())
}

fn parse_sublayer(s: &str) -> Option<Sublayer> {
    Some(match s {
        "ln1" => Sublayer::Ln1,
        "attn" => Sublayer::Attn,
        "ln2" => Sublayer::Ln2,
        "mlp" => Sublayer::Mlp,
        _ => return None,
    })
}

impl LayerSelector {
    pub fn single(block: usize, sublayer: Sublayer) -> Self {
        LayerSelector::Single { block, sublayer }
    }

    /// Selector for one layer unit name such as `block1.mlp` or `final_ln`.
    pub fn unit(unit: &str) -> Result<Self> {
        let sel: LayerSelector = unit.parse()?;
        match sel {
            LayerSelector::Single { .. } | LayerSelector::FinalLn => Ok(sel),
            _ => Err(Error::UnknownSelector(unit.to_string())),
        }
    }

    /// Whether the parameter `name` of a trunk with `n_layers` blocks is selected.
    pub fn matches(&self, name: &str, n_layers: usize) -> bool {
        let Some(unit) = unit_of(name) else {
            return false;
        };
        match self {
            LayerSelector::None => false,
            LayerSelector::AttentionAll => unit.ends_with(".attn"),
            LayerSelector::MlpAll => unit.ends_with(".mlp"),
            LayerSelector::LayerNormAll => {
                unit == "final_ln" || unit.ends_with(".ln1") || unit.ends_with(".ln2")
            }
            LayerSelector::TransformerAll => true,
            LayerSelector::Single { block, sublayer } => {
                unit == format!("block{block}.{}", sublayer.as_str())
            }
            LayerSelector::FinalLn => unit == "final_ln",
            LayerSelector::DepthPrefix(k) => {
                depth_index(unit, n_layers).is_some_and(|i| i < *k)
            }
            LayerSelector::Union(parts) => parts.iter().any(|p| p.matches(name, n_layers)),
        }
    }

    /// Selected entries of `tree`, in tree order.
    pub fn select(&self, tree: &ParameterTree, n_layers: usize) -> ParameterTree {
        tree.filter(|n| self.matches(n, n_layers))
    }

    pub fn selected_names(&self, tree: &ParameterTree, n_layers: usize) -> Vec<String> {
        tree.names()
            .filter(|n| self.matches(n, n_layers))
            .map(str::to_string)
            .collect()
    }
}

impl fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelector::None => f.write_str("none"),
            LayerSelector::AttentionAll => f.write_str("attention"),
            LayerSelector::MlpAll => f.write_str("mlp"),
            LayerSelector::LayerNormAll => f.write_str("layernorm"),
            LayerSelector::TransformerAll => f.write_str("transformer"),
            LayerSelector::Single { block, sublayer } => {
                write!(f, "block{block}.{}", sublayer.as_str())
            }
            LayerSelector::FinalLn => f.write_str("final_ln"),
            LayerSelector::DepthPrefix(k) => write!(f, "depth:{k}"),
            LayerSelector::Union(parts) => {
                let s: Vec<String> = parts.iter().map(ToString::to_string).collect();
                f.write_str(&s.join("+"))
            }
        }
    }
}

impl FromStr for LayerSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.contains('+') {
            let parts = s
                .split('+')
                .map(str::parse)
                .collect::<Result<Vec<LayerSelector>>>()?;
            return Ok(LayerSelector::Union(parts));
        }
        let unknown = || Error::UnknownSelector(s.to_string());
        Ok(match s {
            "none" => LayerSelector::None,
            "attention" | "attention_all" => LayerSelector::AttentionAll,
            "mlp" | "mlp_all" => LayerSelector::MlpAll,
            "layernorm" | "layernorm_all" => LayerSelector::LayerNormAll,
            "transformer" | "transformer_all" => LayerSelector::TransformerAll,
            "final_ln" => LayerSelector::FinalLn,
            _ => {
                if let Some(k) = s.strip_prefix("depth:") {
                    LayerSelector::DepthPrefix(k.parse().map_err(|_| unknown())?)
                } else {
                    let rest = s.strip_prefix("block").ok_or_else(unknown)?;
                    let (block, sub) = rest.split_once('.').ok_or_else(unknown)?;
                    LayerSelector::Single {
                        block: block.parse().map_err(|_| unknown())?,
                        sublayer: parse_sublayer(sub).ok_or_else(unknown)?,
                    }
                }
            }
        })
    }
}

impl TryFrom<String> for LayerSelector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerSelector> for String {
    fn from(s: LayerSelector) -> String {
        s.to_string()
    }
}
