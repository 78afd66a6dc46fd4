use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Shape of the shared transformer trunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_embed: usize,
    pub d_mlp: usize,
    /// Maximum number of token positions (3 per transition for a DT).
    pub context_positions: usize,
    pub activation: Activation,
    pub dropout: f32,
    /// When set, every attention sublayer contributes exactly zero.
    #[serde(default)]
    pub attention_removed: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            n_layers: 3,
            n_heads: 1,
            d_embed: 128,
            d_mlp: 512,
            context_positions: 60,
            activation: Activation::Relu,
            dropout: 0.1,
            attention_removed: false,
        }
    }
}

impl ArchConfig {
    /// Small trunk with the default layout, for tests and quick experiments.
    pub fn tiny(d_embed: usize) -> Self {
        ArchConfig {
            d_embed,
            d_mlp: 4 * d_embed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_embed", self.d_embed),
            ("d_mlp", self.d_mlp),
            ("context_positions", self.context_positions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_embed % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_embed {} not divisible by n_heads {}",
                self.d_embed, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_embed / self.n_heads
    }

    /// Parameter count of the transformer trunk (blocks plus final layer norm).
    pub fn transformer_params(&self) -> usize {
        let d = self.d_embed;
        let attn = 4 * (d * d + d);
        let mlp = d * self.d_mlp + self.d_mlp + self.d_mlp * d + d;
        let ln = 2 * 2 * d;
        self.n_layers * (attn + mlp + ln) + 2 * d
    }
}
