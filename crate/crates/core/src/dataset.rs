//! Offline datasets generated by the scripted policies, and the `DTDS` file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{rollout, EnvKind, Quality, References, ScriptedPolicy, Trajectory};
use crate::io::{frame, read_file, unframe, write_atomic};
use crate::rng::derive_seed;
use crate::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"DTDS";
pub const DATASET_VERSION: u16 = 1;
pub const DEFAULT_TRAJECTORIES: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetQuality {
    Medium,
    Expert,
    MediumExpert,
}

impl std::str::FromStr for DatasetQuality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medium" => Ok(DatasetQuality::Medium),
            "expert" => Ok(DatasetQuality::Expert),
            "medium-expert" => Ok(DatasetQuality::MediumExpert),
            _ => Err(Error::Config(format!("unknown dataset quality {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub env: EnvKind,
    pub quality: DatasetQuality,
    pub seed: u64,
    pub references: References,
    pub trajectories: Vec<Trajectory>,
}

fn tier(kind: EnvKind, quality: Quality, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    (0..n)
        .map(|i| {
            let mut policy = ScriptedPolicy::new(kind, quality, derive_seed(seed, &format!("{}/policy/{i}", quality.name())));
            rollout(kind, &mut policy, derive_seed(seed, &format!("{}/episode/{i}", quality.name())))
        })
        .collect()
}

/// `n` trajectories per tier; medium-expert holds the medium tier followed by the expert tier.
pub fn generate_dataset(env: EnvKind, quality: DatasetQuality, n: usize, seed: u64) -> Result<OfflineDataset> {
    let references = References::compute(env)?;
    let trajectories = match quality {
        DatasetQuality::Medium => tier(env, Quality::Medium, n, seed)?,
        DatasetQuality::Expert => tier(env, Quality::Expert, n, seed)?,
        DatasetQuality::MediumExpert => {
            let mut t = tier(env, Quality::Medium, n, seed)?;
            t.extend(tier(env, Quality::Expert, n, seed)?);
            t
        }
    };
    Ok(OfflineDataset {
        env,
        quality,
        seed,
        references,
        trajectories,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    env: EnvKind,
    quality: DatasetQuality,
    state_dim: usize,
    action_dim: usize,
    seed: u64,
    references: References,
    /// Steps per trajectory, in payload order.
    lengths: Vec<usize>,
}

impl OfflineDataset {
    pub fn max_return(&self) -> f32 {
        self.trajectories
            .iter()
            .map(|t| t.total_return)
            .fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Per-dimension state mean and standard deviation over every step.
    pub fn state_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let dim = self.env.spec().state_dim;
        let mut sum = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        let mut n = 0usize;
        for t in &self.trajectories {
            for s in t.states.chunks_exact(dim) {
                for (i, &v) in s.iter().enumerate() {
                    sum[i] += v as f64;
                    sq[i] += v as f64 * v as f64;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt() + 1e-6) as f32)
            .collect();
        (mean.into_iter().map(|m| m as f32).collect(), std)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let spec = self.env.spec();
        let header = Header {
            env: self.env,
            quality: self.quality,
            state_dim: spec.state_dim,
            action_dim: spec.action_dim,
            seed: self.seed,
            references: self.references,
            lengths: self.trajectories.iter().map(Trajectory::len).collect(),
        };
        let mut payload = Vec::with_capacity(self.num_steps() * (spec.state_dim + spec.action_dim + 1));
        for t in &self.trajectories {
            payload.extend_from_slice(&t.states);
            payload.extend_from_slice(&t.actions);
            payload.extend_from_slice(&t.rewards);
        }
        Ok(frame(DATASET_MAGIC, DATASET_VERSION, &serde_json::to_vec(&header)?, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = unframe(bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let header: Header = serde_json::from_slice(header)?;
        let spec = header.env.spec();
        if header.state_dim != spec.state_dim || header.action_dim != spec.action_dim {
            return Err(Error::Corrupt(format!("dimensions in header do not match {}", header.env)));
        }
        let per_step = spec.state_dim + spec.action_dim + 1;
        let expected: usize = header.lengths.iter().sum::<usize>() * per_step;
        if payload.len() != expected {
            return Err(Error::Corrupt(format!(
                "payload holds {} values, header declares {expected}",
                payload.len()
            )));
        }
        let mut trajectories = Vec::with_capacity(header.lengths.len());
        let mut rest = payload.as_slice();
        for &len in &header.lengths {
            let (states, r) = rest.split_at(len * spec.state_dim);
            let (actions, r) = r.split_at(len * spec.action_dim);
            let (rewards, r) = r.split_at(len);
            rest = r;
            trajectories.push(Trajectory::new(states.to_vec(), actions.to_vec(), rewards.to_vec())?);
        }
        Ok(OfflineDataset {
            env: header.env,
            quality: header.quality,
            seed: header.seed,
            references: header.references,
            trajectories,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
