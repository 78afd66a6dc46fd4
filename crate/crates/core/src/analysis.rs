//! Attention weight maps averaged over sliding windows of a trajectory.

use std::fmt::Write as _;

use dtmerge_tensor::{Graph, Tensor};

use crate::dt::{compute_rtg, DtBatch, DtModel, Window};
use crate::env::Trajectory;
use crate::transformer::bind_params;
use crate::{Error, Result};

/// Per-layer `[n, n]` attention weights, `n = 3 * transitions` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub n: usize,
    pub layers: Vec<Tensor>,
}

const WINDOW_CHUNK: usize = 32;

/// Averages each layer's attention (over heads and windows) across every
/// window of `transitions` consecutive steps of `traj`.
pub fn attention_maps(model: &DtModel, traj: &Trajectory, transitions: usize) -> Result<AttentionMap> {
    if transitions == 0 || traj.len() < transitions {
        return Err(Error::TrajectoryTooShort {
            len: traj.len(),
            window: transitions,
        });
    }
    if transitions > model.k() {
        return Err(Error::SequenceTooLong {
            len: transitions,
            max: model.k(),
        });
    }
    if model.arch.attention_removed {
        return Err(Error::Config("model has no attention to visualize".into()));
    }
    let (sd, ad) = (model.binding.state_dim, model.binding.action_dim);
    let rtg = compute_rtg(&traj.rewards)?;
    let n = 3 * transitions;
    let starts: Vec<usize> = (0..=traj.len() - transitions).collect();
    let mut sums = vec![vec![0.0f64; n * n]; model.arch.n_layers];
    let mut count = 0usize;
    for chunk in starts.chunks(WINDOW_CHUNK) {
        let windows: Vec<Window> = chunk
            .iter()
            .map(|&s| Window::from_trajectory(traj, &rtg, s, transitions, sd, ad))
            .collect();
        let batch = DtBatch::from_windows(&windows, transitions, sd, ad)?;
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &model.params, |_| true)?;
        let fwd = model.forward(&mut g, &vars, &batch)?;
        for (sum, &probs) in sums.iter_mut().zip(&fwd.attention) {
            for m in g.value(probs).data().chunks_exact(n * n) {
                for (s, &p) in sum.iter_mut().zip(m) {
                    *s += p as f64;
                }
                count += 1;
            }
        }
    }
    let per_layer = (count / model.arch.n_layers) as f64;
    let layers = sums
        .into_iter()
        .map(|s| Tensor::new(vec![n, n], s.into_iter().map(|v| (v / per_layer) as f32).collect()))
        .collect::<Result<_, _>>()?;
    Ok(AttentionMap { n, layers })
}

impl AttentionMap {
    /// CSV with header `layer,row,c0..c{n-1}`; `layers * n` data rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,row");
        for c in 0..self.n {
            let _ = write!(out, ",c{c}");
        }
        out.push('\n');
        for (l, m) in self.layers.iter().enumerate() {
            for (r, row) in m.data().chunks_exact(self.n).enumerate() {
                let _ = write!(out, "{l},{r}");
                for v in row {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Parses [`AttentionMap::to_csv`] output.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Corrupt("empty attention CSV".into()))?;
        let n = header.split(',').count().saturating_sub(2);
        let mut layers: Vec<Vec<f32>> = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n + 2 {
                return Err(Error::Corrupt(format!("line {}: {} fields, expected {}", i + 2, fields.len(), n + 2)));
            }
            let layer: usize = fields[0]
                .parse()
                .map_err(|_| Error::Corrupt(format!("line {}: bad layer index", i + 2)))?;
            if layer == layers.len() {
                layers.push(Vec::with_capacity(n * n));
            }
            let row = layers
                .get_mut(layer)
                .ok_or_else(|| Error::Corrupt(format!("line {}: layers out of order", i + 2)))?;
            for f in &fields[2..] {
                row.push(f.parse().map_err(|_| Error::Corrupt(format!("line {}: bad value {f}", i + 2)))?);
            }
        }
        let layers = layers
            .into_iter()
            .map(|d| Tensor::new(vec![n, n], d))
            .collect::<Result<_, _>>()?;
        Ok(AttentionMap { n, layers })
    }

    /// Frobenius norm of the difference, summed over layers.
    pub fn frobenius_distance(&self, other: &AttentionMap) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}
