//! Central finite-difference checks (h = 1e-3) for every differentiable op.
//!
//! The scalar probe is `L = sum_i w_i * y_i` with fixed random weights `w`,
//! evaluated in f64 from the op's f32 outputs. Relative error is measured as
//! `|analytic - numeric| / max(1, |analytic|, |numeric|)`, so components near
//! zero are compared on an absolute scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Result, Tensor, Var};

pub const H: f32 = 1e-3;
/// Acceptance threshold on the max relative error.
pub const TOL: f64 = 1e-3;

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync;
pub type Make = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor> + Send + Sync;

/// One op (or small composite) under test.
pub struct OpCase {
    pub name: &'static str,
    pub make: Box<Make>,
    pub build: Box<Build>,
    /// Run in training mode (dropout active with a fixed mask seed).
    pub training: bool,
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f32) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f32 = rng.random_range(-1.5..1.5);
        if v.abs() >= min_abs {
            break v;
        }
    })
}

fn graph(training: bool) -> Graph {
    if training {
        Graph::training(11, 5)
    } else {
        Graph::new()
    }
}

fn probe(inputs: &[Tensor], build: &Build, weights: &[f32], training: bool) -> Result<f64> {
    let mut g = graph(training);
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let y = build(&mut g, &vars)?;
    Ok(g.value(y)
        .data()
        .iter()
        .zip(weights)
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum())
}

/// Max relative error over every element of every input.
pub fn max_rel_error(inputs: &[Tensor], build: &Build, training: bool, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    let y = build(&mut g, &vars)?;
    let n = g.value(y).numel();
    let weights: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut g = graph(training);
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let y = build(&mut g, &vars)?;
    let flat = g.reshape(y, &[1, n])?;
    let w = g.constant(Tensor::new(vec![n, 1], weights.clone())?)?;
    let dot = g.matmul(flat, w, false)?;
    let loss = g.sum(dot)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zero(vars[k]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (probe(&plus, build, &weights, training)? - probe(&minus, build, &weights, training)?) / (2.0 * H as f64);
            let a = analytic.data()[i] as f64;
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Worst error of `case` over `instances` random draws.
pub fn check_case(case: &OpCase, instances: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + case.name.len() as u64);
        let inputs = (case.make)(&mut rng);
        worst = worst.max(max_rel_error(&inputs, &*case.build, case.training, &mut rng)?);
    }
    Ok(worst)
}

fn case(
    name: &'static str,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + Send + Sync + 'static,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync + 'static,
    training: bool,
) -> OpCase {
    OpCase {
        name,
        make: Box::new(make),
        build: Box::new(build),
        training,
    }
}

/// Every differentiable op of [`Graph`], plus an attention composite.
pub fn cases() -> Vec<OpCase> {
    vec![
        case(
            "matmul",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0), rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.matmul(v[0], v[1], false),
            false,
        ),
        case(
            "matmul_t",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[2, 4, 4], 0.0), rand_tensor(r, &[3, 4], 0.0)],
            |g, v| g.matmul(v[0], v[1], true),
            false,
        ),
        case(
            "bmm",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[2, 4, 4], 0.0), rand_tensor(r, &[2, 4, 3], 0.0)],
            |g, v| g.bmm(v[0], v[1], false),
            false,
        ),
        case(
            "bmm_t",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[2, 4, 4], 0.0), rand_tensor(r, &[2, 4, 4], 0.0)],
            |g, v| g.bmm(v[0], v[1], true),
            false,
        ),
        case(
            "add_broadcast",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0), rand_tensor(r, &[4], 0.0)],
            |g, v| g.add(v[0], v[1]),
            false,
        ),
        case(
            "scale",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.scale(v[0], -0.7),
            false,
        ),
        case(
            "add_scalar",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.add_scalar(v[0], 0.3),
            false,
        ),
        case(
            "softmax",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.softmax(v[0]),
            false,
        ),
        case(
            "causal_softmax",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[2, 4, 4], 0.0)],
            |g, v| g.causal_softmax(v[0]),
            false,
        ),
        case(
            "layer_norm",
            |r: &mut ChaCha8Rng| {
                vec![
                    rand_tensor(r, &[4, 4], 0.0),
                    rand_tensor(r, &[4], 0.0),
                    rand_tensor(r, &[4], 0.0),
                ]
            },
            |g, v| g.layer_norm(v[0], v[1], v[2]),
            false,
        ),
        case(
            "relu",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.05)],
            |g, v| g.relu(v[0]),
            false,
        ),
        case(
            "gelu",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.gelu(v[0]),
            false,
        ),
        case(
            "tanh",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.tanh(v[0]),
            false,
        ),
        case(
            "dropout",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.dropout(v[0], 0.3),
            true,
        ),
        case(
            "gather_rows",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.gather_rows(v[0], &[3, 0, 0, 2, 1], &[5]),
            false,
        ),
        case(
            "concat_rows",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0), rand_tensor(r, &[2, 4], 0.0)],
            |g, v| g.concat_rows(&[v[0], v[1]]),
            false,
        ),
        case(
            "reshape",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.reshape(v[0], &[2, 8]),
            false,
        ),
        case(
            "swap_axes_12",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[1, 2, 2, 4], 0.0)],
            |g, v| g.swap_axes_12(v[0]),
            false,
        ),
        case(
            "normalize_rows",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.normalize_rows(v[0]),
            false,
        ),
        case(
            "max_last",
            |r: &mut ChaCha8Rng| {
                // each row is a shuffled ladder with 0.25 spacing so the argmax is stable under +-h
                let mut t = rand_tensor(r, &[4, 4], 0.0);
                for row in t.data_mut().chunks_mut(4) {
                    let mut ladder = [0.0f32, 0.25, 0.5, 0.75];
                    for i in (1..4).rev() {
                        ladder.swap(i, r.random_range(0..=i));
                    }
                    let base = row[0];
                    for (v, step) in row.iter_mut().zip(ladder) {
                        *v = base + step;
                    }
                }
                vec![t]
            },
            |g, v| g.max_last(v[0]),
            false,
        ),
        case(
            "sum",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.sum(v[0]),
            false,
        ),
        case(
            "mean",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.mean(v[0]),
            false,
        ),
        case(
            "mse_loss",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0), rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.mse_loss(v[0], v[1], Some(&[true, false, true, true])),
            false,
        ),
        case(
            "cross_entropy_loss",
            |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 4], 0.0)],
            |g, v| g.cross_entropy_loss(v[0], &[0, 3, 1, 1]),
            false,
        ),
        case(
            "attention",
            |r: &mut ChaCha8Rng| {
                vec![
                    rand_tensor(r, &[1, 4, 4], 0.0),
                    rand_tensor(r, &[4, 4], 0.0),
                    rand_tensor(r, &[4, 4], 0.0),
                ]
            },
            |g, v| {
                let q = g.matmul(v[0], v[1], false)?;
                let k = g.matmul(v[0], v[2], false)?;
                let s = g.bmm(q, k, true)?;
                let s = g.scale(s, 0.5)?;
                let p = g.causal_softmax(s)?;
                g.bmm(p, v[0], false)
            },
            false,
        ),
    ]
}
