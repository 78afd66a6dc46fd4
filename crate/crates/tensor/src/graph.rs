use crate::kernels::{gemm, MatRef};
use crate::{Result, Tensor, TensorError};

const LAYER_NORM_EPS: f32 = 1e-5;
const NORMALIZE_EPS: f32 = 1e-12;
const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_A: f32 = 0.044_715;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f32,
    },
    AddScalar {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Relu {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<f32>,
    },
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Reshape {
        a: Var,
    },
    SwapAxes12 {
        a: Var,
        dims: [usize; 4],
    },
    NormalizeRows {
        a: Var,
        norms: Vec<f32>,
    },
    MaxLast {
        a: Var,
        argmax: Vec<usize>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Mse {
        pred: Var,
        target: Var,
        row_weight: Vec<f32>,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Recording tape for reverse-mode differentiation.
///
/// Ops append nodes in evaluation order, so the node list is a topological
/// order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    dropout_seed: u64,
    consumed: bool,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Padé [7/6] approximant of tanh, clamped to +-1 where it crosses 1.
/// Absolute error below 1e-4, largest near the clamp.
#[inline(always)]
fn fast_tanh(x: f32) -> f32 {
    let x = x.clamp(-4.97, 4.97);
    let x2 = x * x;
    let num = x * (135_135.0 + x2 * (17_325.0 + x2 * (378.0 + x2)));
    let den = 135_135.0 + x2 * (62_370.0 + x2 * (3_150.0 + x2 * 28.0));
    (num / den).clamp(-1.0, 1.0)
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().fold(true, |ok, v| ok & v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    /// Inference graph: dropout is the identity.
    pub fn new() -> Self {
        Self::default()
    }

    /// Training graph. Dropout masks are a pure function of
    /// `(seed, step, node index, element index)`.
    pub fn training(seed: u64, step: u64) -> Self {
        Graph {
            training: true,
            dropout_seed: splitmix64(splitmix64(seed) ^ step.wrapping_mul(0xA24B_AED4_963E_E407)),
            ..Self::default()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", t.data())?;
        Ok(self.push(t, Op::Leaf, requires_grad))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    fn finish(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let rg = self.rg(inputs);
        Ok(self.push(value, op, rg))
    }

    /// `a @ b` where `a` is `[.., k]` and `b` is `[k, n]` (or `[n, k]` with `trans_b`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let k = av.last_dim();
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let m = av.rows();
        let mut out = vec![0.0; m * n];
        let bm = MatRef::row_major(bv.data(), bv.shape()[0], bv.shape()[1]);
        gemm(
            MatRef::row_major(av.data(), m, k),
            if trans_b { bm.t() } else { bm },
            &mut out,
            0.0,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.finish("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Batched `a[i] @ b[i]` with `a: [B, m, k]`, `b: [B, k, n]` (or `[B, n, k]` with `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if av.shape().len() != 3 || bv.shape().len() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(mismatch());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        let b_rows = bv.shape()[1];
        let b_cols = bv.shape()[2];
        for i in 0..batch {
            let am = MatRef::row_major(&av.data()[i * m * k..(i + 1) * m * k], m, k);
            let bm = MatRef::row_major(&bv.data()[i * k * n..(i + 1) * k * n], b_rows, b_cols);
            gemm(
                am,
                if trans_b { bm.t() } else { bm },
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.finish("bmm", value, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    /// Elementwise `a + b`; `b` may match a trailing suffix of `a`'s shape and is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || bv.numel() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bn = bv.numel();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(bn) {
            add_into(chunk, bv.data());
        }
        let value = Tensor::new(sa.to_vec(), out)?;
        self.finish("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.finish("scale", value, Op::Scale { a, factor }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|v| v + c).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.finish("add_scalar", value, Op::AddScalar { a }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Softmax over the last axis of `[.., T, T]` scores, with position `j > i`
    /// in row `i` given exactly zero weight.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        if causal {
            let s = av.shape();
            if s.len() < 2 || s[s.len() - 2] != d {
                return Err(TensorError::invalid(
                    "causal_softmax",
                    format!("expected square trailing dims, got {s:?}"),
                ));
            }
        }
        let mut out = vec![0.0f32; av.numel()];
        for (r, (row, dst)) in av.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let limit = if causal { r % d + 1 } else { d };
            let max = row[..limit].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for (o, &x) in dst[..limit].iter_mut().zip(&row[..limit]) {
                *o = (x - max).exp();
                total += *o;
            }
            let inv = 1.0 / total;
            dst[..limit].iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let name = if causal { "causal_softmax" } else { "softmax" };
        self.finish(name, value, Op::Softmax { a }, &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[d]`.
    /// Uses population variance and `eps = 1e-5` inside the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        for p in [gamma, beta] {
            let s = self.value(p).shape();
            if s != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let mut out = vec![0.0f32; xv.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (row, dst) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                dst[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.finish(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.finish("relu", value, Op::Relu { a }, &[a])
    }

    /// GELU, tanh form `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x))))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.finish("gelu", value, Op::Gelu { a }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|&v| v.tanh()).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.finish("tanh", value, Op::Tanh { a }, &[a])
    }

    /// Inverted dropout. Identity on inference graphs or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f32) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::invalid(
                "dropout",
                format!("rate {rate} outside [0, 1)"),
            ));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let op_seed = splitmix64(self.dropout_seed ^ splitmix64(self.nodes.len() as u64));
        let keep = 1.0 / (1.0 - rate);
        let threshold = (rate as f64 * (1u64 << 53) as f64) as u64;
        let av = self.value(a);
        let mask: Vec<f32> = (0..av.numel() as u64)
            .map(|i| {
                let u = splitmix64(op_seed.wrapping_add(i)) >> 11;
                if u < threshold {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out = av.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.finish("dropout", value, Op::Dropout { a, mask }, &[a])
    }

    /// Rows of `table` (viewed as `[rows, d]`) selected by `index`; output shape is
    /// `out_prefix ++ [d]`. This is also embedding lookup.
    pub fn gather_rows(&mut self, table: Var, index: &[usize], out_prefix: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let d = tv.last_dim();
        let rows = tv.rows();
        if out_prefix.iter().product::<usize>() != index.len() {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("{} indices do not fill shape {out_prefix:?}", index.len()),
            ));
        }
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= rows {
                return Err(TensorError::invalid(
                    "gather_rows",
                    format!("row {i} out of range for {rows} rows"),
                ));
            }
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let mut shape = out_prefix.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        self.finish(
            "gather_rows",
            value,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            &[table],
        )
    }

    /// Stacks the rows of every part (all sharing the last dim) into `[total_rows, d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat_rows", "no inputs"))?;
        let d = self.value(*first).last_dim();
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.last_dim() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            out.extend_from_slice(pv.data());
        }
        let rows = out.len() / d;
        let value = Tensor::new(vec![rows, d], out)?;
        self.finish(
            "concat_rows",
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.finish("reshape", value, Op::Reshape { a }, &[a])
    }

    /// `[A, B, C, D] -> [A, C, B, D]`; splits or merges attention heads.
    pub fn swap_axes_12(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 4 {
            return Err(TensorError::invalid(
                "swap_axes_12",
                format!("expected 4 dims, got {s:?}"),
            ));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(av.data(), dims);
        let value = Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], out)?;
        self.finish("swap_axes_12", value, Op::SwapAxes12 { a, dims }, &[a])
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        let mut norms = Vec::with_capacity(av.rows());
        let mut out = vec![0.0f32; av.numel()];
        for (row, dst) in av.data().chunks(d).zip(out.chunks_mut(d)) {
            let n = (row.iter().map(|v| v * v).sum::<f32>() + NORMALIZE_EPS).sqrt();
            for (o, v) in dst.iter_mut().zip(row) {
                *o = v / n;
            }
            norms.push(n);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.finish("normalize_rows", value, Op::NormalizeRows { a, norms }, &[a])
    }

    /// Maximum over the last axis; the gradient flows to the first argmax.
    pub fn max_last(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        let mut argmax = Vec::with_capacity(av.rows());
        let mut out = Vec::with_capacity(av.rows());
        for row in av.data().chunks(d) {
            let (idx, best) = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            argmax.push(idx);
            out.push(best);
        }
        let shape = av.shape()[..av.shape().len().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, out)?;
        self.finish("max_last", value, Op::MaxLast { a, argmax }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).sum() as f32;
        self.finish("sum", Tensor::scalar(total), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.numel() == 0 {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        let m = (av.sum() / av.numel() as f64) as f32;
        self.finish("mean", Tensor::scalar(m), Op::Mean { a }, &[a])
    }

    /// Mean squared error over the rows (last axis = features) whose mask entry is true.
    pub fn mse_loss(&mut self, pred: Var, target: Var, row_mask: Option<&[bool]>) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse_loss",
                lhs: pv.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let d = pv.last_dim();
        let rows = pv.rows();
        let row_weight: Vec<f32> = match row_mask {
            Some(m) if m.len() != rows => {
                return Err(TensorError::invalid(
                    "mse_loss",
                    format!("mask has {} entries for {rows} rows", m.len()),
                ))
            }
            Some(m) => m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            None => vec![1.0; rows],
        };
        let count = row_weight.iter().filter(|&&w| w > 0.0).count() * d;
        if count == 0 {
            return Err(TensorError::invalid("mse_loss", "no supervised positions"));
        }
        let mut total = 0.0f64;
        for (r, w) in row_weight.iter().enumerate() {
            if *w > 0.0 {
                for j in r * d..(r + 1) * d {
                    let e = (pv.data()[j] - tv.data()[j]) as f64;
                    total += e * e;
                }
            }
        }
        let value = Tensor::scalar((total / count as f64) as f32);
        self.finish(
            "mse_loss",
            value,
            Op::Mse {
                pred,
                target,
                row_weight,
                count,
            },
            &[pred, target],
        )
    }

    /// Mean next-token cross-entropy of `logits: [N, V]` against class indices.
    pub fn cross_entropy_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        if lv.rows() != targets.len() || targets.is_empty() {
            return Err(TensorError::invalid(
                "cross_entropy_loss",
                format!("{} targets for {} rows", targets.len(), lv.rows()),
            ));
        }
        let mut probs = vec![0.0f32; lv.numel()];
        let mut total = 0.0f64;
        for (r, (row, dst)) in lv.data().chunks(v).zip(probs.chunks_mut(v)).enumerate() {
            let t = targets[r];
            if t >= v {
                return Err(TensorError::invalid(
                    "cross_entropy_loss",
                    format!("target {t} outside vocabulary of {v}"),
                ));
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for (p, &x) in dst.iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            dst.iter_mut().for_each(|p| *p /= z);
            total += (z.ln() - (row[t] - max)) as f64;
        }
        let value = Tensor::scalar((total / targets.len() as f64) as f32);
        self.finish(
            "cross_entropy_loss",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`. The graph is consumed afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        let mut out: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads: out, shapes })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.last_dim());
                let n = node.value.last_dim();
                let gm = MatRef::row_major(g, m, n);
                let bm = MatRef::row_major(bv.data(), bv.shape()[0], bv.shape()[1]);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    // dA = dC @ op(B)^T
                    gemm(gm, if *trans_b { bm } else { bm.t() }, ga, 1.0);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    let am = MatRef::row_major(av.data(), m, k);
                    if *trans_b {
                        gemm(gm.t(), am, gb, 1.0);
                    } else {
                        gemm(am.t(), gm, gb, 1.0);
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                let (br, bc) = (bv.shape()[1], bv.shape()[2]);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for t in 0..batch {
                        let gm = MatRef::row_major(&g[t * m * n..(t + 1) * m * n], m, n);
                        let bm = MatRef::row_major(&bv.data()[t * k * n..(t + 1) * k * n], br, bc);
                        gemm(
                            gm,
                            if *trans_b { bm } else { bm.t() },
                            &mut ga[t * m * k..(t + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for t in 0..batch {
                        let gm = MatRef::row_major(&g[t * m * n..(t + 1) * m * n], m, n);
                        let am = MatRef::row_major(&av.data()[t * m * k..(t + 1) * m * k], m, k);
                        let dst = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            gemm(gm.t(), am, dst, 1.0);
                        } else {
                            gemm(am.t(), gm, dst, 1.0);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    let bn = gb.len();
                    for chunk in g.chunks(bn) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s * factor;
                    }
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Softmax { a } => {
                let d = node.value.last_dim();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((yr, gr), dst) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..d {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.grad_buf(grads, *gamma) {
                    for (r, (xr, gr)) in xv.data().chunks(d).zip(g.chunks(d)).enumerate() {
                        for j in 0..d {
                            gg[j] += gr[j] * (xr[j] - mean[r]) * rstd[r];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *beta) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let mut dxhat = vec![0.0f32; d];
                    for (r, ((xr, gr), dst)) in xv
                        .data()
                        .chunks(d)
                        .zip(g.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut mean_dxhat = 0.0f32;
                        let mut mean_dxhat_xhat = 0.0f32;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * (xr[j] - mu) * rs;
                        }
                        mean_dxhat /= d as f32;
                        mean_dxhat_xhat /= d as f32;
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * rs;
                            dst[j] += rs * (dxhat[j] - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Relu { a } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                        if *yv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let xv = self.value(*a).data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, gv), &x) in ga.iter_mut().zip(g).zip(xv) {
                        let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d += gv * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, gv), m) in ga.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::GatherRows { table, index } => {
                let d = self.value(*table).last_dim();
                if let Some(gt) = self.grad_buf(grads, *table) {
                    for (r, &idx) in index.iter().enumerate() {
                        add_into(&mut gt[idx * d..(idx + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(gp) = self.grad_buf(grads, *p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SwapAxes12 { a, dims } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                    add_into(ga, &back);
                }
            }
            Op::NormalizeRows { a, norms } => {
                let d = node.value.last_dim();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (r, ((yr, gr), dst)) in
                        y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)).enumerate()
                    {
                        let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..d {
                            dst[j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::MaxLast { a, argmax } => {
                let d = self.value(*a).last_dim();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (r, &j) in argmax.iter().enumerate() {
                        ga[r * d + j] += g[r];
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    let s = g[0] / ga.len() as f32;
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Mse {
                pred,
                target,
                row_weight,
                count,
            } => {
                let (pv, tv) = (self.value(*pred).data(), self.value(*target).data());
                let d = self.value(*pred).last_dim();
                let s = 2.0 * g[0] / *count as f32;
                for (v, sign) in [(*pred, 1.0f32), (*target, -1.0f32)] {
                    if let Some(gv) = self.grad_buf(grads, v) {
                        for (r, w) in row_weight.iter().enumerate() {
                            if *w > 0.0 {
                                for j in r * d..(r + 1) * d {
                                    gv[j] += sign * s * (pv[j] - tv[j]);
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).last_dim();
                if let Some(gl) = self.grad_buf(grads, *logits) {
                    let s = g[0] / targets.len() as f32;
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * v..(r + 1) * v];
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            row[j] += s * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn swap12(src: &[f32], [a, b, c, d]: [usize; 4]) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let t = ((i * c + k) * b + j) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn causal_softmax_zeroes_future_positions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 3], |i| i as f32 * 0.3)).unwrap();
        let y = g.causal_softmax(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 1.0);
        assert_eq!((v[1], v[2], v[5]), (0.0, 0.0, 0.0));
        for row in v.chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4], 3.5)).unwrap();
        let gamma = g.constant(Tensor::full(&[4], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_of_identical_inputs_is_zero_with_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0])).unwrap();
        let q = g.constant(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0])).unwrap();
        let l = g.mse_loss(p, q, None).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        // loss = sum(x @ W) with x fixed => dW[i][j] = x[i]
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let w = g.param(Tensor::from_fn(&[3, 2], |i| i as f32)).unwrap();
        let y = g.matmul(x, w, false).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0)).unwrap();
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.backward(l).unwrap_err(), TensorError::GraphConsumed);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::full(&[2], 1.0)).unwrap();
        let unused = g.param(Tensor::full(&[3], 1.0)).unwrap();
        let l = g.sum(a).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get_or_zero(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[4, 2])).unwrap();
        let err = g.matmul(a, b, false).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![4, 2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut g = Graph::new();
        assert!(matches!(
            g.constant(Tensor::scalar(f32::NAN)),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn dropout_is_deterministic_and_identity_in_inference() {
        let run = |seed| {
            let mut g = Graph::training(seed, 3);
            let x = g.constant(Tensor::full(&[64], 1.0)).unwrap();
            let y = g.dropout(x, 0.5).unwrap();
            g.value(y).clone()
        };
        assert!(run(7).bit_eq(&run(7)));
        assert!(!run(7).bit_eq(&run(8)));
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4], 1.0)).unwrap();
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
        assert!(g.dropout(x, 1.0).is_err());
    }

    #[test]
    fn fully_masked_mse_is_an_error() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[2, 1])).unwrap();
        let q = g.constant(Tensor::zeros(&[2, 1])).unwrap();
        assert!(g.mse_loss(p, q, Some(&[false, false])).is_err());
    }
}
