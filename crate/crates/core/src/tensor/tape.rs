use std::sync::Arc;

use super::{gemm, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{NcvError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
/// Probability floor used inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxLast(Var),
    SumAxis1(Var),
    BroadcastAxis1(Var),
    ConcatLast(Var, Var),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SafeMassNll {
        logits: Var,
        targets: Vec<usize>,
        /// d loss_i / d z_ij, before the 1/n batch factor.
        row_grads: Vec<f64>,
    },
    StraightThrough {
        scores: Var,
        input: Var,
        unit_of_feature: Arc<[usize]>,
        hard: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Nodes are appended in evaluation order, so the
/// tape is topologically sorted by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NcvError {
    NcvError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`]; zeros for a
    /// grad-requiring node the root does not reach, `None` for constants.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.len()]);
        Some(Tensor::from_parts(node.value.shape().to_vec(), data))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (n, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * p];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, n, k, p);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![n, p], out), Op::MatMul(a, b), rg))
    }

    /// Batched product `[b×n×k]·[b×k×p] → [b×n×p]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err("bmm", sa, sb));
        }
        let (bs, n, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * n * p];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                &da[i * n * k..(i + 1) * n * k],
                &db[i * k * p..(i + 1) * k * p],
                &mut out[i * n * p..(i + 1) * n * p],
                n,
                k,
                p,
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![bs, n, p], out),
            Op::BatchMatMul(a, b),
            rg,
        ))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (bs, n, k) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(dim_err("transpose", &s, &[])),
        };
        let d = self.value(a).data();
        let mut out = vec![0.0; d.len()];
        for b in 0..bs {
            let base = b * n * k;
            for i in 0..n {
                for j in 0..k {
                    out[base + j * n + i] = d[base + i * k + j];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::TransposeLast2(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || ta.len() == 1 || tb.len() == 1 {
            Ok(())
        } else {
            Err(dim_err(op, ta.shape(), tb.shape()))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.len() >= tb.len() {
            ta.shape().to_vec()
        } else {
            tb.shape().to_vec()
        };
        let n = ta.len().max(tb.len());
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n)
            .map(|i| {
                let x = if da.len() == 1 { da[0] } else { da[i] };
                let y = if db.len() == 1 { db[0] } else { db[i] };
                f(x, y)
            })
            .collect();
        Tensor::from_parts(shape, data)
    }

    /// Elementwise sum; shapes must match or one side must be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_pair("add", a, b)?;
        let t = self.zip_broadcast(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product; shapes must match or one side must be a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_pair("mul", a, b)?;
        let t = self.zip_broadcast(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let t = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|v| v * c).collect());
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Adds a bias vector along the last axis: `x[.., p] + b[p]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, p) = tx.rows_cols();
        if tb.len() != p {
            return Err(dim_err("add_bias", tx.shape(), tb.shape()));
        }
        let bias = tb.data();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(p) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let t = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect());
        let rg = self.any_grad(&[a]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = tx.rows_cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(dim_err("layer_norm", tx.shape(), self.value(gamma).shape()));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normed = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let nv = (row[j] - mean) * inv;
                normed[r * d + j] = nv;
                out[r * d + j] = nv * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (_, d) = src.rows_cols();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::SoftmaxLast(a), rg)
    }

    /// `[n×s×d] → [n×d]`, summing over the middle axis.
    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(dim_err("sum_axis1", &s, &[]));
        }
        let (n, m, d) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..m {
                let base = (i * m + j) * d;
                for (ov, v) in o.iter_mut().zip(&src[base..base + d]) {
                    *ov += v;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::SumAxis1(a), rg))
    }

    pub fn mean_axis1(&mut self, a: Var) -> Result<Var> {
        let m = *self
            .shape(a)
            .get(1)
            .ok_or_else(|| dim_err("mean_axis1", self.shape(a), &[]))?;
        let s = self.sum_axis1(a)?;
        Ok(self.scale(s, 1.0 / m as f64))
    }

    /// `[n×d] → [n×s×d]`, repeating along a new middle axis.
    pub fn broadcast_axis1(&mut self, a: Var, s: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 || s == 0 {
            return Err(dim_err("broadcast_axis1", &sh, &[s]));
        }
        let (n, d) = (sh[0], sh[1]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * s * d);
        for i in 0..n {
            for _ in 0..s {
                out.extend_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![n, s, d], out),
            Op::BroadcastAxis1(a),
            rg,
        ))
    }

    /// Concatenates along the last axis; leading axes must match.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err("concat_last", &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.value(a).len() / p;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&da[r * p..(r + 1) * p]);
            out.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = p + q;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatLast(a, b), rg))
    }

    /// `[n×s×d] → [(n·h)×s×(d/h)]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 3 || heads == 0 || sh[2] % heads != 0 {
            return Err(dim_err("split_heads", &sh, &[heads]));
        }
        let (n, s, d) = (sh[0], sh[1], sh[2]);
        let dh = d / heads;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for t in 0..s {
                for h in 0..heads {
                    let from = (b * s + t) * d + h * dh;
                    let to = ((b * heads + h) * s + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![n * heads, s, dh], out),
            Op::SplitHeads(a, heads),
            rg,
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 3 || heads == 0 || sh[0] % heads != 0 {
            return Err(dim_err("merge_heads", &sh, &[heads]));
        }
        let (n, s, dh) = (sh[0] / heads, sh[1], sh[2]);
        let d = dh * heads;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for t in 0..s {
                for h in 0..heads {
                    let to = (b * s + t) * d + h * dh;
                    let from = ((b * heads + h) * s + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![n, s, d], out),
            Op::MergeHeads(a, heads),
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    fn check_targets(&self, op: &'static str, logits: Var, targets: &[usize]) -> Result<(usize, usize)> {
        let sh = self.shape(logits);
        if sh.len() != 2 || sh[0] != targets.len() {
            return Err(dim_err(op, sh, &[targets.len()]));
        }
        let (n, c) = (sh[0], sh[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NcvError::Index {
                context: op,
                index: bad,
                bound: c,
            });
        }
        Ok((n, c))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.check_targets("cross_entropy", logits, targets)?;
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                s += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= s;
            }
            total += -(row[targets[i]] - max - s.ln());
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over the batch of `-log(p_target + p_reject)`, with the
    /// probability mass floored at [`PROB_FLOOR`].
    pub fn safe_mass_nll(&mut self, logits: Var, targets: &[usize], reject: usize) -> Result<Var> {
        let (n, c) = self.check_targets("safe_mass_nll", logits, targets)?;
        if reject >= c {
            return Err(NcvError::Index {
                context: "safe_mass_nll",
                index: reject,
                bound: c,
            });
        }
        let z = self.value(logits).data();
        let log_floor = PROB_FLOOR.ln();
        let mut row_grads = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let y = targets[i];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let safe = if y == reject {
                (row[y] - max).exp()
            } else {
                (row[y] - max).exp() + (row[reject] - max).exp()
            };
            let log_q = safe.ln() - denom.ln();
            if log_q < log_floor {
                total += -log_floor;
                continue;
            }
            total += -log_q;
            let q = log_q.exp();
            for j in 0..c {
                let p = (row[j] - max).exp() / denom;
                let in_safe = j == y || j == reject;
                row_grads[i * c + j] = if in_safe { p - p / q } else { p };
            }
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::SafeMassNll {
                logits,
                targets: targets.to_vec(),
                row_grads,
            },
            rg,
        ))
    }

    /// Hard unit selection with a straight-through gradient path.
    ///
    /// Forward: `input ⊙ hard`, where `hard[row, unit]` is expanded to every
    /// feature of that unit. Backward into `scores` treats the mask as
    /// `sigmoid(scores)`.
    pub fn straight_through(
        &mut self,
        scores: Var,
        input: Var,
        unit_of_feature: Arc<[usize]>,
        hard_units: &[bool],
    ) -> Result<Var> {
        let (ss, si) = (self.shape(scores).to_vec(), self.shape(input).to_vec());
        if ss.len() != 2 || si.is_empty() || ss[0] != si[0] {
            return Err(dim_err("straight_through", &ss, &si));
        }
        let (n, units) = (ss[0], ss[1]);
        let feats = self.value(input).len() / n;
        if unit_of_feature.len() != feats || hard_units.len() != n * units {
            return Err(dim_err("straight_through", &ss, &si));
        }
        if let Some(&bad) = unit_of_feature.iter().find(|&&u| u >= units) {
            return Err(NcvError::Index {
                context: "straight_through",
                index: bad,
                bound: units,
            });
        }
        let x = self.value(input).data();
        let mut hard = vec![0.0; n * feats];
        let mut out = vec![0.0; n * feats];
        for i in 0..n {
            for (f, &u) in unit_of_feature.iter().enumerate() {
                if hard_units[i * units + u] {
                    hard[i * feats + f] = 1.0;
                    out[i * feats + f] = x[i * feats + f];
                }
            }
        }
        let rg = self.any_grad(&[scores, input]);
        Ok(self.push(
            Tensor::from_parts(si, out),
            Op::StraightThrough {
                scores,
                input,
                unit_of_feature,
                hard,
            },
            rg,
        ))
    }

    /// Reverse pass from a one-element root. Gradients accumulate into
    /// existing slots; call [`Tape::zero_grad`] between passes.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(NcvError::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        {
            let g = self.grads[root.0].get_or_insert_with(|| vec![0.0]);
            g[0] += 1.0;
        }
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(out_grad) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &out_grad);
            self.grads[i] = Some(out_grad);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let Tape { nodes, grads } = self;
        let nodes: &Vec<Node> = nodes;
        let node = &nodes[i];
        let out = node.value.data();

        // Accumulate into the gradient slot of `v`, if it wants one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let len = nodes[v.0].value.len();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(slot);
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (n, k, p) = (sa[0], sa[1], sb[1]);
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| gemm_nt_acc(g, db, ga, n, p, k));
                acc(*b, &mut |gb| gemm_tn_acc(da, g, gb, n, k, p));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (bs, n, k, p) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for t in 0..bs {
                        gemm_nt_acc(
                            &g[t * n * p..(t + 1) * n * p],
                            &db[t * k * p..(t + 1) * k * p],
                            &mut ga[t * n * k..(t + 1) * n * k],
                            n,
                            p,
                            k,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for t in 0..bs {
                        gemm_tn_acc(
                            &da[t * n * k..(t + 1) * n * k],
                            &g[t * n * p..(t + 1) * n * p],
                            &mut gb[t * k * p..(t + 1) * k * p],
                            n,
                            k,
                            p,
                        );
                    }
                });
            }
            Op::TransposeLast2(a) => {
                let s = nodes[a.0].value.shape();
                let (bs, n, k) = if s.len() == 2 {
                    (1, s[0], s[1])
                } else {
                    (s[0], s[1], s[2])
                };
                acc(*a, &mut |ga| {
                    for b in 0..bs {
                        let base = b * n * k;
                        for r in 0..n {
                            for c in 0..k {
                                ga[base + r * k + c] += g[base + c * n + r];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, &mut |gv| reduce_broadcast(gv, g, |_| 1.0));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    reduce_broadcast(ga, g, |j| if db.len() == 1 { db[0] } else { db[j] })
                });
                acc(*b, &mut |gb| {
                    reduce_broadcast(gb, g, |j| if da.len() == 1 { da[0] } else { da[j] })
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (x, gv) in ga.iter_mut().zip(g) {
                    *x += c * gv;
                }
            }),
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    let p = gb.len();
                    for row in g.chunks(p) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Relu(a) => {
                let src = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for ((x, gv), s) in ga.iter_mut().zip(g).zip(src) {
                        if *s > 0.0 {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let src = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for ((x, gv), &s) in ga.iter_mut().zip(g).zip(src) {
                        let t = (GELU_C * (s + GELU_A * s * s * s)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * s * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * s * s);
                        *x += gv * d;
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((x, gv), y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gv * y * (1.0 - y);
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let d = nodes[gamma.0].value.len();
                let gm = nodes[gamma.0].value.data();
                acc(*x, &mut |gx| {
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let nr = &normed[r * d..(r + 1) * d];
                        let mut sum_dn = 0.0;
                        let mut sum_dn_n = 0.0;
                        for j in 0..d {
                            let dn = gr[j] * gm[j];
                            sum_dn += dn;
                            sum_dn_n += dn * nr[j];
                        }
                        for j in 0..d {
                            let dn = gr[j] * gm[j];
                            gx[r * d + j] +=
                                inv / d as f64 * (d as f64 * dn - sum_dn - nr[j] * sum_dn_n);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (row_g, row_n) in g.chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_n[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for row_g in g.chunks(d) {
                        add_into(gb, row_g);
                    }
                });
            }
            Op::SoftmaxLast(a) => {
                let (_, d) = node.value.rows_cols();
                acc(*a, &mut |ga| {
                    for ((gar, gr), yr) in ga.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..d {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SumAxis1(a) => {
                let s = nodes[a.0].value.shape();
                let (n, m, d) = (s[0], s[1], s[2]);
                acc(*a, &mut |ga| {
                    for b in 0..n {
                        for j in 0..m {
                            let base = (b * m + j) * d;
                            add_into(&mut ga[base..base + d], &g[b * d..(b + 1) * d]);
                        }
                    }
                });
            }
            Op::BroadcastAxis1(a) => {
                let s = node.value.shape();
                let (n, m, d) = (s[0], s[1], s[2]);
                acc(*a, &mut |ga| {
                    for b in 0..n {
                        for j in 0..m {
                            let base = (b * m + j) * d;
                            add_into(&mut ga[b * d..(b + 1) * d], &g[base..base + d]);
                        }
                    }
                });
            }
            Op::ConcatLast(a, b) => {
                let p = *nodes[a.0].value.shape().last().unwrap();
                let q = *nodes[b.0].value.shape().last().unwrap();
                acc(*a, &mut |ga| {
                    for (r, gr) in g.chunks(p + q).enumerate() {
                        add_into(&mut ga[r * p..(r + 1) * p], &gr[..p]);
                    }
                });
                acc(*b, &mut |gb| {
                    for (r, gr) in g.chunks(p + q).enumerate() {
                        add_into(&mut gb[r * q..(r + 1) * q], &gr[p..]);
                    }
                });
            }
            Op::SplitHeads(a, heads) => {
                let s = nodes[a.0].value.shape();
                let (n, sl, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                acc(*a, &mut |ga| {
                    for b in 0..n {
                        for t in 0..sl {
                            for h in 0..*heads {
                                let from = (b * sl + t) * d + h * dh;
                                let to = ((b * heads + h) * sl + t) * dh;
                                add_into(&mut ga[from..from + dh], &g[to..to + dh]);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads(a, heads) => {
                let s = node.value.shape();
                let (n, sl, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                acc(*a, &mut |ga| {
                    for b in 0..n {
                        for t in 0..sl {
                            for h in 0..*heads {
                                let to = (b * sl + t) * d + h * dh;
                                let from = ((b * heads + h) * sl + t) * dh;
                                add_into(&mut ga[from..from + dh], &g[to..to + dh]);
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::MeanAll(a) => acc(*a, &mut |ga| {
                let s = g[0] / ga.len() as f64;
                for x in ga.iter_mut() {
                    *x += s;
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let c = probs.len() / n;
                let s = g[0] / n as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::SafeMassNll {
                logits,
                targets,
                row_grads,
                ..
            } => {
                let s = g[0] / targets.len() as f64;
                acc(*logits, &mut |gl| {
                    for (x, rg) in gl.iter_mut().zip(row_grads) {
                        *x += s * rg;
                    }
                });
            }
            Op::StraightThrough {
                scores,
                input,
                unit_of_feature,
                hard,
            } => {
                let feats = unit_of_feature.len();
                let units = nodes[scores.0].value.shape()[1];
                let sc = nodes[scores.0].value.data();
                let x = nodes[input.0].value.data();
                acc(*input, &mut |gi| {
                    for ((v, gv), h) in gi.iter_mut().zip(g).zip(hard) {
                        *v += gv * h;
                    }
                });
                acc(*scores, &mut |gs| {
                    for (r, (gr, xr)) in g.chunks(feats).zip(x.chunks(feats)).enumerate() {
                        for (f, &u) in unit_of_feature.iter().enumerate() {
                            let s = sigmoid(sc[r * units + u]);
                            gs[r * units + u] += gr[f] * xr[f] * s * (1.0 - s);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Accumulates `g ⊙ factor` into `dst`, summing when `dst` is a broadcast scalar.
fn reduce_broadcast(dst: &mut [f64], g: &[f64], factor: impl Fn(usize) -> f64) {
    if dst.len() == g.len() {
        for (j, (d, gv)) in dst.iter_mut().zip(g).enumerate() {
            *d += gv * factor(j);
        }
    } else {
        let s: f64 = g.iter().enumerate().map(|(j, gv)| gv * factor(j)).sum();
        dst[0] += s;
    }
}
