//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! A [`Tape`] is built fresh for every forward pass and dropped after the
//! optimizer step. Gradients accumulate additively where a value fans out.

use super::attention::{self, AttnSegment, SegmentProbs};
use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        probs: Vec<SegmentProbs>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        positions: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one gradient slot per recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros shaped like it when unreachable.
    pub fn get_or_zeros(&self, tape: &Tape, var: Var) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(var).len()])
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

fn add_owned(acc: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (a parameter or a value under gradient check).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", ta)?;
        let (k2, n) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let c = kernels::matmul(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul_bt", ta)?;
        let (n, k2) = matrix_dims("matmul_bt", tb)?;
        if k != k2 {
            return Err(dim_err("matmul_bt", ta, tb));
        }
        let c = kernels::matmul_bt(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = matrix_dims("transpose", ta)?;
        let t = kernels::transpose(ta.data(), m, n);
        Ok(self.push(Tensor::new(vec![n, m], t)?, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let c: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        Ok(self.push(Tensor::new(ta.shape().to_vec(), c)?, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `[m x n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        let (_, n) = matrix_dims("add_row", ta)?;
        if tb.len() != n {
            return Err(dim_err("add_row", ta, tb));
        }
        let mut c = ta.data().to_vec();
        for r in c.chunks_mut(n) {
            r.iter_mut().zip(tb.data()).for_each(|(x, y)| *x += y);
        }
        Ok(self.push(Tensor::new(ta.shape().to_vec(), c)?, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let c: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        Ok(self.push(Tensor::new(ta.shape().to_vec(), c)?, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.len() != 1 {
            return Err(dim_err("mul_scalar", ta, ts));
        }
        let k = ts.item();
        let c: Vec<f64> = ta.data().iter().map(|x| x * k).collect();
        Ok(self.push(Tensor::new(ta.shape().to_vec(), c)?, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let c: Vec<f64> = ta.data().iter().map(|x| x * k).collect();
        let t = Tensor::new(ta.shape().to_vec(), c).expect("same shape");
        self.push(t, Op::Scale(a, k), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c: Vec<f64> = ta.data().iter().map(|x| x.exp()).collect();
        let t = Tensor::new(ta.shape().to_vec(), c).expect("same shape");
        self.push(t, Op::Exp(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c: Vec<f64> = ta
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), c).expect("same shape");
        self.push(t, Op::Gelu(a), &[a])
    }

    /// Normalizes each last-axis vector, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *tx.shape().last().unwrap_or(&0);
        if tg.len() != d || tb.len() != d {
            return Err(dim_err("layer_norm", tx, tg));
        }
        let rows = tx.len() / d.max(1);
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                y[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), y)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let y = kernels::softmax_lanes(tx.data(), outer, len, inner);
        let t = Tensor::new(shape.to_vec(), y)?;
        Ok(self.push(t, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Selects rows of a matrix (embedding lookup when `x` is a table).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims("gather_rows", tx)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range for {m} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&tx.data()[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![idx.len(), n], out)?;
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (_, n) = matrix_dims("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            let (m, n2) = matrix_dims("concat_rows", tp)?;
            if n2 != n {
                return Err(dim_err("concat_rows", self.value(*first), tp));
            }
            rows += m;
            out.extend_from_slice(tp.data());
        }
        let t = Tensor::new(vec![rows, n], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are row-stacked
    /// `[rows x width]`; each segment attends only within itself under its mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: Vec<AttnSegment>) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = matrix_dims("attention", tq)?;
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(dim_err("attention", tq, tk));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        if let Some(seg) = segments.iter().find(|s| s.start + s.len() > rows) {
            return Err(Error::InvalidArgument(format!(
                "segment {}..{} beyond {rows} rows",
                seg.start,
                seg.start + seg.len()
            )));
        }
        let (out, probs) = attention::forward(tq.data(), tk.data(), tv.data(), width, heads, &segments, rows);
        let t = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean of `-log softmax(logits[p])[targets[p]]` over `positions`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], positions: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (t, v) = matrix_dims("cross_entropy", tl)?;
        if positions.is_empty() {
            return Err(Error::EmptyPositions);
        }
        if targets.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= t) {
            return Err(Error::InvalidArgument(format!("position {p} >= {t}")));
        }
        if let Some(&bad) = positions.iter().map(|&p| &targets[p]).find(|&&id| id >= v) {
            return Err(Error::InvalidArgument(format!("target {bad} >= vocab {v}")));
        }
        let mut probs = Vec::with_capacity(positions.len() * v);
        let mut total = 0.0;
        for &p in positions {
            let row = tl.row(p);
            let lse = kernels::log_sum_exp(row);
            total += lse - row[targets[p]];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let loss = total / positions.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                positions: positions.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims("l2_normalize_rows", tx)?;
        let mut norms = Vec::with_capacity(m);
        let mut y = tx.data().to_vec();
        for r in y.chunks_mut(n) {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm = if norm > 0.0 { norm } else { 1.0 };
            r.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let t = Tensor::new(vec![m, n], y)?;
        Ok(self.push(t, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Populates gradients of the scalar `loss` with respect to every
    /// differentiable value it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let tl = self.value(loss);
        if tl.len() != 1 {
            return Err(Error::NonScalarLoss(tl.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().1;
                if self.wants(*a) {
                    let ga = kernels::matmul_bt(g, val(*b).data(), m, n, k);
                    add_owned(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let gb = kernels::matmul_at(val(*a).data(), g, m, k, n);
                    add_owned(&mut grads[b.0], gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().0;
                if self.wants(*a) {
                    let ga = kernels::matmul(g, val(*b).data(), m, n, k);
                    add_owned(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let gb = kernels::matmul_at(g, val(*a).data(), m, n, k);
                    add_owned(&mut grads[b.0], gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).dims2();
                add_owned(&mut grads[a.0], kernels::transpose(g, n, m));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*row) {
                    let n = val(*row).len();
                    let mut gr = vec![0.0; n];
                    for r in g.chunks(n) {
                        gr.iter_mut().zip(r).for_each(|(x, y)| *x += y);
                    }
                    add_owned(&mut grads[row.0], gr);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    add_owned(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let gb = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    add_owned(&mut grads[b.0], gb);
                }
            }
            Op::MulScalar(a, s) => {
                let k = val(*s).item();
                if self.wants(*a) {
                    add_owned(&mut grads[a.0], g.iter().map(|x| x * k).collect());
                }
                if self.wants(*s) {
                    let gs = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    add_owned(&mut grads[s.0], vec![gs]);
                }
            }
            Op::Scale(a, k) => add_owned(&mut grads[a.0], g.iter().map(|x| x * k).collect()),
            Op::Exp(a) => {
                let ga = g.iter().zip(node.value.data()).map(|(x, y)| x * y).collect();
                add_owned(&mut grads[a.0], ga);
            }
            Op::Gelu(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gy, &x)| {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                add_owned(&mut grads[a.0], ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain).data();
                let d = gv.len();
                if self.wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            let dxh = gy[c] * gv[c];
                            mean_d += dxh;
                            mean_dx += dxh * xh[c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for c in 0..d {
                            let dxh = gy[c] * gv[c];
                            gx[r * d + c] = is * (dxh - mean_d - xh[c] * mean_dx);
                        }
                    }
                    add_owned(&mut grads[x.0], gx);
                }
                if self.wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gy[c] * xh[c];
                        }
                    }
                    add_owned(&mut grads[gain.0], gg);
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; d];
                    for gy in g.chunks(d) {
                        gb.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                    }
                    add_owned(&mut grads[bias.0], gb);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..*len).map(|a| g[base + a * inner] * y[base + a * inner]).sum();
                        for a in 0..*len {
                            let p = base + a * inner;
                            gx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                add_owned(&mut grads[x.0], gx);
            }
            Op::GatherRows { x, idx } => {
                let (m, n) = val(*x).dims2();
                let mut gx = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    gx[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(a, b)| *a += b);
                }
                add_owned(&mut grads[x.0], gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let width = val(*q).dims2().1;
                let (gq, gk, gv) = attention::backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    g,
                    width,
                    *heads,
                    segments,
                    probs,
                );
                for (var, gr) in [(q, gq), (k, gk), (v, gv)] {
                    if self.wants(*var) {
                        add_owned(&mut grads[var.0], gr);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                positions,
                probs,
            } => {
                let (t, v) = val(*logits).dims2();
                let scale = g[0] / positions.len() as f64;
                let mut gl = vec![0.0; t * v];
                for (j, &p) in positions.iter().enumerate() {
                    let row = &mut gl[p * v..(p + 1) * v];
                    for (c, pr) in probs[j * v..(j + 1) * v].iter().enumerate() {
                        row[c] += scale * pr;
                    }
                    row[targets[p]] -= scale;
                }
                add_owned(&mut grads[logits.0], gl);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                add_owned(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let n = y.len() / norms.len().max(1);
                let mut gx = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let d: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        gx[r * n + c] = (gr[c] - yr[c] * d) / norm;
                    }
                }
                add_owned(&mut grads[x.0], gx);
            }
        }
    }
}
