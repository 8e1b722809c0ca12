//! Eager reverse-mode tape over row-major matrices.
//!
//! Every op evaluates immediately and records how to send gradients back to
//! its inputs. Constants never receive gradients, so anything built only
//! from constants (frozen weights, pooled views, stop-gradient teachers)
//! is skipped during the backward sweep.

use super::ops::{gelu, gelu_grad, LAYERNORM_EPS};
use super::Tensor;
use crate::error::{Result, SecaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Exp(usize),
    LayerNormRows(usize, Vec<f64>),
    NormalizeRows(usize, Vec<f64>),
    SoftmaxRows(usize, f64),
    Nll(usize, Vec<usize>),
    CrossEntropyLogits(usize, Tensor, Vec<usize>),
    Kl(Tensor, usize, f64),
    PairwiseSqDist(usize),
    RowNormalize(usize, Vec<f64>),
    GatherRows(usize, Vec<usize>),
    MeanRows(usize),
    ScaleRows(usize, usize),
    RowDot(usize, usize),
    Col(usize, usize),
    ConcatCols(Vec<usize>),
    SumSq(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when no path reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// `None` when no gradient path reached `v` at all.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> SecaError {
    SecaError::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(SecaError::NonFinite(format!("{op:?}").chars().take(40).collect()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.scalar()
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let out = va.matmul(vb);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::MatMul(a.0, b.0), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.cols() {
            return Err(shape_err("matmul_nt", va.shape(), vb.shape()));
        }
        let out = va.matmul_nt(vb);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::MatMulNt(a.0, b.0), rg)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rows() != vb.rows() || va.cols() != vb.cols() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::Mul(a.0, b.0), rg)
    }

    /// Adds the single row `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        if vr.len() != vx.cols() {
            return Err(shape_err("add_row", vx.shape(), vr.shape()));
        }
        let out = vx.add_row(vr);
        let rg = self.rg(x.0) || self.rg(row.0);
        self.push(out, Op::AddRow(x.0, row.0), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.nodes[x.0].value.map(|v| v * s);
        let rg = self.rg(x.0);
        self.push(out, Op::Scale(x.0, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.map(gelu);
        let rg = self.rg(x.0);
        self.push(out, Op::Gelu(x.0), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.map(f64::exp);
        let rg = self.rg(x.0);
        self.push(out, Op::Exp(x.0), rg)
    }

    /// Parameter-free layer normalization of every row.
    pub fn layernorm_rows(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let c = vx.cols();
        if c < 2 {
            return Err(SecaError::InvalidInput(format!(
                "layernorm needs at least 2 entries, got {c}"
            )));
        }
        let mut out = vx.clone();
        let mut inv = Vec::with_capacity(vx.rows());
        for i in 0..vx.rows() {
            let row = out.row_mut(i);
            let n = c as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + LAYERNORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv.push(s);
        }
        let rg = self.rg(x.0);
        self.push(out, Op::LayerNormRows(x.0, inv), rg)
    }

    /// L2-normalizes every row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows());
        for i in 0..vx.rows() {
            let n = super::norm(vx.row(i));
            if n == 0.0 {
                return Err(SecaError::InvalidInput(format!(
                    "row {i} has zero norm"
                )));
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x.0);
        self.push(out, Op::NormalizeRows(x.0, norms), rg)
    }

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(SecaError::InvalidConfig(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let vx = &self.nodes[x.0].value;
        let mut out = vx.clone();
        for i in 0..vx.rows() {
            let p = super::ops::softmax_unchecked(vx.row(i), tau);
            out.row_mut(i).copy_from_slice(&p);
        }
        let rg = self.rg(x.0);
        self.push(out, Op::SoftmaxRows(x.0, tau), rg)
    }

    /// Mean over rows of `-ln(p[i, labels[i]] + 1e-12)`; a `[1, 1]` scalar.
    pub fn nll(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let vp = &self.nodes[p.0].value;
        if labels.len() != vp.rows() {
            return Err(SecaError::ShapeMismatch(format!(
                "nll: {} labels for {} rows",
                labels.len(),
                vp.rows()
            )));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= vp.cols() {
                return Err(SecaError::IndexOutOfRange {
                    index: y,
                    len: vp.cols(),
                });
            }
            total -= (vp.get(i, y) + super::ops::LOG_CLAMP).ln();
        }
        let out = Tensor::filled(&[1, 1], total / labels.len().max(1) as f64);
        let rg = self.rg(p.0);
        self.push(out, Op::Nll(p.0, labels.to_vec()), rg)
    }

    /// Mean over rows of `logsumexp(z_i) − z_i[labels[i]]`; a `[1, 1]` scalar.
    /// Fused so the gradient `softmax(z) − onehot` survives saturated rows
    /// whose target probability underflows.
    pub fn cross_entropy_logits(&mut self, z: Var, labels: &[usize]) -> Result<Var> {
        let vz = &self.nodes[z.0].value;
        if labels.len() != vz.rows() {
            return Err(SecaError::ShapeMismatch(format!(
                "cross_entropy_logits: {} labels for {} rows",
                labels.len(),
                vz.rows()
            )));
        }
        let mut probs = vz.clone();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = vz.row(i);
            if y >= row.len() {
                return Err(SecaError::IndexOutOfRange {
                    index: y,
                    len: row.len(),
                });
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
            for (o, v) in probs.row_mut(i).iter_mut().zip(row) {
                *o = (v - lse).exp();
            }
        }
        let out = Tensor::filled(&[1, 1], total / labels.len().max(1) as f64);
        let rg = self.rg(z.0);
        self.push(out, Op::CrossEntropyLogits(z.0, probs, labels.to_vec()), rg)
    }

    /// Mean over rows of `Σ_j t log(t / (s + eps))`. The teacher is a plain
    /// tensor, so no gradient can reach whatever produced it.
    pub fn kl_rows(&mut self, teacher: &Tensor, student: Var, eps: f64) -> Result<Var> {
        let vs = &self.nodes[student.0].value;
        if teacher.rows() != vs.rows() || teacher.cols() != vs.cols() {
            return Err(shape_err("kl_rows", teacher.shape(), vs.shape()));
        }
        let mut total = 0.0;
        for (t, s) in teacher.data().iter().zip(vs.data()) {
            if *t > 0.0 {
                total += t * (t / (s + eps)).ln();
            }
        }
        let out = Tensor::filled(&[1, 1], total / vs.rows().max(1) as f64);
        let rg = self.rg(student.0);
        self.push(out, Op::Kl(teacher.clone(), student.0, eps), rg)
    }

    /// `D[k, j] = ‖q_k − q_j‖²` over the rows of `q`.
    pub fn pairwise_sqdist(&mut self, q: Var) -> Result<Var> {
        let vq = &self.nodes[q.0].value;
        let k = vq.rows();
        let mut out = Tensor::zeros(&[k, k]);
        for i in 0..k {
            for j in (i + 1)..k {
                let d: f64 = vq
                    .row(i)
                    .iter()
                    .zip(vq.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                out.set(i, j, d);
                out.set(j, i, d);
            }
        }
        let rg = self.rg(q.0);
        self.push(out, Op::PairwiseSqDist(q.0), rg)
    }

    /// Divides every row by its sum.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let mut out = vx.clone();
        let mut sums = Vec::with_capacity(vx.rows());
        for i in 0..vx.rows() {
            let s: f64 = vx.row(i).iter().sum();
            if s == 0.0 {
                return Err(SecaError::InvalidInput(format!("row {i} sums to zero")));
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= s);
            sums.push(s);
        }
        let rg = self.rg(x.0);
        self.push(out, Op::RowNormalize(x.0, sums), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.rows()) {
            return Err(SecaError::IndexOutOfRange {
                index: bad,
                len: vx.rows(),
            });
        }
        let out = vx.select_rows(idx);
        let rg = self.rg(x.0);
        self.push(out, Op::GatherRows(x.0, idx.to_vec()), rg)
    }

    /// Column-wise mean; `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (n, d) = (vx.rows(), vx.cols());
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(vx.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let rg = self.rg(x.0);
        self.push(Tensor::matrix(1, d, out)?, Op::MeanRows(x.0), rg)
    }

    /// Multiplies row `i` of `x` by `c[i]` where `c` is `[n, 1]`.
    pub fn scale_rows(&mut self, x: Var, c: Var) -> Result<Var> {
        let (vx, vc) = (&self.nodes[x.0].value, &self.nodes[c.0].value);
        if vc.len() != vx.rows() {
            return Err(shape_err("scale_rows", vx.shape(), vc.shape()));
        }
        let mut out = vx.clone();
        for i in 0..vx.rows() {
            let s = vc.data()[i];
            out.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(x.0) || self.rg(c.0);
        self.push(out, Op::ScaleRows(x.0, c.0), rg)
    }

    /// Per-row inner products; `[n, d] x [n, d] -> [n, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out: Vec<f64> = (0..va.rows())
            .map(|i| super::dot(va.row(i), vb.row(i)))
            .collect();
        let n = out.len();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Tensor::matrix(n, 1, out)?, Op::RowDot(a.0, b.0), rg)
    }

    /// Column `j` as an `[n, 1]` matrix.
    pub fn col(&mut self, x: Var, j: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if j >= vx.cols() {
            return Err(SecaError::IndexOutOfRange {
                index: j,
                len: vx.cols(),
            });
        }
        let out: Vec<f64> = (0..vx.rows()).map(|i| vx.get(i, j)).collect();
        let n = out.len();
        let rg = self.rg(x.0);
        self.push(Tensor::matrix(n, 1, out)?, Op::Col(x.0, j), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| SecaError::InvalidInput("concat of nothing".into()))?;
        let n = self.nodes[first.0].value.rows();
        let mut total = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != n {
                return Err(shape_err("concat_cols", &[n], v.shape()));
            }
            total += v.cols();
        }
        let mut out = Tensor::zeros(&[n, total]);
        let mut off = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            let c = v.cols();
            for i in 0..n {
                out.row_mut(i)[off..off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg)
    }

    /// `Σ x²` as a `[1, 1]` scalar.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].value.data().iter().map(|v| v * v).sum();
        let rg = self.rg(x.0);
        self.push(Tensor::filled(&[1, 1], s), Op::SumSq(x.0), rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[out.0].value.len() != 1 {
            return Err(SecaError::InvalidInput(
                "backward needs a scalar output".into(),
            ));
        }
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(Tensor::filled(self.nodes[out.0].value.shape(), 1.0));
        }
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: usize, g: Tensor) {
        if !self.nodes[to].requires_grad {
            return;
        }
        match &mut grads[to] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_nt(val(*b)).reshape(val(*a).shape().to_vec()).unwrap();
                    self.send(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = val(*a).matmul_tn(g).reshape(val(*b).shape().to_vec()).unwrap();
                    self.send(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul(val(*b)).reshape(val(*a).shape().to_vec()).unwrap();
                    self.send(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.matmul_tn(val(*a)).reshape(val(*b).shape().to_vec()).unwrap();
                    self.send(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, reshaped(g, val(*a)));
                self.send(grads, *b, reshaped(g, val(*b)));
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, reshaped(g, val(*a)));
                self.send(grads, *b, reshaped(&g.map(|v| -v), val(*b)));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.send(grads, *a, reshaped(&g.zip_map(val(*b), |x, y| x * y), val(*a)));
                }
                if self.rg(*b) {
                    self.send(grads, *b, reshaped(&g.zip_map(val(*a), |x, y| x * y), val(*b)));
                }
            }
            Op::AddRow(x, r) => {
                self.send(grads, *x, reshaped(g, val(*x)));
                if self.rg(*r) {
                    let c = g.cols();
                    let mut acc = vec![0.0; c];
                    for i in 0..g.rows() {
                        for (a, v) in acc.iter_mut().zip(g.row(i)) {
                            *a += v;
                        }
                    }
                    let gr = Tensor::new(val(*r).shape().to_vec(), acc).unwrap();
                    self.send(grads, *r, gr);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.send(grads, *x, g.map(|v| v * s));
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(val(*x), |gv, xv| gv * gelu_grad(xv));
                self.send(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * y);
                self.send(grads, *x, gx);
            }
            Op::LayerNormRows(x, inv) => {
                let y = &node.value;
                let c = y.cols();
                let n = c as f64;
                let mut gx = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = super::dot(gr, yr) / n;
                    let out = gx.row_mut(i);
                    for j in 0..c {
                        out[j] = inv[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::NormalizeRows(x, norms) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let yg = super::dot(yr, gr);
                    let out = gx.row_mut(i);
                    for j in 0..yr.len() {
                        out[j] = (gr[j] - yr[j] * yg) / norms[i];
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::SoftmaxRows(x, tau) => {
                let p = &node.value;
                let mut gx = Tensor::zeros(p.shape());
                for i in 0..p.rows() {
                    let (pr, gr) = (p.row(i), g.row(i));
                    let s = super::dot(pr, gr);
                    let out = gx.row_mut(i);
                    for j in 0..pr.len() {
                        out[j] = pr[j] * (gr[j] - s) / tau;
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::Nll(p, labels) => {
                let vp = val(*p);
                let scale = g.scalar() / labels.len().max(1) as f64;
                let mut gp = Tensor::zeros(vp.shape());
                for (i, &y) in labels.iter().enumerate() {
                    gp.set(i, y, -scale / (vp.get(i, y) + super::ops::LOG_CLAMP));
                }
                self.send(grads, *p, gp);
            }
            Op::CrossEntropyLogits(z, probs, labels) => {
                let scale = g.scalar() / labels.len().max(1) as f64;
                let mut gz = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let r = gz.row_mut(i);
                    r[y] -= 1.0;
                    for v in r.iter_mut() {
                        *v *= scale;
                    }
                }
                self.send(grads, *z, gz);
            }
            Op::Kl(t, s, eps) => {
                let vs = val(*s);
                let scale = g.scalar() / vs.rows().max(1) as f64;
                let gs = t.zip_map(vs, |tv, sv| -scale * tv / (sv + eps));
                self.send(grads, *s, reshaped(&gs, vs));
            }
            Op::PairwiseSqDist(q) => {
                let vq = val(*q);
                let (k, d) = (vq.rows(), vq.cols());
                let mut gq = Tensor::zeros(vq.shape());
                for i in 0..k {
                    for j in 0..k {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g.get(i, j) + g.get(j, i));
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let diff = vq.get(i, c) - vq.get(j, c);
                            gq.data_mut()[i * d + c] += w * diff;
                        }
                    }
                }
                self.send(grads, *q, gq);
            }
            Op::RowNormalize(x, sums) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = super::dot(yr, gr);
                    let out = gx.row_mut(i);
                    for j in 0..yr.len() {
                        out[j] = (gr[j] - s) / sums[i];
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::GatherRows(x, idx) => {
                let vx = val(*x);
                let mut gx = Tensor::zeros(vx.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let vx = val(*x);
                let n = vx.rows() as f64;
                let mut gx = Tensor::zeros(vx.shape());
                for i in 0..vx.rows() {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.data()) {
                        *o = v / n;
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::ScaleRows(x, c) => {
                let (vx, vc) = (val(*x), val(*c));
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for i in 0..vx.rows() {
                        let s = vc.data()[i];
                        gx.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                    self.send(grads, *x, reshaped(&gx, vx));
                }
                if self.rg(*c) {
                    let gc: Vec<f64> = (0..vx.rows())
                        .map(|i| super::dot(g.row(i), vx.row(i)))
                        .collect();
                    self.send(grads, *c, Tensor::new(vc.shape().to_vec(), gc).unwrap());
                }
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.rg(*a) {
                    let mut ga = vb.clone();
                    for i in 0..va.rows() {
                        let s = g.data()[i];
                        ga.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                    self.send(grads, *a, reshaped(&ga, va));
                }
                if self.rg(*b) {
                    let mut gb = va.clone();
                    for i in 0..va.rows() {
                        let s = g.data()[i];
                        gb.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                    self.send(grads, *b, reshaped(&gb, vb));
                }
            }
            Op::Col(x, j) => {
                let vx = val(*x);
                let mut gx = Tensor::zeros(vx.shape());
                for i in 0..vx.rows() {
                    gx.set(i, *j, g.data()[i]);
                }
                self.send(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let vp = val(p);
                    let c = vp.cols();
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(vp.shape());
                        for i in 0..vp.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        self.send(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::SumSq(x) => {
                let s = 2.0 * g.scalar();
                self.send(grads, *x, val(*x).map(|v| v * s));
            }
        }
    }
}

fn reshaped(g: &Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        g.clone()
    } else {
        g.clone().reshape(like.shape().to_vec()).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fused_cross_entropy_keeps_gradient_when_saturated() {
        // target probability is e^-100, far below any log clamp
        let mut g = Graph::new();
        let z = g.param(Tensor::matrix(1, 2, vec![0.0, 100.0]).unwrap()).unwrap();
        let l = g.cross_entropy_logits(z, &[0]).unwrap();
        assert!((g.value(l).scalar() - 100.0).abs() < 1e-9);
        let grads = g.backward(l).unwrap();
        let gz = grads.get(z).unwrap();
        assert!((gz.get(0, 0) + 1.0).abs() < 1e-12);
        assert!((gz.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let c = g.constant(Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap()).unwrap();
        let y = g.matmul(c, w).unwrap();
        let l = g.sum_sq(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let sq = g.sum_sq(x).unwrap();
        let l = g.scale(sq, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0])).unwrap();
        assert!(matches!(g.exp(x), Err(SecaError::NonFinite(_))));
    }
}
