//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op evaluates eagerly and appends a node to the tape. Nodes whose
//! inputs are all constants are marked as not needing gradients, so an
//! inference pass pays only for the forward arithmetic.
//!
//! Binary elementwise ops broadcast their right operand only: it may have
//! the same shape as the left, be a row vector matching the last axis, or
//! hold a single element.

use super::optim::ParamStore;
use super::tensor::{matmul_into, matmul_t_into, t_matmul_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    MatmulT(usize, usize),
    Transpose(usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Square(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Pick(usize, Vec<usize>),
    NormalizeRows(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<(String, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bound.clear();
    }

    /// Drops every node recorded after the first `keep`, so a prefix of
    /// bound weights can be reused across forward passes.
    pub fn truncate(&mut self, keep: usize) {
        self.nodes.truncate(keep);
        self.bound.retain(|(_, i)| *i < keep);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient but is not tied to a store.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        if store.is_trainable(name)? {
            let v = self.push(value, Op::Leaf, true);
            self.bound.push((name.to_string(), v.0));
            Ok(v)
        } else {
            Ok(self.push(value, Op::Leaf, false))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::Matmul(a.0, b.0), ng))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_t_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::MatmulT(a.0, b.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let out = transposed(self.value(a).data(), m, n);
        let ng = self.ng(a.0);
        Ok(self.push(Tensor::from_raw(vec![n, m], out), Op::Transpose(a.0), ng))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Bcast::Same)
        } else if tb.numel() == 1 {
            Ok(Bcast::Scalar)
        } else if tb.numel() == ta.cols() && tb.cols() == ta.cols() {
            Ok(Bcast::Row)
        } else {
            Err(Error::Shape {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var> {
        let kind = self.bcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let c = ta.cols();
        let out: Vec<f64> = match kind {
            Bcast::Same => ta.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => ta.data().iter().map(|&x| f(x, bd[0])).collect(),
            Bcast::Row => ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % c]))
                .collect(),
        };
        let shape = ta.shape().to_vec();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::from_raw(shape, out), mk(a.0, b.0, kind), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(a.0);
        self.push(Tensor::from_raw(shape, out), op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(a.0);
        self.push(Tensor::from_raw(shape, out), Op::Softmax(a.0), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            log_softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(a.0);
        self.push(Tensor::from_raw(shape, out), Op::LogSoftmax(a.0), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::Mean(a.0), ng)
    }

    /// Concatenates along the last axis; all inputs share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            Tensor::from_raw(vec![rows, total], out),
            Op::Concat(ids),
            ng,
        ))
    }

    /// Row lookup into a `[vocab, d]` table (embedding gather).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows: empty index"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let out = t.select_rows(idx);
        let ng = self.ng(table.0);
        Ok(self.push(out, Op::GatherRows(table.0, idx.to_vec()), ng))
    }

    /// Picks `x[i, idx[i]]` from each row, giving an `[m]` vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if idx.len() != t.rows() || idx.iter().any(|&j| j >= c) {
            return Err(Error::Shape {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let out = idx.iter().enumerate().map(|(i, &j)| t.at(i, j)).collect();
        let ng = self.ng(x.0);
        Ok(self.push(
            Tensor::from_raw(vec![idx.len()], out),
            Op::Pick(x.0, idx.to_vec()),
            ng,
        ))
    }

    /// Scales each row to unit L2 norm; a zero row is an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm("normalize_rows"));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x.0);
        Ok(self.push(Tensor::from_raw(shape, out), Op::NormalizeRows(x.0), ng))
    }

    /// Runs the backward pass from a scalar `loss`, writes gradients of every
    /// bound parameter into `store`, and clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, idx) in std::mem::take(&mut self.bound) {
            let n = self.nodes[idx].value.numel();
            let g = grads[idx].clone().unwrap_or_else(|| vec![0.0; n]);
            store.get_mut(&name)?.set_grad(g)?;
        }
        self.clear();
        Ok(())
    }

    /// Gradient of `loss` with respect to an arbitrary node, without
    /// clearing the tape. Mostly useful for checks against finite differences.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        let grads = self.gradients(loss)?;
        let t = &self.nodes[wrt.0].value;
        let g = grads[wrt.0].clone().unwrap_or_else(|| vec![0.0; t.numel()]);
        Ok(Tensor::from_raw(t.shape().to_vec(), g))
    }

    fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite(format!("loss ({})", lv.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[j].needs_grad {
                let n = self.nodes[j].value.numel();
                let slot = grads[j].get_or_insert_with(|| vec![0.0; n]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |ga| {
                    let mut tmp = vec![0.0; m * k];
                    matmul_t_into(g, tb.data(), m, n, k, &mut tmp);
                    add_assign(ga, &tmp);
                });
                acc(*b, &mut |gb| t_matmul_acc(ta.data(), g, m, k, n, gb));
            }
            Op::MatmulT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                acc(*a, &mut |ga| matmul_into(g, tb.data(), m, n, k, ga));
                acc(*b, &mut |gb| t_matmul_acc(g, ta.data(), m, n, k, gb));
            }
            Op::Transpose(a) => {
                let s = val(*a).shape();
                let (m, n) = (s[0], s[1]);
                acc(*a, &mut |ga| add_assign(ga, &transposed(g, n, m)));
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| add_assign(ga, g));
                let c = node.value.cols();
                acc(*b, &mut |gb| reduce_bcast(*kind, c, g, sign, gb));
            }
            Op::Mul(a, b, kind) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = ta.cols();
                let bd = tb.data();
                acc(*a, &mut |ga| {
                    for (idx, (o, &gv)) in ga.iter_mut().zip(g).enumerate() {
                        let bv = match kind {
                            Bcast::Same => bd[idx],
                            Bcast::Scalar => bd[0],
                            Bcast::Row => bd[idx % c],
                        };
                        *o += gv * bv;
                    }
                });
                let prod: Vec<f64> = g.iter().zip(ta.data()).map(|(gv, av)| gv * av).collect();
                acc(*b, &mut |gb| reduce_bcast(*kind, c, &prod, 1.0, gb));
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * s)
            }),
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((o, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                    *o += gv * (1.0 - yv * yv);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                    *o += gv * yv;
                }
            }),
            Op::Square(a) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((o, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += 2.0 * gv * xv;
                    }
                });
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |ga| {
                    for ((grow, yrow), orow) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                        for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |ga| {
                    for ((grow, yrow), orow) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s: f64 = grow.iter().sum();
                        for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += gv - yv.exp() * s;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |gp| {
                        for (r, orow) in gp.chunks_mut(w).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_assign(orow, src);
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows(t, idx) => {
                let c = val(*t).cols();
                acc(*t, &mut |gt| {
                    for (r, &row) in idx.iter().enumerate() {
                        add_assign(&mut gt[row * c..(row + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Pick(x, idx) => {
                let c = val(*x).cols();
                acc(*x, &mut |gx| {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * c + j] += g[r];
                    }
                });
            }
            Op::NormalizeRows(x) => {
                let c = node.value.cols();
                let xd = val(*x).data();
                acc(*x, &mut |gx| {
                    for r in 0..xd.len() / c {
                        let xr = &xd[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * yg) / norm;
                        }
                    }
                });
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn reduce_bcast(kind: Bcast, cols: usize, g: &[f64], sign: f64, out: &mut [f64]) {
    match kind {
        Bcast::Same => out.iter_mut().zip(g).for_each(|(o, gv)| *o += sign * gv),
        Bcast::Scalar => out[0] += sign * g.iter().sum::<f64>(),
        Bcast::Row => {
            for (idx, gv) in g.iter().enumerate() {
                out[idx % cols] += sign * gv;
            }
        }
    }
}

fn transposed(d: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let m = t(&[3, 3], &[1.5, -2.0, 0.25, 3.0, 4.0, 5.0, -6.0, 7.0, 8.0]);
        let i = tape.constant(Tensor::identity(3));
        let mv = tape.constant(m.clone());
        let out = tape.matmul(i, mv).unwrap();
        assert!(tape.value(out).bit_eq(&m));

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[4]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let s = tape.softmax(x);
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.grad_of(y, x).unwrap();
        assert_eq!(g.data(), &[6.0]);
    }

    #[test]
    fn softmax_first_component_gradient() {
        // Central differences, h = 1e-5, give [0.25, -0.25].
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[1, 2]));
        let s = tape.softmax(x);
        let p = tape.pick(s, &[0]).unwrap();
        let l = tape.sum(p);
        let g = tape.grad_of(l, x).unwrap();
        let h = 1e-5;
        let f = |x0: f64, x1: f64| {
            let mut r = [x0, x1];
            softmax_in_place(&mut r);
            r[0]
        };
        let fd = [
            (f(h, 0.0) - f(-h, 0.0)) / (2.0 * h),
            (f(0.0, h) - f(0.0, -h)) / (2.0 * h),
        ];
        for (a, b) in g.data().iter().zip(fd) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((g.data()[0] - 0.25).abs() < 1e-12);
        assert!((g.data()[1] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn constant_graph_has_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.sum(c);
        let g = tape.grad_of(s, x).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_nan() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[2]));
        assert!(tape.backward(x, &mut store).is_err());
        let mut tape = Tape::new();
        let bad = tape.variable(Tensor::scalar(0.0));
        let big = tape.scale(bad, 0.0);
        let e = tape.exp(big);
        let inf = tape.scale(e, f64::INFINITY);
        assert!(matches!(
            tape.backward(inf, &mut store),
            Err(Error::NonFinite(_))
        ));
        let empty = Tape::new();
        assert!(empty.gradients(Var(0)).is_err());
    }

    #[test]
    fn backward_populates_store_and_clears() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[2], &[1.0, -2.0])).unwrap();
        store.insert("unused", t(&[1], &[5.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let _u = tape.param(&store, "unused").unwrap();
        let sq = tape.square(w);
        let l = tape.sum(sq);
        tape.backward(l, &mut store).unwrap();
        assert!(tape.is_empty());
        assert_eq!(store.get("w").unwrap().grad(), Some(&[2.0, -4.0][..]));
        assert_eq!(store.get("unused").unwrap().grad(), Some(&[0.0][..]));
    }

    #[test]
    fn normalize_zero_row_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.normalize_rows(x), Err(Error::ZeroNorm(_))));
    }
}
