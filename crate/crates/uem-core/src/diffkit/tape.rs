//! Operation tape for reverse-mode differentiation.
//!
//! Ops are evaluated eagerly and recorded in topological order (operands
//! always precede consumers), so the backward pass is a single reverse scan
//! that visits each node exactly once. Tapes are single-writer; distinct
//! tapes may be evaluated concurrently.

use std::cell::Cell;

use super::tensor::{norm_of, Tensor, LN_FLOOR};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    RowSum(Var),
    Dot(Var, Var),
    Norm(Var),
    NormalizeRows(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var, Option<Vec<bool>>),
    PairwiseDist(Var, Var),
    TileRows(Var, usize),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ln_clamp_hits: Cell<u64>,
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

    /// How many ln arguments were clamped up to `LN_FLOOR` so far.
    pub fn ln_clamp_hits(&self) -> u64 {
        self.ln_clamp_hits.get()
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor. Leaves are both parameters and constants;
    /// gradients are computed for any leaf the caller asks about.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transposed()?;
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(Op::Scale(a, k), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let (v, clamped) = self.value(a).ln_clamped()?;
        if clamped > 0 {
            self.ln_clamp_hits.set(self.ln_clamp_hits.get() + clamped);
        }
        Ok(self.push(Op::Ln(a), v))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).sigmoid();
        self.push(Op::Sigmoid(a), v)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).clamp(lo, hi);
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).row_sum()?;
        Ok(self.push(Op::RowSum(a), v))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).dot(self.value(b))?);
        Ok(self.push(Op::Dot(a, b), v))
    }

    pub fn norm(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).norm());
        self.push(Op::Norm(a), v)
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).normalize_rows()?;
        Ok(self.push(Op::NormalizeRows(a), v))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows()?;
        Ok(self.push(Op::SoftmaxRows(a), v))
    }

    /// Row-wise log-sum-exp, optionally restricted to masked columns.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let v = self.value(a).logsumexp_rows(mask.as_deref())?;
        Ok(self.push(Op::LogSumExpRows(a, mask), v))
    }

    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).pairwise_dist(self.value(b))?;
        Ok(self.push(Op::PairwiseDist(a, b), v))
    }

    pub fn tile_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let v = self.value(a).tile_rows(n)?;
        Ok(self.push(Op::TileRows(a, n), v))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(Op::ConcatCols(a, b), v))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_rows(self.value(b))?;
        Ok(self.push(Op::ConcatRows(a, b), v))
    }

    /// Reverse pass from a scalar root. Leaves not reachable from the root
    /// report zero gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot {
                got: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::raw(self.nodes[i].value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // y = a @ b: ga += g @ b^T, gb += a^T @ g
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                {
                    let ga = acc(grads, a.0, n * k);
                    for r in 0..n {
                        for j in 0..m {
                            let gv = g[r * m + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[r * k + p] += gv * bv.data()[p * m + j];
                            }
                        }
                    }
                }
                let gb = acc(grads, b.0, k * m);
                for r in 0..n {
                    for p in 0..k {
                        let a_rp = av.data()[r * k + p];
                        if a_rp == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            gb[p * m + j] += a_rp * g[r * m + j];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let av = val(*a);
                let (n, m) = (av.rows(), av.cols());
                let ga = acc(grads, a.0, n * m);
                for r in 0..n {
                    for c in 0..m {
                        ga[r * m + c] += g[c * n + r];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, a.0, g.len()), g, 1.0);
                add_into(acc(grads, b.0, g.len()), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, a.0, g.len()), g, 1.0);
                add_into(acc(grads, b.0, g.len()), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data().to_vec(), val(*b).data().to_vec());
                {
                    let ga = acc(grads, a.0, g.len());
                    for (idx, gv) in g.iter().enumerate() {
                        ga[idx] += gv * bv[idx];
                    }
                }
                let gb = acc(grads, b.0, g.len());
                for (idx, gv) in g.iter().enumerate() {
                    gb[idx] += gv * av[idx];
                }
            }
            Op::Scale(a, k) => add_into(acc(grads, a.0, g.len()), g, *k),
            Op::Relu(a) => {
                let av = val(*a);
                let ga = acc(grads, a.0, g.len());
                for (idx, gv) in g.iter().enumerate() {
                    if av.data()[idx] > 0.0 {
                        ga[idx] += gv;
                    }
                }
            }
            Op::Exp(a) => {
                let yv = node.value.data();
                let ga = acc(grads, a.0, g.len());
                for (idx, gv) in g.iter().enumerate() {
                    ga[idx] += gv * yv[idx];
                }
            }
            Op::Ln(a) => {
                // Clamped region has zero derivative.
                let av = val(*a);
                let ga = acc(grads, a.0, g.len());
                for (idx, gv) in g.iter().enumerate() {
                    let x = av.data()[idx];
                    if x >= LN_FLOOR {
                        ga[idx] += gv / x;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                let ga = acc(grads, a.0, g.len());
                for (idx, gv) in g.iter().enumerate() {
                    let y = yv[idx];
                    ga[idx] += gv * y * (1.0 - y);
                }
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                let ga = acc(grads, a.0, g.len());
                for (idx, gv) in g.iter().enumerate() {
                    let x = av.data()[idx];
                    if x >= *lo && x <= *hi {
                        ga[idx] += gv;
                    }
                }
            }
            Op::Sum(a) => {
                let ga = acc(grads, a.0, val(*a).len());
                for v in ga.iter_mut() {
                    *v += g[0];
                }
            }
            Op::RowSum(a) => {
                let av = val(*a);
                let (n, m) = (av.rows(), av.cols());
                let ga = acc(grads, a.0, n * m);
                for r in 0..n {
                    for c in 0..m {
                        ga[r * m + c] += g[r];
                    }
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a).data().to_vec(), val(*b).data().to_vec());
                add_into(acc(grads, a.0, bv.len()), &bv, g[0]);
                add_into(acc(grads, b.0, av.len()), &av, g[0]);
            }
            Op::Norm(a) => {
                // d||x||/dx = x/||x||; zero at the origin (subgradient).
                let av = val(*a);
                let r = node.value.item();
                if r > 0.0 {
                    let ga = acc(grads, a.0, av.len());
                    for (idx, &x) in av.data().iter().enumerate() {
                        ga[idx] += g[0] * x / r;
                    }
                }
            }
            Op::NormalizeRows(a) => {
                let av = val(*a);
                let (n, m) = (av.rows(), av.cols());
                let ga = acc(grads, a.0, n * m);
                for r in 0..n {
                    let x = av.row(r);
                    let nr = norm_of(x);
                    let gr = &g[r * m..(r + 1) * m];
                    let mut xg = 0.0;
                    for c in 0..m {
                        xg += x[c] * gr[c];
                    }
                    for c in 0..m {
                        ga[r * m + c] += gr[c] / nr - x[c] * xg / (nr * nr * nr);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let yv = node.value.data();
                let (n, m) = (node.value.rows(), node.value.cols());
                let ga = acc(grads, a.0, n * m);
                for r in 0..n {
                    let y = &yv[r * m..(r + 1) * m];
                    let gr = &g[r * m..(r + 1) * m];
                    let mut gy = 0.0;
                    for c in 0..m {
                        gy += gr[c] * y[c];
                    }
                    for c in 0..m {
                        ga[r * m + c] += y[c] * (gr[c] - gy);
                    }
                }
            }
            Op::LogSumExpRows(a, mask) => {
                let av = val(*a);
                let (n, m) = (av.rows(), av.cols());
                let lse = node.value.data();
                let ga = acc(grads, a.0, n * m);
                for r in 0..n {
                    for c in 0..m {
                        let sel = mask.as_ref().map_or(true, |mk| mk[r * m + c]);
                        if sel {
                            ga[r * m + c] += g[r] * (av.data()[r * m + c] - lse[r]).exp();
                        }
                    }
                }
            }
            Op::PairwiseDist(a, b) => {
                // dy_ij/da_i = (a_i - b_j)/y_ij, zero where y_ij = 0.
                let (av, bv) = (val(*a), val(*b));
                let (n, m, d) = (av.rows(), bv.rows(), av.cols());
                let y = node.value.data();
                let mut ga_buf = vec![0.0; n * d];
                let mut gb_buf = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gv = g[i * m + j];
                        let dist = y[i * m + j];
                        if gv == 0.0 || dist == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = (av.data()[i * d + k] - bv.data()[j * d + k]) / dist;
                            ga_buf[i * d + k] += gv * diff;
                            gb_buf[j * d + k] -= gv * diff;
                        }
                    }
                }
                add_into(acc(grads, a.0, n * d), &ga_buf, 1.0);
                add_into(acc(grads, b.0, m * d), &gb_buf, 1.0);
            }
            Op::TileRows(a, n) => {
                let d = val(*a).len();
                let ga = acc(grads, a.0, d);
                for r in 0..*n {
                    for c in 0..d {
                        ga[c] += g[r * d + c];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
                {
                    let ga = acc(grads, a.0, n * ca);
                    for r in 0..n {
                        for c in 0..ca {
                            ga[r * ca + c] += g[r * (ca + cb) + c];
                        }
                    }
                }
                let gb = acc(grads, b.0, n * cb);
                for r in 0..n {
                    for c in 0..cb {
                        gb[r * cb + c] += g[r * (ca + cb) + ca + c];
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let (la, lb) = (val(*a).len(), val(*b).len());
                add_into(acc(grads, a.0, la), &g[..la], 1.0);
                add_into(acc(grads, b.0, lb), &g[la..la + lb], 1.0);
            }
        }
        Ok(())
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'g mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += k * s;
    }
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to a node, if the node was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient as an owned tensor, zeros when the node was not reached.
    pub fn take(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}
