//! Reverse-mode automatic differentiation on a Wengert list of tensor ops.
//!
//! The tape records tensor-granularity operations (matrix products, gathers,
//! segment reductions, activations) during the forward pass and replays them
//! in reverse to accumulate vector-Jacobian products. A tape is confined to a
//! single thread; independent objective evaluations run on independent tapes.
//!
//! Every forward op validates shapes and checks its output for non-finite
//! values, failing with an error naming the op.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Internal: handle for the node at `index` (leaves are pushed contiguously,
/// which lets parameter collections enumerate their own vars).
pub(crate) fn var_at(index: usize) -> Var {
    Var(index)
}

enum Op {
    Leaf,
    Constant,
    /// C = A @ B
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    MulElem { a: Var, b: Var },
    /// out[i, j] = a[i, j] + row[j]
    AddRow { a: Var, row: Var },
    /// out = c * a + d (elementwise)
    AffineScalar { a: Var, c: f64 },
    LeakyRelu { a: Var, slope: f64 },
    /// Row-wise layer normalization with learnable affine.
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    /// out row p = a row idx[p]
    GatherRows { a: Var, idx: Arc<Vec<usize>> },
    /// out[p] = a.data[idx[p]] (column vector)
    GatherFlat { a: Var, idx: Arc<Vec<usize>> },
    /// out[s] = mean over rows i with seg[i] == s; empty segments yield zero.
    SegmentMean {
        a: Var,
        seg: Arc<Vec<usize>>,
        n_seg: usize,
        inv_count: Arc<Vec<f64>>,
    },
    SliceCols { a: Var, start: usize, len: usize },
    SumAll { a: Var },
    /// Scalar sum of squared differences against a constant target.
    SquaredDiffSum { a: Var, target: Arc<Tensor> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Single-objective computation tape.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn finish(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(name, "non-finite output"));
        }
        Ok(self.push(op, value, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.finish(Op::MatMul { a, b }, value, rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.finish(Op::Add { a, b }, value, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.finish(Op::Sub { a, b }, value, rg, "sub")
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul_elem(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.finish(Op::MulElem { a, b }, value, rg, "mul_elem")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let av = self.value(a);
        let rv = self.value(row);
        if av.shape().len() != 2 || rv.len() != av.cols() {
            return Err(Error::contract(format!(
                "add_row: {:?} + row of len {}",
                av.shape(),
                rv.len()
            )));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let ar = av.row_slice(i);
            for j in 0..n {
                data.push(ar[j] + rv.data()[j]);
            }
        }
        let rg = self.requires(a) || self.requires(row);
        self.finish(
            Op::AddRow { a, row },
            Tensor::from_parts(vec![m, n], data),
            rg,
            "add_row",
        )
    }

    /// out = c * a + d
    pub fn affine_scalar(&mut self, a: Var, c: f64, d: f64) -> Result<Var> {
        let value = self.value(a).map(|v| c * v + d);
        let rg = self.requires(a);
        self.finish(Op::AffineScalar { a, c }, value, rg, "affine_scalar")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine_scalar(a, c, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let value = self.value(a).map(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.requires(a);
        self.finish(Op::LeakyRelu { a, slope }, value, rg, "leaky_relu")
    }

    /// Row-wise layer normalization: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::contract("layer_norm requires rank-2 input"));
        }
        let (m, n) = (av.rows(), av.cols());
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.len() != n || bv.len() != n {
            return Err(Error::contract(format!(
                "layer_norm affine params of len {}/{} for width {}",
                gv.len(),
                bv.len(),
                n
            )));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = av.row_slice(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let rg = self.requires(a) || self.requires(gamma) || self.requires(beta);
        self.finish(
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat: Tensor::from_parts(vec![m, n], xhat),
                inv_std,
            },
            Tensor::from_parts(vec![m, n], out),
            rg,
            "layer_norm",
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::contract("gather_rows requires rank-2 input"));
        }
        let (m, n) = (av.rows(), av.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::contract(format!(
                "gather_rows index {} out of bounds for {} rows",
                bad, m
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            data.extend_from_slice(av.row_slice(i));
        }
        let rg = self.requires(a);
        self.finish(
            Op::GatherRows { a, idx: idx.clone() },
            Tensor::from_parts(vec![idx.len(), n], data),
            rg,
            "gather_rows",
        )
    }

    pub fn gather_flat(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        let len = av.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::contract(format!(
                "gather_flat index {} out of bounds for {} values",
                bad, len
            )));
        }
        let data: Vec<f64> = idx.iter().map(|&i| av.data()[i]).collect();
        let rg = self.requires(a);
        self.finish(
            Op::GatherFlat { a, idx: idx.clone() },
            Tensor::from_parts(vec![idx.len(), 1], data),
            rg,
            "gather_flat",
        )
    }

    /// Mean of rows grouped by segment id; segments without rows yield zeros.
    pub fn segment_mean(&mut self, a: Var, seg: Arc<Vec<usize>>, n_seg: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::contract("segment_mean requires rank-2 input"));
        }
        let (m, n) = (av.rows(), av.cols());
        if seg.len() != m {
            return Err(Error::contract(format!(
                "segment_mean: {} segment ids for {} rows",
                seg.len(),
                m
            )));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_seg) {
            return Err(Error::contract(format!(
                "segment id {} out of range {}",
                bad, n_seg
            )));
        }
        let mut counts = vec![0.0f64; n_seg];
        for &s in seg.iter() {
            counts[s] += 1.0;
        }
        let inv_count: Vec<f64> = counts
            .iter()
            .map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 })
            .collect();
        let mut out = vec![0.0; n_seg * n];
        for (i, &s) in seg.iter().enumerate() {
            let row = av.row_slice(i);
            let dst = &mut out[s * n..(s + 1) * n];
            for j in 0..n {
                dst[j] += row[j];
            }
        }
        for s in 0..n_seg {
            let c = inv_count[s];
            for v in &mut out[s * n..(s + 1) * n] {
                *v *= c;
            }
        }
        let rg = self.requires(a);
        self.finish(
            Op::SegmentMean {
                a,
                seg: seg.clone(),
                n_seg,
                inv_count: Arc::new(inv_count),
            },
            Tensor::from_parts(vec![n_seg, n], out),
            rg,
            "segment_mean",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 || start + len > av.cols() {
            return Err(Error::contract(format!(
                "slice_cols [{}, {}) of {:?}",
                start,
                start + len,
                av.shape()
            )));
        }
        let m = av.rows();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            let row = av.row_slice(i);
            data.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.requires(a);
        self.finish(
            Op::SliceCols { a, start, len },
            Tensor::from_parts(vec![m, len], data),
            rg,
            "slice_cols",
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.requires(a);
        self.finish(Op::SumAll { a }, Tensor::scalar(s), rg, "sum_all")
    }

    /// Scalar `sum((a - target)^2)` against a constant target.
    pub fn squared_diff_sum(&mut self, a: Var, target: Arc<Tensor>) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != target.shape() {
            return Err(Error::contract(format!(
                "squared_diff_sum: shape {:?} vs target {:?}",
                av.shape(),
                target.shape()
            )));
        }
        let s: f64 = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| (x - t) * (x - t))
            .sum();
        let rg = self.requires(a);
        self.finish(
            Op::SquaredDiffSum { a, target },
            Tensor::scalar(s),
            rg,
            "squared_diff_sum",
        )
    }

    /// Reverse sweep from a scalar objective. Returns one gradient per
    /// requested var (zeros when the objective does not depend on it).
    ///
    /// The sweep visits each tape node exactly once, in reverse order.
    pub fn grad(&self, objective: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let obj = &self.nodes[objective.0];
        if !obj.value.is_scalar() {
            return Err(Error::contract(format!(
                "grad objective must be scalar, got shape {:?}",
                obj.value.shape()
            )));
        }
        if !obj.value.data()[0].is_finite() {
            return Err(Error::numeric("grad", "objective is non-finite"));
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[objective.0] = Some(Tensor::scalar(1.0));

        for i in (0..=objective.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads)?;
            // leaf grads stay available for extraction
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        wrt.iter()
            .map(|&v| {
                let out = match grads[v.0].take() {
                    Some(g) => g,
                    None => Tensor::zeros(self.nodes[v.0].value.shape()),
                };
                if !out.all_finite() {
                    return Err(Error::numeric("grad", "non-finite gradient"));
                }
                Ok(out)
            })
            .collect()
    }

    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let add_to = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(acc) => acc.axpy(1.0, &delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };

        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                if self.requires(*a) {
                    add_to(grads, *a, g.matmul_t(self.value(*b))?)?;
                }
                if self.requires(*b) {
                    add_to(grads, *b, self.value(*a).t_matmul(g)?)?;
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    add_to(grads, *a, g.clone())?;
                }
                if self.requires(*b) {
                    add_to(grads, *b, g.clone())?;
                }
            }
            Op::Sub { a, b } => {
                if self.requires(*a) {
                    add_to(grads, *a, g.clone())?;
                }
                if self.requires(*b) {
                    add_to(grads, *b, g.scale(-1.0))?;
                }
            }
            Op::MulElem { a, b } => {
                if self.requires(*a) {
                    add_to(grads, *a, g.mul_elem(self.value(*b))?)?;
                }
                if self.requires(*b) {
                    add_to(grads, *b, g.mul_elem(self.value(*a))?)?;
                }
            }
            Op::AddRow { a, row } => {
                if self.requires(*a) {
                    add_to(grads, *a, g.clone())?;
                }
                if self.requires(*row) {
                    let (m, n) = (g.rows(), g.cols());
                    let shape = self.value(*row).shape().to_vec();
                    let mut sums = vec![0.0; n];
                    for i in 0..m {
                        let r = g.row_slice(i);
                        for j in 0..n {
                            sums[j] += r[j];
                        }
                    }
                    add_to(grads, *row, Tensor::from_parts(shape, sums))?;
                }
            }
            Op::AffineScalar { a, c } => {
                if self.requires(*a) {
                    add_to(grads, *a, g.scale(*c))?;
                }
            }
            Op::LeakyRelu { a, slope } => {
                if self.requires(*a) {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gi, &xi)| if xi >= 0.0 { gi } else { slope * gi })
                        .collect();
                    add_to(grads, *a, Tensor::from_parts(x.shape().to_vec(), data))?;
                }
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = (xhat.rows(), xhat.cols());
                let gv = self.value(*gamma);
                if self.requires(*gamma) {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        let gr = g.row_slice(i);
                        let xr = xhat.row_slice(i);
                        for j in 0..n {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    add_to(grads, *gamma, Tensor::from_parts(gv.shape().to_vec(), dg))?;
                }
                if self.requires(*beta) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        let gr = g.row_slice(i);
                        for j in 0..n {
                            db[j] += gr[j];
                        }
                    }
                    add_to(
                        grads,
                        *beta,
                        Tensor::from_parts(self.value(*beta).shape().to_vec(), db),
                    )?;
                }
                if self.requires(*a) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for i in 0..m {
                        let gr = g.row_slice(i);
                        let xr = xhat.row_slice(i);
                        let mut mean_gy = 0.0;
                        let mut mean_gy_x = 0.0;
                        for j in 0..n {
                            let gy = gr[j] * gv.data()[j];
                            mean_gy += gy;
                            mean_gy_x += gy * xr[j];
                        }
                        mean_gy /= nf;
                        mean_gy_x /= nf;
                        for j in 0..n {
                            let gy = gr[j] * gv.data()[j];
                            dx[i * n + j] = inv_std[i] * (gy - mean_gy - xr[j] * mean_gy_x);
                        }
                    }
                    add_to(grads, *a, Tensor::from_parts(vec![m, n], dx))?;
                }
            }
            Op::GatherRows { a, idx } => {
                if self.requires(*a) {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut da = vec![0.0; av.len()];
                    for (p, &src) in idx.iter().enumerate() {
                        let gr = g.row_slice(p);
                        let dst = &mut da[src * n..(src + 1) * n];
                        for j in 0..n {
                            dst[j] += gr[j];
                        }
                    }
                    add_to(grads, *a, Tensor::from_parts(av.shape().to_vec(), da))?;
                }
            }
            Op::GatherFlat { a, idx } => {
                if self.requires(*a) {
                    let av = self.value(*a);
                    let mut da = vec![0.0; av.len()];
                    for (p, &src) in idx.iter().enumerate() {
                        da[src] += g.data()[p];
                    }
                    add_to(grads, *a, Tensor::from_parts(av.shape().to_vec(), da))?;
                }
            }
            Op::SegmentMean {
                a,
                seg,
                n_seg: _,
                inv_count,
            } => {
                if self.requires(*a) {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut da = vec![0.0; av.len()];
                    for (i, &s) in seg.iter().enumerate() {
                        let c = inv_count[s];
                        let gr = g.row_slice(s);
                        let dst = &mut da[i * n..(i + 1) * n];
                        for j in 0..n {
                            dst[j] += gr[j] * c;
                        }
                    }
                    add_to(grads, *a, Tensor::from_parts(av.shape().to_vec(), da))?;
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.requires(*a) {
                    let av = self.value(*a);
                    let (m, n) = (av.rows(), av.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let gr = g.row_slice(i);
                        for j in 0..*len {
                            da[i * n + start + j] = gr[j];
                        }
                    }
                    add_to(grads, *a, Tensor::from_parts(vec![m, n], da))?;
                }
            }
            Op::SumAll { a } => {
                if self.requires(*a) {
                    let s = g.data()[0];
                    add_to(grads, *a, Tensor::full(self.value(*a).shape(), s))?;
                }
            }
            Op::SquaredDiffSum { a, target } => {
                if self.requires(*a) {
                    let s = 2.0 * g.data()[0];
                    let av = self.value(*a);
                    let data = av
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&x, &t)| s * (x - t))
                        .collect();
                    add_to(grads, *a, Tensor::from_parts(av.shape().to_vec(), data))?;
                }
            }
        }
        Ok(())
    }
}

/// Evaluates a scalar objective built by `f` over `params` and returns its
/// value together with one gradient tensor per parameter, computed by exact
/// reverse-mode differentiation of the recorded computation.
pub fn grad_of<F>(params: &[Tensor], f: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let objective = f(&mut tape, &vars)?;
    let value = tape.value(objective).item()?;
    let grads = tape.grad(objective, &vars)?;
    Ok((value, grads))
}
