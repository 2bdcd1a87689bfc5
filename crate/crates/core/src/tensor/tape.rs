use serde::{Deserialize, Serialize};

use super::{kernels, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    /// Exponential linear unit with alpha fixed to 1.
    Elu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Elu => {
                if y > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Feature-wise batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(Shape::Vector(dim), 1.0).into_param(),
            beta: Tensor::zeros(Shape::Vector(dim)).into_param(),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.unbiased_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Per-column statistics of one training-mode batch normalization call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    GraphMatMul {
        adj: Var,
        z: Var,
    },
    Activation(Var, Activation),
    Scale(Var, f64),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Mask(Var, Vec<bool>),
    AddConstant(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Concat(Vec<Var>),
    Reduce {
        x: Var,
        segments: usize,
        kind: Reduce,
    },
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of one forward pass.
///
/// Operations are appended in execution order, so inputs always precede the
/// operations that consume them. [`Tape::backward`] consumes the tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, lhs: Shape, rhs: Shape) -> Error {
    Error::Dimension { op, lhs, rhs }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(
            value.is_finite() || inputs.iter().any(|v| !self.nodes[v.0].value.is_finite()),
            "non-finite output of {op:?} from finite inputs"
        );
        let requires_grad = inputs.iter().any(|&v| self.requires(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf; gradients are tracked iff the tensor
    /// is marked `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("shape already validated");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::new(t.shape(), t.into_data()).expect("shape already validated");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (Shape::Matrix(m, k), Shape::Matrix(k2, n)) = (sa, sb) else {
            return Err(dim_err("matmul", sa, sb));
        };
        if k != k2 {
            return Err(dim_err("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), &[a])
    }

    /// Applies an `N×N` adjacency to each of the stacked `N`-row blocks of
    /// `z`, i.e. a block-diagonal product sharing one adjacency.
    pub fn graph_matmul(&mut self, adj: Var, z: Var) -> Result<Var> {
        let (sa, sz) = (self.shape(adj), self.shape(z));
        let (Shape::Matrix(n, n2), Shape::Matrix(rows, d)) = (sa, sz) else {
            return Err(dim_err("graph_matmul", sa, sz));
        };
        if n != n2 || n == 0 || rows % n != 0 {
            return Err(dim_err("graph_matmul", sa, sz));
        }
        let mut out = vec![0.0; rows * d];
        let a = self.value(adj).data();
        let zd = self.value(z).data();
        for b in 0..rows / n {
            let span = b * n * d..(b + 1) * n * d;
            kernels::matmul(a, &zd[span.clone()], &mut out[span], n, n, d);
        }
        Ok(self.push(Tensor::matrix(rows, d, out)?, Op::GraphMatMul { adj, z }, &[adj, z]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::new(src.shape(), data).expect("same shape");
        self.push(t, Op::Activation(x, kind), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| c * v).collect();
        let t = Tensor::new(src.shape(), data).expect("same shape");
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err("add", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor::new(sa, data)?, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err("mul", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor::new(sa, data)?, Op::Mul(a, b), &[a, b]))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let (Shape::Matrix(m, n), Shape::Vector(nb)) = (sx, sb) else {
            return Err(dim_err("add_row_bias", sx, sb));
        };
        if n != nb {
            return Err(dim_err("add_row_bias", sx, sb));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// Zeroes every entry whose mask bit is false; gradient flows only
    /// through kept entries.
    pub fn mask(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let sx = self.shape(x);
        if mask.len() != sx.numel() {
            return Err(dim_err("mask", sx, Shape::Vector(mask.len())));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect();
        Ok(self.push(Tensor::new(sx, data)?, Op::Mask(x, mask), &[x]))
    }

    /// Adds a constant (untracked) tensor.
    pub fn add_constant(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let sx = self.shape(x);
        if sx != c.shape() {
            return Err(dim_err("add_constant", sx, c.shape()));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        Ok(self.push(Tensor::new(sx, data)?, Op::AddConstant(x), &[x]))
    }

    /// Feature-wise batch normalization of a `rows×D` matrix.
    ///
    /// Train mode standardizes each column with the batch mean and the
    /// population variance and returns the batch statistics so the caller
    /// can update the running estimates; eval mode uses `bn`'s running
    /// statistics and returns `None`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        bn: &BatchNorm,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.shape(x);
        let Shape::Matrix(rows, d) = sx else {
            return Err(dim_err("batchnorm", sx, self.shape(gamma)));
        };
        for p in [gamma, beta] {
            if self.shape(p) != Shape::Vector(d) {
                return Err(dim_err("batchnorm", sx, self.shape(p)));
            }
        }
        if bn.dim() != d {
            return Err(dim_err("batchnorm", sx, Shape::Vector(bn.dim())));
        }
        if bn.eps.is_nan() || bn.eps <= 0.0 {
            return Err(Error::Config(format!("batchnorm eps must be positive, got {}", bn.eps)));
        }
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::Data(format!(
                        "batchnorm in train mode needs at least 2 rows, got {rows}"
                    )));
                }
                let xd = self.value(x).data();
                let mut mean = vec![0.0; d];
                for row in xd.chunks(d) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; d];
                for row in xd.chunks(d) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        let c = v - m;
                        *s += c * c;
                    }
                }
                let unbiased_var = var.iter().map(|s| s / (rows - 1) as f64).collect();
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    unbiased_var,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = self.value(x).data().to_vec();
        let mut out = vec![0.0; rows * d];
        for (xrow, orow) in xhat.chunks_mut(d).zip(out.chunks_mut(d)) {
            for j in 0..d {
                xrow[j] = (xrow[j] - mean[j]) * inv_std[j];
                orow[j] = g[j] * xrow[j] + b[j];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: mode == Mode::Train,
        };
        let v = self.push(Tensor::matrix(rows, d, out)?, op, &[x, gamma, beta]);
        Ok((v, stats))
    }

    /// Column-wise concatenation of matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Data("concat of zero tensors".into()))?;
        let Shape::Matrix(rows, _) = self.shape(first) else {
            return Err(dim_err("concat", self.shape(first), self.shape(first)));
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.shape(p) {
                Shape::Matrix(r, c) if r == rows => widths.push(c),
                other => return Err(dim_err("concat", self.shape(first), other)),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::Concat(parts.to_vec()), parts))
    }

    /// Column-wise mean or sum over all rows, producing a vector.
    pub fn reduce_nodes(&mut self, x: Var, kind: Reduce) -> Result<Var> {
        let v = self.reduce_segments(x, 1, kind)?;
        let n = self.shape(v).numel();
        let node = &mut self.nodes[v.0];
        node.value = std::mem::replace(&mut node.value, Tensor::zeros(Shape::Vector(0))).reshape(Shape::Vector(n))?;
        Ok(v)
    }

    /// Splits the rows of `x` into `segments` equal consecutive blocks and
    /// reduces each block column-wise, producing a `segments×D` matrix.
    pub fn reduce_segments(&mut self, x: Var, segments: usize, kind: Reduce) -> Result<Var> {
        let sx = self.shape(x);
        let Shape::Matrix(rows, d) = sx else {
            return Err(dim_err("reduce", sx, Shape::Vector(segments)));
        };
        if rows == 0 || segments == 0 {
            return Err(Error::Data("reduction over zero nodes".into()));
        }
        if rows % segments != 0 {
            return Err(dim_err("reduce", sx, Shape::Vector(segments)));
        }
        let per = rows / segments;
        let scale = match kind {
            Reduce::Mean => 1.0 / per as f64,
            Reduce::Sum => 1.0,
        };
        let xd = self.value(x).data();
        let mut out = vec![0.0; segments * d];
        for s in 0..segments {
            let orow = &mut out[s * d..(s + 1) * d];
            for row in xd[s * per * d..(s + 1) * per * d].chunks(d) {
                for (o, v) in orow.iter_mut().zip(row) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o *= scale);
        }
        Ok(self.push(
            Tensor::matrix(segments, d, out)?,
            Op::Reduce { x, segments, kind },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean squared error between equally sized prediction and target.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp.numel() != st.numel() || sp.numel() == 0 {
            return Err(dim_err("mse_loss", sp, st));
        }
        let n = sp.numel() as f64;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(pred, target), &[pred, target]))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::Data(format!("backward needs a scalar loss, got shape {ls}")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.requires(v) {
                return;
            }
            let n = self.value(v).numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a).dims();
                let (_, n) = self.shape(*b).dims();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| kernels::matmul_bt(g, bd, ga, m, n, k));
                acc(*b, &mut |gb| kernels::matmul_at(ad, g, gb, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = self.shape(*a).dims();
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::GraphMatMul { adj, z } => {
                let (n, _) = self.shape(*adj).dims();
                let (rows, d) = self.shape(*z).dims();
                let (ad, zd) = (self.value(*adj).data(), self.value(*z).data());
                acc(*adj, &mut |ga| {
                    for b in 0..rows / n {
                        let span = b * n * d..(b + 1) * n * d;
                        kernels::matmul_bt(&g[span.clone()], &zd[span], ga, n, d, n);
                    }
                });
                acc(*z, &mut |gz| {
                    for b in 0..rows / n {
                        let span = b * n * d..(b + 1) * n * d;
                        kernels::matmul_at(ad, &g[span.clone()], &mut gz[span], n, n, d);
                    }
                });
            }
            Op::Activation(x, kind) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * kind.derivative_from_output(*yi);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (o, gi) in gx.iter_mut().zip(g) {
                    *o += c * gi;
                }
            }),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |gv| {
                        for (o, gi) in gv.iter_mut().zip(g) {
                            *o += gi;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AddRowBias(x, bias) => {
                let n = self.shape(*bias).numel();
                acc(*x, &mut |gx| {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        for (o, gi) in gb.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Mask(x, mask) => acc(*x, &mut |gx| {
                for ((o, gi), &keep) in gx.iter_mut().zip(g).zip(mask) {
                    if keep {
                        *o += gi;
                    }
                }
            }),
            Op::AddConstant(x) => acc(*x, &mut |gx| {
                for (o, gi) in gx.iter_mut().zip(g) {
                    *o += gi;
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (rows, d) = node.value.shape().dims();
                let gam = self.value(*gamma).data();
                acc(*gamma, &mut |gg| {
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * xrow[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += grow[j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    if *train {
                        // dxhat = g·γ; dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                        let mut sum_dxhat = vec![0.0; d];
                        let mut sum_dxhat_xhat = vec![0.0; d];
                        for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                let dxh = grow[j] * gam[j];
                                sum_dxhat[j] += dxh;
                                sum_dxhat_xhat[j] += dxh * xrow[j];
                            }
                        }
                        let nf = rows as f64;
                        for ((orow, grow), xrow) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                let dxh = grow[j] * gam[j];
                                orow[j] += inv_std[j] / nf * (nf * dxh - sum_dxhat[j] - xrow[j] * sum_dxhat_xhat[j]);
                            }
                        }
                    } else {
                        for (orow, grow) in gx.chunks_mut(d).zip(g.chunks(d)) {
                            for j in 0..d {
                                orow[j] += grow[j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let (rows, total) = node.value.shape().dims();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).dims().1;
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (o, gi) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *o += gi;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Reduce { x, segments, kind } => {
                let (rows, d) = self.shape(*x).dims();
                let per = rows / segments;
                let scale = match kind {
                    Reduce::Mean => 1.0 / per as f64,
                    Reduce::Sum => 1.0,
                };
                acc(*x, &mut |gx| {
                    for s in 0..*segments {
                        let grow = &g[s * d..(s + 1) * d];
                        for row in gx[s * per * d..(s + 1) * per * d].chunks_mut(d) {
                            for (o, gi) in row.iter_mut().zip(grow) {
                                *o += scale * gi;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mse(p, t) => {
                let (pd, td) = (self.value(*p).data(), self.value(*t).data());
                let n = pd.len() as f64;
                acc(*p, &mut |gp| {
                    for ((o, a), b) in gp.iter_mut().zip(pd).zip(td) {
                        *o += g[0] * 2.0 * (a - b) / n;
                    }
                });
                acc(*t, &mut |gt| {
                    for ((o, a), b) in gt.iter_mut().zip(pd).zip(td) {
                        *o -= g[0] * 2.0 * (a - b) / n;
                    }
                });
            }
        }
    }
}

/// Gradients of one backward sweep, indexed by tape handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` does not influence the loss or is
    /// not tracked.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a dense tensor (zeros when untouched).
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("shape recorded with grad"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn accumulate_into(&self, v: Var, param: &mut Tensor) {
        if let Some(g) = self.get(v) {
            param.accumulate_grad(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn run_activation(kind: Activation, x: f64) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::scalar(x));
        let y = tape.activation(v, kind);
        tape.scalar(y)
    }

    #[test]
    fn activation_fixed_points() {
        assert_eq!(run_activation(Activation::Tanh, 0.0), 0.0);
        assert_eq!(run_activation(Activation::Sigmoid, 0.0), 0.5);
        assert_eq!(run_activation(Activation::Elu, 0.0), 0.0);
        assert_eq!(run_activation(Activation::Elu, 2.0), 2.0);
        assert_eq!(run_activation(Activation::Identity, -3.5), -3.5);
    }

    #[test]
    fn activation_scalar_values() {
        // exp(-1) - 1 and tanh(1), evaluated independently
        let elu_m1 = (-1.0f64).exp() - 1.0;
        assert_abs_diff_eq!(run_activation(Activation::Elu, -1.0), elu_m1, epsilon = 1e-15);
        assert_abs_diff_eq!(run_activation(Activation::Elu, -1.0), -0.632121, epsilon = 1e-6);
        assert_abs_diff_eq!(run_activation(Activation::Tanh, 1.0), 0.761594, epsilon = 1e-6);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    fn bn_forward(cols: &[&[f64]], gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(cols));
        let mut bn = BatchNorm::new(gamma.len());
        bn.eps = eps;
        let g = tape.constant(Tensor::vector(gamma.to_vec()));
        let b = tape.constant(Tensor::vector(beta.to_vec()));
        let (y, _) = tape.batchnorm(x, g, b, &bn, Mode::Train).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn batchnorm_standardizes_column() {
        let y = bn_forward(&[&[1.0], &[3.0]], &[1.0], &[0.0], 1e-12);
        assert_abs_diff_eq!(y.data()[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y.data()[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn batchnorm_constant_column_maps_to_beta() {
        let y = bn_forward(&[&[4.0], &[4.0], &[4.0]], &[1.0], &[0.0], 1e-5);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_zero_gamma_outputs_beta() {
        let y = bn_forward(
            &[&[1.0, 7.0], &[5.0, -2.0], &[0.0, 3.0]],
            &[0.0, 0.0],
            &[0.25, -1.5],
            1e-5,
        );
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.25, -1.5]);
        }
    }

    #[test]
    fn batchnorm_train_needs_two_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0]]));
        let g = tape.constant(Tensor::vector(vec![1.0]));
        let b = tape.constant(Tensor::vector(vec![0.0]));
        let bn = BatchNorm::new(1);
        assert!(tape.batchnorm(x, g, b, &bn, Mode::Train).is_err());
        assert!(tape.batchnorm(x, g, b, &bn, Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_running_stats_update() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0], &[3.0]]));
        let mut bn = BatchNorm::new(1);
        let g = tape.leaf(&bn.gamma);
        let b = tape.leaf(&bn.beta);
        let (_, stats) = tape.batchnorm(x, g, b, &bn, Mode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.unbiased_var, vec![2.0]);
        bn.update_running(&stats);
        assert_abs_diff_eq!(bn.running_mean[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(bn.running_var[0], 0.9 + 0.2, epsilon = 1e-15);
    }

    #[test]
    fn concat_preserves_column_order() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[&[1.0], &[2.0]]));
        let b = tape.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 2.0, 4.0]);
        let single = tape.concat_cols(&[a]).unwrap();
        assert_eq!(tape.value(single).data(), tape.value(a).data());
        let wide = tape.constant(Tensor::zeros(Shape::Matrix(2, 3)));
        let c2 = tape.concat_cols(&[c, wide]).unwrap();
        assert_eq!(tape.shape(c2), Shape::Matrix(2, 5));
        let bad = tape.constant(Tensor::zeros(Shape::Matrix(3, 1)));
        assert!(tape.concat_cols(&[a, bad]).is_err());
    }

    #[test]
    fn reduce_nodes_mean_and_sum() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[3.0, 2.0]]));
        let m = tape.reduce_nodes(z, Reduce::Mean).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 1.0]);
        assert_eq!(tape.shape(m), Shape::Vector(2));
        let col = tape.constant(Tensor::from_rows(&[&[1.0], &[3.0]]));
        let s = tape.reduce_nodes(col, Reduce::Sum).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0]);
        let empty = tape.constant(Tensor::zeros(Shape::Matrix(0, 2)));
        assert!(tape.reduce_nodes(empty, Reduce::Mean).is_err());
    }

    #[test]
    fn mse_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let t = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = tape.mse_loss(p, t).unwrap();
        assert_eq!(tape.scalar(l), 2.5);
        let same = tape.mse_loss(p, p).unwrap();
        assert_eq!(tape.scalar(same), 0.0);
        let p1 = tape.constant(Tensor::vector(vec![0.0]));
        let t1 = tape.constant(Tensor::vector(vec![2.0]));
        let l1 = tape.mse_loss(p1, t1).unwrap();
        assert_eq!(tape.scalar(l1), 4.0);
        assert!(tape.mse_loss(p, p1).is_err());
    }

    #[test]
    fn chain_rule_through_mse() {
        // L = (w·x − y)², dL/dw = 2(w·x − y)·x = 8 for w=1, x=2, y=0
        let w = Tensor::scalar(1.0).into_param();
        let mut tape = Tape::new();
        let wv = tape.leaf(&w);
        let x = tape.constant(Tensor::scalar(2.0));
        let y = tape.constant(Tensor::scalar(0.0));
        let pred = tape.mul(wv, x).unwrap();
        let loss = tape.mse_loss(pred, y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(wv).unwrap(), &[8.0]);
    }

    #[test]
    fn independent_parameter_gets_no_gradient() {
        let w = Tensor::scalar(1.0).into_param();
        let u = Tensor::scalar(5.0).into_param();
        let mut tape = Tape::new();
        let wv = tape.leaf(&w);
        let uv = tape.leaf(&u);
        let y = tape.constant(Tensor::scalar(3.0));
        let loss = tape.mse_loss(wv, y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(uv).is_none());
        assert_eq!(grads.tensor(uv).data(), &[0.0]);
    }

    #[test]
    fn two_paths_accumulate() {
        // L = w·w summed through two separate uses: dL/dw = 2w
        let w = Tensor::scalar(3.0).into_param();
        let mut tape = Tape::new();
        let wv = tape.leaf(&w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(wv).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let w = Tensor::vector(vec![1.0, 2.0]).into_param();
        let mut tape = Tape::new();
        let wv = tape.leaf(&w);
        assert!(tape.backward(wv).is_err());
    }

    #[test]
    fn graph_matmul_matches_per_block_product() {
        let a = Tensor::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]);
        let z = Tensor::from_rows(&[&[1.0], &[2.0], &[5.0], &[-1.0]]);
        let mut tape = Tape::new();
        let av = tape.constant(a);
        let zv = tape.constant(z);
        let out = tape.graph_matmul(av, zv).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 2.0, 4.0, -1.0]);
        let odd = tape.constant(Tensor::zeros(Shape::Matrix(3, 1)));
        assert!(tape.graph_matmul(av, odd).is_err());
    }
}
