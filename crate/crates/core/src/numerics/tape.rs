//! Tape-based reverse-mode automatic differentiation over whole tensors.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is always a valid topological order.

use super::params::{ParamId, ParamStore, StatUpdate};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    MeanGroups {
        input: Var,
        group: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        n_q: usize,
        n_kv: usize,
        heads: usize,
        weights: Vec<f64>,
    },
    Nmse {
        pred: Var,
        target: Tensor,
    },
    WeightedSum {
        input: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Whether batch normalization uses batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stat_updates: Vec<StatUpdate>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix_dims(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter read; gradients for it surface in
    /// [`Gradients::param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.param(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn record_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    /// Drains running-statistic updates produced by train-mode batch norm.
    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (matrix_dims(av), matrix_dims(bv)) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(dim_err("matmul", av.shape(), bv.shape())),
        };
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[i, :] + bias` for every row `i`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let cols = match matrix_dims(xv) {
            Some((_, c)) if bv.len() == c => c,
            _ => return Err(dim_err("add_row", xv.shape(), bv.shape())),
        };
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first().and_then(|p| matrix_dims(self.value(*p))) {
            Some((r, _)) => r,
            None => return Err(Error::Config("concat_cols needs 2-D inputs".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            match matrix_dims(self.value(*p)) {
                Some((r, c)) if r == rows => widths.push(c),
                _ => return Err(dim_err("concat_cols", &[rows], self.value(*p).shape())),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let v = Tensor::new(&[rows, total], out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Selects rows of a 2-D table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, e) = matrix_dims(tv).ok_or_else(|| dim_err("gather_rows", tv.shape(), &[]))?;
        let mut out = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            if i >= n {
                return Err(dim_err("gather_rows", tv.shape(), &[i]));
            }
            out.extend_from_slice(tv.row(i));
        }
        let v = Tensor::new(&[indices.len(), e], out)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    /// Means over consecutive groups of `group` rows: `[n·group, d] -> [n, d]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, d) = match matrix_dims(xv) {
            Some((r, d)) if group > 0 && r % group == 0 => (r, d),
            _ => return Err(dim_err("mean_groups", xv.shape(), &[group])),
        };
        let n = r / group;
        let mut out = vec![0.0; n * d];
        for (i, row) in xv.rows().enumerate() {
            let o = &mut out[(i / group) * d..(i / group + 1) * d];
            for (a, b) in o.iter_mut().zip(row) {
                *a += b / group as f64;
            }
        }
        let v = Tensor::new(&[n, d], out)?;
        Ok(self.push(v, Op::MeanGroups { input: x, group }, &[x]))
    }

    /// 2-D convolution without bias: input `[B, C_in, H, W]`, kernel
    /// `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (iv, kv) = (self.value(input), self.value(kernel));
        let (batch, c_in, h, w) = match iv.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(dim_err("conv2d", s, kv.shape())),
        };
        let (c_out, k) = match kv.shape() {
            [o, c, k1, k2] if *c == c_in && k1 == k2 => (*o, *k1),
            s => return Err(dim_err("conv2d", iv.shape(), s)),
        };
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if k == 0 || k > h + 2 * padding || k > w + 2 * padding {
            return Err(dim_err(
                "conv2d (kernel larger than padded input)",
                &[h + 2 * padding, w + 2 * padding],
                &[k, k],
            ));
        }
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (w + 2 * padding - k) / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out,
            w_out,
        };
        let cols = im2col(iv.data(), &geom);
        let ckk = c_in * k * k;
        let npos = h_out * w_out;
        let ncols = batch * npos;
        let mut big = vec![0.0; c_out * ncols];
        gemm(c_out, ckk, ncols, kv.data(), false, &cols, false, 0.0, &mut big);
        let mut out = vec![0.0; batch * c_out * npos];
        for b in 0..batch {
            for o in 0..c_out {
                let src = &big[o * ncols + b * npos..o * ncols + (b + 1) * npos];
                out[(b * c_out + o) * npos..(b * c_out + o + 1) * npos].copy_from_slice(src);
            }
        }
        let v = Tensor::new(&[batch, c_out, h_out, w_out], out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            &[input, kernel],
        ))
    }

    /// Batch normalization over axis 1 of `[B, C, ...]`.
    ///
    /// In train mode returns the batch mean and unbiased batch variance per
    /// channel alongside the output; in eval mode `running` supplies them.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(input);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(dim_err("batch_norm", &shape, &[]));
        }
        let (batch, ch) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.value(gamma).len() != ch || self.value(beta).len() != ch {
            return Err(dim_err("batch_norm", &shape, self.value(gamma).shape()));
        }
        let train = running.is_none();
        if train && batch < 2 {
            return Err(Error::DegenerateBatch(batch));
        }
        let n = (batch * spatial) as f64;
        let x = xv.data();
        let idx = |b: usize, c: usize, s: usize| (b * ch + c) * spatial + s;
        let (mean, var_biased, var_unbiased) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for c in 0..ch {
                    let mut s = 0.0;
                    for b in 0..batch {
                        for p in 0..spatial {
                            s += x[idx(b, c, p)];
                        }
                    }
                    mean[c] = s / n;
                    let mut ss = 0.0;
                    for b in 0..batch {
                        for p in 0..spatial {
                            let d = x[idx(b, c, p)] - mean[c];
                            ss += d * d;
                        }
                    }
                    var[c] = ss / n;
                }
                let unbiased = var.iter().map(|v| v * n / (n - 1.0)).collect();
                (mean, var, unbiased)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..batch {
            for c in 0..ch {
                for p in 0..spatial {
                    let i = idx(b, c, p);
                    xhat[i] = (x[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let v = Tensor::new(&shape, out)?;
        let var = self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[input, gamma, beta],
        );
        Ok((var, mean, var_unbiased))
    }

    /// Multi-head scaled dot-product attention on already-projected inputs.
    ///
    /// `q` is `[batch·n_q, d]`, `k` and `v` are `[batch·n_kv, d]`; each batch
    /// element attends only within its own rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rq, d) = matrix_dims(qv).ok_or_else(|| dim_err("attention", qv.shape(), &[]))?;
        let (rk, dk) = matrix_dims(kv).ok_or_else(|| dim_err("attention", kv.shape(), &[]))?;
        if dk != d || vv.shape() != kv.shape() {
            return Err(dim_err("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        if batch == 0 || rq % batch != 0 || rk % batch != 0 || rk == 0 {
            return Err(dim_err("attention batch", &[rq, rk], &[batch]));
        }
        let (n_q, n_kv, dh) = (rq / batch, rk / batch, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut weights = vec![0.0; batch * heads * n_q * n_kv];
        let mut out = vec![0.0; rq * d];
        let mut scores = vec![0.0; n_kv];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..n_q {
                    let qrow = &qd[(b * n_q + i) * d + h * dh..(b * n_q + i) * d + (h + 1) * dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow =
                            &kd[(b * n_kv + j) * d + h * dh..(b * n_kv + j) * d + (h + 1) * dh];
                        *s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let wrow = &mut weights[((b * heads + h) * n_q + i) * n_kv..][..n_kv];
                    let mut z = 0.0;
                    for (w, s) in wrow.iter_mut().zip(&scores) {
                        *w = (s - max).exp();
                        z += *w;
                    }
                    wrow.iter_mut().for_each(|w| *w /= z);
                    let orow = &mut out[(b * n_q + i) * d + h * dh..][..dh];
                    for (j, w) in wrow.iter().enumerate() {
                        let vrow = &vd[(b * n_kv + j) * d + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[rq, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                batch,
                n_q,
                n_kv,
                heads,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Softmax weights `[batch, heads, n_q, n_kv]` of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Mean over rows of `‖pred_i − target_i‖² / ‖target_i‖²`.
    pub fn nmse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || pv.shape().len() != 2 {
            return Err(dim_err("nmse_loss", pv.shape(), target.shape()));
        }
        let rows = pv.shape()[0];
        let mut loss = 0.0;
        for (p, t) in pv.rows().zip(target.rows()) {
            let num: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = t.iter().map(|b| b * b).sum();
            loss += num / den;
        }
        let v = Tensor::scalar(loss / rows as f64);
        Ok(self.push(
            v,
            Op::Nmse {
                pred,
                target: target.clone(),
            },
            &[pred],
        ))
    }

    /// `Σ x ⊙ w` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(dim_err("weighted_sum", xv.shape(), weights.shape()));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum { input: x, weights },
            &[x],
        ))
    }

    /// Reverse sweep seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::full(self.value(output).shape(), 1.0);
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = matrix_dims(av).unwrap();
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, 0.0, &mut da);
                    acc(*a, Tensor::new(&[m, k], da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, 0.0, &mut db);
                    acc(*b, Tensor::new(&[k, n], db).unwrap());
                }
            }
            Op::AddRow(x, bias) => {
                if self.needs(*x) {
                    acc(*x, g.clone());
                }
                if self.needs(*bias) {
                    let bv = self.value(*bias);
                    let cols = bv.len();
                    let mut db = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    acc(*bias, Tensor::new(bv.shape(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    acc(*a, Tensor::new(g.shape(), d).unwrap());
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    acc(*b, Tensor::new(g.shape(), d).unwrap());
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, &a)| if a > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape();
                acc(*x, g.clone().reshape(shape).unwrap());
            }
            Op::ConcatCols(parts) => {
                let total = g.shape()[1];
                let rows = g.shape()[0];
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    if self.needs(*p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        acc(*p, Tensor::new(&[rows, w], d).unwrap());
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, indices } => {
                let tv = self.value(*table);
                let e = tv.shape()[1];
                let mut d = Tensor::zeros(tv.shape());
                for (r, &i) in indices.iter().enumerate() {
                    for (a, b) in d.data_mut()[i * e..(i + 1) * e].iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                acc(*table, d);
            }
            Op::MeanGroups { input, group } => {
                let xv = self.value(*input);
                let dcols = xv.shape()[1];
                let mut d = Tensor::zeros(xv.shape());
                for (i, row) in d.data_mut().chunks_mut(dcols).enumerate() {
                    for (a, b) in row.iter_mut().zip(g.row(i / group)) {
                        *a = b / *group as f64;
                    }
                }
                acc(*input, d);
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let npos = geom.h_out * geom.w_out;
                let ncols = geom.batch * npos;
                let ckk = geom.c_in * geom.k * geom.k;
                let mut big = vec![0.0; geom.c_out * ncols];
                for b in 0..geom.batch {
                    for o in 0..geom.c_out {
                        big[o * ncols + b * npos..o * ncols + (b + 1) * npos].copy_from_slice(
                            &g.data()[(b * geom.c_out + o) * npos..(b * geom.c_out + o + 1) * npos],
                        );
                    }
                }
                if self.needs(*kernel) {
                    let mut dk = vec![0.0; geom.c_out * ckk];
                    gemm(geom.c_out, ncols, ckk, &big, false, cols, true, 0.0, &mut dk);
                    acc(*kernel, Tensor::new(self.value(*kernel).shape(), dk).unwrap());
                }
                if self.needs(*input) {
                    let kv = self.value(*kernel);
                    let mut dcols = vec![0.0; ckk * ncols];
                    gemm(ckk, geom.c_out, ncols, kv.data(), true, &big, false, 0.0, &mut dcols);
                    let dx = col2im(&dcols, geom);
                    acc(*input, Tensor::new(self.value(*input).shape(), dx).unwrap());
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = g.shape();
                let (batch, ch) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let n = (batch * spatial) as f64;
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        for p in 0..spatial {
                            let i = (b * ch + c) * spatial + p;
                            dgamma[c] += gd[i] * xhat[i];
                            dbeta[c] += gd[i];
                        }
                    }
                }
                if self.needs(*input) {
                    let mut dx = vec![0.0; gd.len()];
                    for c in 0..ch {
                        // dgamma/dbeta double as Σ dxhat·xhat and Σ dxhat (scaled by gamma).
                        let sum_dxhat = dbeta[c] * gam[c];
                        let sum_dxhat_xhat = dgamma[c] * gam[c];
                        for b in 0..batch {
                            for p in 0..spatial {
                                let i = (b * ch + c) * spatial + p;
                                let dxhat = gd[i] * gam[c];
                                dx[i] = if *train {
                                    inv_std[c] / n
                                        * (n * dxhat - sum_dxhat - xhat[i] * sum_dxhat_xhat)
                                } else {
                                    dxhat * inv_std[c]
                                };
                            }
                        }
                    }
                    acc(*input, Tensor::new(shape, dx).unwrap());
                }
                if self.needs(*gamma) {
                    acc(*gamma, Tensor::new(self.value(*gamma).shape(), dgamma).unwrap());
                }
                if self.needs(*beta) {
                    acc(*beta, Tensor::new(self.value(*beta).shape(), dbeta).unwrap());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                n_q,
                n_kv,
                heads,
                weights,
            } => {
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let d = self.value(*q).shape()[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let gd = g.data();
                let mut dw = vec![0.0; *n_kv];
                for b in 0..*batch {
                    for h in 0..*heads {
                        for i in 0..*n_q {
                            let qo = (b * n_q + i) * d + h * dh;
                            let grow = &gd[qo..qo + dh];
                            let wrow = &weights[((b * heads + h) * n_q + i) * n_kv..][..*n_kv];
                            for j in 0..*n_kv {
                                let vo = (b * n_kv + j) * d + h * dh;
                                dw[j] = grow.iter().zip(&vd[vo..vo + dh]).map(|(x, y)| x * y).sum();
                                for (t, gv) in grow.iter().enumerate() {
                                    dv[vo + t] += wrow[j] * gv;
                                }
                            }
                            let dot: f64 = dw.iter().zip(wrow).map(|(x, y)| x * y).sum();
                            for j in 0..*n_kv {
                                let ds = wrow[j] * (dw[j] - dot) * scale;
                                let ko = (b * n_kv + j) * d + h * dh;
                                for t in 0..dh {
                                    dq[qo + t] += ds * kd[ko + t];
                                    dk[ko + t] += ds * qd[qo + t];
                                }
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    acc(*q, Tensor::new(self.value(*q).shape(), dq).unwrap());
                }
                if self.needs(*k) {
                    acc(*k, Tensor::new(self.value(*k).shape(), dk).unwrap());
                }
                if self.needs(*v) {
                    acc(*v, Tensor::new(self.value(*v).shape(), dv).unwrap());
                }
            }
            Op::Nmse { pred, target } => {
                let pv = self.value(*pred);
                let rows = pv.shape()[0];
                let s = g.data()[0];
                let mut d = Vec::with_capacity(pv.len());
                for (p, t) in pv.rows().zip(target.rows()) {
                    let den: f64 = t.iter().map(|b| b * b).sum();
                    let c = 2.0 * s / (den * rows as f64);
                    d.extend(p.iter().zip(t).map(|(a, b)| c * (a - b)));
                }
                acc(*pred, Tensor::new(pv.shape(), d).unwrap());
            }
            Op::WeightedSum { input, weights } => {
                let s = g.data()[0];
                acc(*input, weights.map(|w| w * s).reshape(self.value(*input).shape()).unwrap());
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npos = g.h_out * g.w_out;
    let ncols = g.batch * npos;
    let mut cols = vec![0.0; g.c_in * g.k * g.k * ncols];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                for b in 0..g.batch {
                    let base = ((b * g.c_in) + c) * g.h * g.w;
                    for oi in 0..g.h_out {
                        let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        for oj in 0..g.w_out {
                            let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                            if jj < 0 || jj >= g.w as isize {
                                continue;
                            }
                            cols[row * ncols + b * npos + oi * g.w_out + oj] =
                                x[base + ii as usize * g.w + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npos = g.h_out * g.w_out;
    let ncols = g.batch * npos;
    let mut x = vec![0.0; g.batch * g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                for b in 0..g.batch {
                    let base = ((b * g.c_in) + c) * g.h * g.w;
                    for oi in 0..g.h_out {
                        let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        for oj in 0..g.w_out {
                            let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                            if jj < 0 || jj >= g.w as isize {
                                continue;
                            }
                            x[base + ii as usize * g.w + jj as usize] +=
                                cols[row * ncols + b * npos + oi * g.w_out + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter read on `tape`, summed over repeated reads.
    pub fn param_grads(&self, tape: &Tape) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                match out.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => acc.add_assign(g),
                    None => out.push((*id, g.clone())),
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
