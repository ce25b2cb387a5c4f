//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever its
//! backward rule needs. Nodes only reference earlier nodes, so reverse
//! insertion order is a valid reverse topological order and the tape is
//! acyclic by construction.
//!
//! Leaf gradients accumulate across `backward` calls until `zero_grads`.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, as_matrix, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Floor applied to student probabilities before taking logs in KL terms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    SoftmaxRows {
        x: Var,
        scale: f32,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f32>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRow {
        x: Var,
        row: usize,
    },
    Mse {
        x: Var,
        target: Tensor,
    },
    KlRows {
        x: Var,
        target: Tensor,
        probs: Tensor,
        scale: f32,
    },
    CrossEntropy {
        x: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Ste(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f32>>>,
    visits: Vec<u32>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        self.visits.push(0);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// How many times each node has been processed by `backward`.
    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a), "matmul_bt lhs")?;
        let (p, k2) = as_matrix(self.value(b), "matmul_bt rhs")?;
        if k != k2 {
            return Err(shape_err(
                "matmul_bt inner extents",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let data = tensor::matmul_bt(self.value(a).data(), self.value(b).data(), m, k, p);
        let value = Tensor::new(vec![m, p], data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMulBt(a, b), rg))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(what, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row_bias(self.value(bias))?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total as f32), Op::Sum(x), rg)
    }

    /// Sum of scalar nodes, folded left to right.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let first = *it
            .next()
            .ok_or_else(|| Error::Contract("sum of zero terms".into()))?;
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn softmax_rows(&mut self, x: Var, scale: f32) -> Result<Var> {
        let value = tensor::softmax_rows(self.value(x), scale)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::SoftmaxRows { x, scale }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if d == 0 || tx.rank() == 0 {
            return Err(Error::Dimension("layer norm over an empty axis".into()));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != d || tb.len() != d {
            return Err(shape_err("layer norm affine", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut normalized = vec![0.0f32; tx.len()];
        let mut rstd = vec![0.0f64; rows];
        let mut out = vec![0.0f32; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let denom = var + eps as f64;
            let rs = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] as f64 - mean) * rs;
                normalized[r * d + j] = xh as f32;
                out[r * d + j] = (xh * tg.data()[j] as f64 + tb.data()[j] as f64) as f32;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(tensor::gelu_scalar);
        let rg = self.needs(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, len)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let (m, _) = as_matrix(self.value(*first), "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = as_matrix(self.value(p), "concat")?;
            if pm != m {
                return Err(shape_err("concat rows", self.value(*first).shape(), self.value(p).shape()));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        let rg = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = as_matrix(t, "gather")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Input(format!("row id {id} out of range for {rows} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, d) = as_matrix(t, "select_row")?;
        if row >= m {
            return Err(Error::Index(format!("row {row} of {m}")));
        }
        let value = Tensor::new(vec![1, d], t.row(row).to_vec())?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::SelectRow { x, row }, rg))
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != target.shape() {
            return Err(shape_err("mse", target.shape(), t.shape()));
        }
        let n = t.len().max(1) as f64;
        let total: f64 = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::scalar((total / n) as f32),
            Op::Mse {
                x,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// `Σ_rows KL(target_row ‖ softmax(x_row / scale))` with natural logs.
    ///
    /// `target` holds probability rows. Student probabilities are floored at
    /// [`PROB_FLOOR`] before the log; the gradient ignores the floor.
    pub fn kl_rows(&mut self, x: Var, target: &Tensor, scale: f32) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != target.shape() {
            return Err(shape_err("kl rows", target.shape(), tx.shape()));
        }
        let probs = tensor::softmax_rows(tx, scale)?;
        let c = tx.cols();
        let mut total = 0.0f64;
        for (p_row, q_row) in target.data().chunks(c).zip(probs.data().chunks(c)) {
            for (&p, &q) in p_row.iter().zip(q_row) {
                if p <= 0.0 {
                    continue;
                }
                let q = (q as f64).max(PROB_FLOOR);
                if !(q > 0.0) {
                    return Err(Error::Numeric("non-positive student probability".into()));
                }
                total += p as f64 * ((p as f64).ln() - q.ln());
            }
        }
        if !total.is_finite() {
            return Err(Error::Numeric("KL divergence is not finite".into()));
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::KlRows {
                x,
                target: target.clone(),
                probs,
                scale,
            },
            rg,
        ))
    }

    /// `-ln softmax(x)[label]` for a single logit row.
    pub fn cross_entropy(&mut self, x: Var, label: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != 1 || label >= t.cols() {
            return Err(Error::Input(format!(
                "label {label} for logits of shape {:?}",
                t.shape()
            )));
        }
        let max = t.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = t.data().iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(probs[label].max(f64::MIN_POSITIVE)).ln();
        if !loss.is_finite() {
            return Err(Error::Numeric("cross entropy is not finite".into()));
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(loss as f32), Op::CrossEntropy { x, label, probs }, rg))
    }

    /// Straight-through node: forward value is `quantized`, backward passes
    /// the incoming gradient to `latent` unchanged.
    pub fn ste(&mut self, latent: Var, quantized: Tensor) -> Result<Var> {
        if self.value(latent).shape() != quantized.shape() {
            return Err(shape_err("ste", self.value(latent).shape(), quantized.shape()));
        }
        let rg = self.needs(&[latent]);
        Ok(self.push(quantized, Op::Ste(latent), rg))
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.visits[idx] += 1;
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut send = |v: Var, delta: Vec<f32>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.value(*a), "matmul")?;
                let (_, p) = as_matrix(self.value(*b), "matmul")?;
                if self.requires_grad(*a) {
                    send(*a, tensor::matmul_bt(g, self.value(*b).data(), m, p, k));
                }
                if self.requires_grad(*b) {
                    send(*b, tensor::matmul_at(self.value(*a).data(), g, m, k, p));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = as_matrix(self.value(*a), "matmul_bt")?;
                let (p, _) = as_matrix(self.value(*b), "matmul_bt")?;
                if self.requires_grad(*a) {
                    send(*a, tensor::matmul(g, self.value(*b).data(), m, p, k));
                }
                if self.requires_grad(*b) {
                    send(*b, tensor::matmul_at(g, self.value(*a).data(), m, p, k));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::AddRowBias(x, bias) => {
                send(*x, g.to_vec());
                let c = self.value(*bias).len();
                let mut db = vec![0.0f64; c];
                for row in g.chunks(c) {
                    for (s, v) in db.iter_mut().zip(row) {
                        *s += *v as f64;
                    }
                }
                send(*bias, db.into_iter().map(|v| v as f32).collect());
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::SoftmaxRows { x, scale } => {
                let y = &node.value;
                let c = y.cols();
                let inv = 1.0 / *scale as f64;
                let mut dx = vec![0.0f32; y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let inner: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (yv as f64 * (gv as f64 - inner) * inv) as f32;
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0f64; d];
                let mut dbias = vec![0.0f64; d];
                let mut dx = vec![0.0f32; normalized.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let xh = &normalized[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0f64;
                    let mut mean_dxh_xh = 0.0f64;
                    for j in 0..d {
                        dgain[j] += gr[j] as f64 * xh[j] as f64;
                        dbias[j] += gr[j] as f64;
                        let dxh = gr[j] as f64 * gv[j] as f64;
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j] as f64;
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] as f64 * gv[j] as f64;
                        dx[r * d + j] = (rs * (dxh - mean_dxh - xh[j] as f64 * mean_dxh_xh)) as f32;
                    }
                }
                send(*x, dx);
                send(*gain, dgain.into_iter().map(|v| v as f32).collect());
                send(*bias, dbias.into_iter().map(|v| v as f32).collect());
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                send(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| (gv as f64 * tensor::gelu_grad_scalar(v)) as f32)
                        .collect(),
                );
            }
            Op::SliceCols { x, start } => {
                let (m, n) = as_matrix(self.value(*x), "slice")?;
                let w = node.value.cols();
                let mut dx = vec![0.0f32; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    send(p, dp);
                    offset += w;
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = vec![0.0f32; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                send(*table, dt);
            }
            Op::SelectRow { x, row } => {
                let t = self.value(*x);
                let d = t.cols();
                let mut dx = vec![0.0f32; t.len()];
                dx[row * d..(row + 1) * d].copy_from_slice(g);
                send(*x, dx);
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x).data();
                let n = xv.len().max(1) as f64;
                let k = 2.0 * g[0] as f64 / n;
                send(
                    *x,
                    xv.iter()
                        .zip(target.data())
                        .map(|(&a, &b)| (k * (a as f64 - b as f64)) as f32)
                        .collect(),
                );
            }
            Op::KlRows {
                x,
                target,
                probs,
                scale,
            } => {
                let c = probs.cols();
                let k = g[0] as f64 / *scale as f64;
                let mut dx = vec![0.0f32; probs.len()];
                for ((pr, qr), dr) in target
                    .data()
                    .chunks(c)
                    .zip(probs.data().chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let mass: f64 = pr.iter().map(|&p| p as f64).sum();
                    for ((d, &p), &q) in dr.iter_mut().zip(pr).zip(qr) {
                        *d = (k * (q as f64 * mass - p as f64)) as f32;
                    }
                }
                send(*x, dx);
            }
            Op::CrossEntropy { x, label, probs } => {
                let dx = probs
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| {
                        let y = if j == *label { 1.0 } else { 0.0 };
                        (g[0] as f64 * (p - y)) as f32
                    })
                    .collect();
                send(*x, dx);
            }
            Op::Ste(latent) => send(*latent, g.to_vec()),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[3], &[0.3, -1.0, 2.0]));
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_analytic() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_gradient_hand_case() {
        // d/da sum(a·b) = 1·bᵀ: every row is the row sums of b.
        let mut tape = Tape::new();
        let a = tape.param(Tensor::identity(2));
        let b = tape.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let ab = tape.matmul(a, b).unwrap();
        let loss = tape.sum(ab);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5.0, 9.0, 5.0, 9.0]);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0, 8.0]);
        tape.zero_grads();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn each_node_visited_once_per_backward() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let a = tape.matmul(w, w).unwrap();
        let b = tape.add(a, w).unwrap();
        let c = tape.softmax_rows(b, 1.0).unwrap();
        let d = tape.mul(c, a).unwrap();
        let loss = tape.sum(d);
        tape.backward(loss).unwrap();
        assert!(tape.visit_counts().iter().all(|&v| v == 1));
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4], &[5.0; 4]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let x = tape.param(t(&[2], &[1.0, -1.0]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 0]));
        let g = tape.constant(Tensor::zeros(&[0]));
        let b = tape.constant(Tensor::zeros(&[0]));
        assert!(matches!(tape.layer_norm(x, g, b, 1e-12), Err(Error::Dimension(_))));
    }

    #[test]
    fn ste_passes_gradient_unchanged() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[3], &[0.2, -0.7, 1.4]));
        let q = tape.ste(w, t(&[3], &[0.0, -1.0, 1.0])).unwrap();
        assert_eq!(tape.value(q).data(), &[0.0, -1.0, 1.0]);
        let loss = tape.sum(q);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn kl_rows_matches_hand_sum() {
        let mut tape = Tape::new();
        let s = tape.param(t(&[1, 2], &[0.0, 0.0]));
        let p = t(&[1, 2], &[0.9, 0.1]);
        let kl = tape.kl_rows(s, &p, 1.0).unwrap();
        let expected = 0.9 * (1.8f64).ln() + 0.1 * (0.2f64).ln();
        assert!((tape.value(kl).item().unwrap() as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 2], &[0.0, 0.0]));
        let ce = tape.cross_entropy(x, 1).unwrap();
        assert!((tape.value(ce).item().unwrap() - std::f32::consts::LN_2).abs() < 1e-6);
        tape.backward(ce).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5, -0.5]);
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut tape = Tape::new();
        let table = tape.param(Tensor::zeros(&[3, 2]));
        let rows = tape.gather(table, &[2, 0, 2]).unwrap();
        let loss = tape.sum(rows);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(tape.gather(table, &[3]), Err(Error::Input(_))));
    }
}
