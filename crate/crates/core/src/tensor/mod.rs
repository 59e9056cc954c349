//! Minimal dense-tensor engine with reverse-mode differentiation and the
//! attention building blocks the flux surrogate needs.
//!
//! Tensors are row-major 64-bit floats with up to three axes
//! (batch, sequence, feature). A [`Tape`] records executed ops so
//! [`Tape::backward`] can replay them in exact reverse order; parameters
//! live in a [`ParamStore`] with Adam moments and a binary checkpoint
//! format.

use crate::error::CoreError;
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense row-major tensor, rank 1..=3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, CoreError> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(CoreError::Shape(format!("rank must be 1..=3, got {:?}", shape)));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() || numel == 0 {
            return Err(CoreError::Shape(format!(
                "shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        self.data[0]
    }

    /// (rows, cols) view of the last two axes; rank-1 is a single row,
    /// rank-3 folds batch into rows only when explicitly allowed.
    fn as_2d(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => (self.shape[0] * self.shape[1], self.shape[2]),
        }
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    beta: f64,
    transpose_a: bool,
    transpose_b: bool,
) {
    let (rsa, csa) = if transpose_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf,
    Matmul,
    Add,
    AddBias,
    Sub,
    Mul,
    Scale(f64),
    Offset(f64),
    Tanh,
    Relu,
    Softplus,
    LayerNorm,
    Softmax,
    Transpose,
    SliceCols(usize, usize),
    ConcatCols,
    Sum,
    Mean,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Wengert list: ops recorded in execution order, replayed in reverse for
/// gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub type NodeId = usize;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, vec![], t, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, inputs, value, requires_grad });
        self.nodes.len() - 1
    }

    fn finite_checked(
        &mut self,
        op: Op,
        inputs: Vec<usize>,
        value: Tensor,
    ) -> Result<NodeId, CoreError> {
        if !value.all_finite() {
            return Err(CoreError::Training(format!("non-finite value out of {op:?}")));
        }
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(op, inputs, value, rg))
    }

    /// Matrix product. Supported shapes: (m,k)x(k,n); batched
    /// (b,m,k)x(b,k,n); and broadcast (b,m,k)x(k,n).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, CoreError> {
        let (sa, sb) = (self.nodes[a].value.shape.clone(), self.nodes[b].value.shape.clone());
        let value = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => {
                let mut out = vec![0.0; m * n];
                dgemm(*m, *k, *n, &self.nodes[a].value.data, &self.nodes[b].value.data, &mut out, 0.0, false, false);
                Tensor { shape: vec![*m, *n], data: out }
            }
            ([bt, m, k], [k2, n]) if k == k2 => {
                let mut out = vec![0.0; bt * m * n];
                dgemm(bt * m, *k, *n, &self.nodes[a].value.data, &self.nodes[b].value.data, &mut out, 0.0, false, false);
                Tensor { shape: vec![*bt, *m, *n], data: out }
            }
            ([bt, m, k], [bt2, k2, n]) if k == k2 && bt == bt2 => {
                let mut out = vec![0.0; bt * m * n];
                for ib in 0..*bt {
                    dgemm(
                        *m,
                        *k,
                        *n,
                        &self.nodes[a].value.data[ib * m * k..],
                        &self.nodes[b].value.data[ib * k * n..],
                        &mut out[ib * m * n..(ib + 1) * m * n],
                        0.0,
                        false,
                        false,
                    );
                }
                Tensor { shape: vec![*bt, *m, *n], data: out }
            }
            _ => {
                return Err(CoreError::Shape(format!(
                    "matmul: incompatible shapes {sa:?} x {sb:?}"
                )))
            }
        };
        self.finite_checked(Op::Matmul, vec![a, b], value)
    }

    fn elementwise_pair(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, CoreError> {
        if self.nodes[a].value.shape != self.nodes[b].value.shape {
            return Err(CoreError::Shape(format!(
                "{op:?}: shape mismatch {:?} vs {:?}",
                self.nodes[a].value.shape, self.nodes[b].value.shape
            )));
        }
        let data: Vec<f64> = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor { shape: self.nodes[a].value.shape.clone(), data };
        self.finite_checked(op, vec![a, b], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, CoreError> {
        self.elementwise_pair(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, CoreError> {
        self.elementwise_pair(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, CoreError> {
        self.elementwise_pair(Op::Mul, a, b, |x, y| x * y)
    }

    /// Add a rank-1 bias of length d to every row of x (last axis d).
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, CoreError> {
        let d = *self.nodes[x].value.shape.last().unwrap();
        if self.nodes[bias].value.shape != vec![d] {
            return Err(CoreError::Shape(format!(
                "add_bias: bias {:?} does not match last axis {d}",
                self.nodes[bias].value.shape
            )));
        }
        let mut data = self.nodes[x].value.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += self.nodes[bias].value.data[i % d];
        }
        let value = Tensor { shape: self.nodes[x].value.shape.clone(), data };
        self.finite_checked(Op::AddBias, vec![x, bias], value)
    }

    fn map(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId, CoreError> {
        let data: Vec<f64> = self.nodes[x].value.data.iter().map(|&v| f(v)).collect();
        let value = Tensor { shape: self.nodes[x].value.shape.clone(), data };
        self.finite_checked(op, vec![x], value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, CoreError> {
        self.map(Op::Scale(c), x, |v| c * v)
    }

    pub fn offset(&mut self, x: NodeId, c: f64) -> Result<NodeId, CoreError> {
        self.map(Op::Offset(c), x, |v| v + c)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, CoreError> {
        self.map(Op::Tanh, x, f64::tanh)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, CoreError> {
        self.map(Op::Relu, x, |v| v.max(0.0))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, CoreError> {
        self.map(Op::Softplus, x, |v| v.max(0.0) + (-v.abs()).exp().ln_1p())
    }

    /// Normalize the last axis to zero mean, unit variance (epsilon 1e-5);
    /// affine gain/bias are applied separately via mul/add_bias.
    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId, CoreError> {
        let (rows, d) = self.nodes[x].value.as_2d();
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &self.nodes[x].value.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for i in 0..d {
                data[r * d + i] = (row[i] - mean) * inv;
            }
        }
        let value = Tensor { shape: self.nodes[x].value.shape.clone(), data };
        self.finite_checked(Op::LayerNorm, vec![x], value)
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, CoreError> {
        let (rows, d) = self.nodes[x].value.as_2d();
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &self.nodes[x].value.data[r * d..(r + 1) * d];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in 0..d {
                // clamp keeps exp() above the subnormal underflow edge so
                // weights stay strictly positive even for huge logit gaps
                let e = (row[i] - mx).max(-700.0).exp();
                data[r * d + i] = e;
                sum += e;
            }
            for i in 0..d {
                data[r * d + i] /= sum;
            }
        }
        let value = Tensor { shape: self.nodes[x].value.shape.clone(), data };
        self.finite_checked(Op::Softmax, vec![x], value)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, CoreError> {
        let value = transpose_last_two(&self.nodes[x].value)?;
        self.finite_checked(Op::Transpose, vec![x], value)
    }

    /// Columns [start, end) of the last axis.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, CoreError> {
        let shape = self.nodes[x].value.shape.clone();
        let d = *shape.last().unwrap();
        if start >= end || end > d {
            return Err(CoreError::Shape(format!("slice_cols [{start},{end}) out of {d}")));
        }
        let (rows, _) = self.nodes[x].value.as_2d();
        let w = end - start;
        let mut data = vec![0.0; rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w]
                .copy_from_slice(&self.nodes[x].value.data[r * d + start..r * d + end]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = w;
        let value = Tensor { shape: out_shape, data };
        self.finite_checked(Op::SliceCols(start, end), vec![x], value)
    }

    /// Concatenate along the last axis; all leading axes must match.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, CoreError> {
        if parts.is_empty() {
            return Err(CoreError::Shape("concat_cols of no tensors".into()));
        }
        let lead: Vec<usize> = {
            let s = &self.nodes[parts[0]].value.shape;
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = &self.nodes[p].value.shape;
            if s[..s.len() - 1] != lead[..] {
                return Err(CoreError::Shape(format!(
                    "concat_cols: leading axes differ, {:?} vs {:?}",
                    lead,
                    &s[..s.len() - 1]
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product::<usize>().max(1);
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let w = widths[pi];
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&self.nodes[p].value.data[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let mut out_shape = lead;
        out_shape.push(total);
        let value = Tensor { shape: out_shape, data };
        self.finite_checked(Op::ConcatCols, parts.to_vec(), value)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, CoreError> {
        let value = Tensor::scalar(self.nodes[x].value.data.iter().sum());
        self.finite_checked(Op::Sum, vec![x], value)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, CoreError> {
        let n = self.nodes[x].value.numel() as f64;
        let value = Tensor::scalar(self.nodes[x].value.data.iter().sum::<f64>() / n);
        self.finite_checked(Op::Mean, vec![x], value)
    }

    /// x @ w + b.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, CoreError> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Mean of squared entries: mean((a - b)^2).
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, CoreError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// softmax(Q Kᵀ / sqrt(d_K)) V. Q: (b, s_q, d_K), K: (b, s_k, d_K),
    /// V: (b, s_k, d_V); 2-D operands are treated as batch 1.
    pub fn scaled_dot_product_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
    ) -> Result<NodeId, CoreError> {
        let dk_q = *self.nodes[q].value.shape.last().unwrap();
        let dk_k = *self.nodes[k].value.shape.last().unwrap();
        if dk_q != dk_k {
            return Err(CoreError::Shape(format!(
                "attention: d_K mismatch, Q has {dk_q}, K has {dk_k}"
            )));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (dk_q as f64).sqrt())?;
        let weights = self.softmax(scaled)?;
        self.matmul(weights, v)
    }

    /// Multi-head attention: per-head projections, scaled dot-product
    /// attention, concatenation, output projection. With h = 1 and
    /// identity projections this reduces exactly to
    /// `scaled_dot_product_attention`.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &mut self,
        q_in: NodeId,
        k_in: NodeId,
        v_in: NodeId,
        heads: usize,
        w_q: NodeId,
        w_k: NodeId,
        w_v: NodeId,
        w_o: NodeId,
    ) -> Result<NodeId, CoreError> {
        let d_model = *self.nodes[q_in].value.shape.last().unwrap();
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(CoreError::Config(format!(
                "d_model {d_model} not divisible by heads {heads}"
            )));
        }
        let dh = d_model / heads;
        let q = self.matmul(q_in, w_q)?;
        let k = self.matmul(k_in, w_k)?;
        let v = self.matmul(v_in, w_v)?;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qs = self.slice_cols(q, h * dh, (h + 1) * dh)?;
            let ks = self.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vs = self.slice_cols(v, h * dh, (h + 1) * dh)?;
            head_outs.push(self.scaled_dot_product_attention(qs, ks, vs)?);
        }
        let cat = self.concat_cols(&head_outs)?;
        self.matmul(cat, w_o)
    }

    /// Reverse-mode gradients of a scalar loss with respect to every node.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<Option<Tensor>>, CoreError> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(CoreError::Shape("backward: loss must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: usize, shape: &[usize], contrib: &[f64]) {
        match &mut grads[id] {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot => {
                *slot = Some(Tensor { shape: shape.to_vec(), data: contrib.to_vec() });
            }
        }
    }

    fn backprop_node(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), CoreError> {
        let node = &self.nodes[id];
        let needs = |tape: &Tape, nid: usize| tape.nodes[nid].requires_grad;
        match node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (sa, sb) = (&self.nodes[a].value.shape, &self.nodes[b].value.shape);
                match (sa.len(), sb.len()) {
                    (2, 2) | (3, 3) => {
                        let batches = if sa.len() == 3 { sa[0] } else { 1 };
                        let (m, k) = if sa.len() == 3 { (sa[1], sa[2]) } else { (sa[0], sa[1]) };
                        let n = *sb.last().unwrap();
                        if needs(self, a) {
                            let mut da = vec![0.0; batches * m * k];
                            for ib in 0..batches {
                                dgemm(m, n, k, &g.data[ib * m * n..], &self.nodes[b].value.data[ib * k * n..], &mut da[ib * m * k..(ib + 1) * m * k], 0.0, false, true);
                            }
                            Self::accumulate(grads, a, sa, &da);
                        }
                        if needs(self, b) {
                            let mut db = vec![0.0; batches * k * n];
                            for ib in 0..batches {
                                dgemm(k, m, n, &self.nodes[a].value.data[ib * m * k..], &g.data[ib * m * n..], &mut db[ib * k * n..(ib + 1) * k * n], 0.0, true, false);
                            }
                            Self::accumulate(grads, b, sb, &db);
                        }
                    }
                    (3, 2) => {
                        let (bt, m, k) = (sa[0], sa[1], sa[2]);
                        let n = sb[1];
                        if needs(self, a) {
                            let mut da = vec![0.0; bt * m * k];
                            dgemm(bt * m, n, k, &g.data, &self.nodes[b].value.data, &mut da, 0.0, false, true);
                            Self::accumulate(grads, a, sa, &da);
                        }
                        if needs(self, b) {
                            // dB sums over the batch axis
                            let mut db = vec![0.0; k * n];
                            dgemm(k, bt * m, n, &self.nodes[a].value.data, &g.data, &mut db, 0.0, true, false);
                            Self::accumulate(grads, b, sb, &db);
                        }
                    }
                    _ => unreachable!("matmul forward validated shapes"),
                }
            }
            Op::Add => {
                for &i in &node.inputs {
                    if needs(self, i) {
                        Self::accumulate(grads, i, &g.shape, &g.data);
                    }
                }
            }
            Op::AddBias => {
                let (x, bias) = (node.inputs[0], node.inputs[1]);
                if needs(self, x) {
                    Self::accumulate(grads, x, &g.shape, &g.data);
                }
                if needs(self, bias) {
                    let d = self.nodes[bias].value.shape[0];
                    let mut db = vec![0.0; d];
                    for (i, v) in g.data.iter().enumerate() {
                        db[i % d] += v;
                    }
                    Self::accumulate(grads, bias, &[d], &db);
                }
            }
            Op::Sub => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(self, a) {
                    Self::accumulate(grads, a, &g.shape, &g.data);
                }
                if needs(self, b) {
                    let neg: Vec<f64> = g.data.iter().map(|v| -v).collect();
                    Self::accumulate(grads, b, &g.shape, &neg);
                }
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(self, a) {
                    let da: Vec<f64> =
                        g.data.iter().zip(&self.nodes[b].value.data).map(|(&gv, &bv)| gv * bv).collect();
                    Self::accumulate(grads, a, &g.shape, &da);
                }
                if needs(self, b) {
                    let db: Vec<f64> =
                        g.data.iter().zip(&self.nodes[a].value.data).map(|(&gv, &av)| gv * av).collect();
                    Self::accumulate(grads, b, &g.shape, &db);
                }
            }
            Op::Scale(c) => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let dx: Vec<f64> = g.data.iter().map(|v| c * v).collect();
                    Self::accumulate(grads, x, &g.shape, &dx);
                }
            }
            Op::Offset(_) => {
                let x = node.inputs[0];
                if needs(self, x) {
                    Self::accumulate(grads, x, &g.shape, &g.data);
                }
            }
            Op::Tanh => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&node.value.data)
                        .map(|(&gv, &y)| gv * (1.0 - y * y))
                        .collect();
                    Self::accumulate(grads, x, &g.shape, &dx);
                }
            }
            Op::Relu => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.nodes[x].value.data)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    Self::accumulate(grads, x, &g.shape, &dx);
                }
            }
            Op::Softplus => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.nodes[x].value.data)
                        .map(|(&gv, &xv)| gv / (1.0 + (-xv).exp()))
                        .collect();
                    Self::accumulate(grads, x, &g.shape, &dx);
                }
            }
            Op::LayerNorm => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let (rows, d) = self.nodes[x].value.as_2d();
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let xr = &self.nodes[x].value.data[r * d..(r + 1) * d];
                        let yr = &node.value.data[r * d..(r + 1) * d];
                        let gr = &g.data[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let g_mean = gr.iter().sum::<f64>() / d as f64;
                        let gy_mean =
                            gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                        for i in 0..d {
                            dx[r * d + i] = inv * (gr[i] - g_mean - yr[i] * gy_mean);
                        }
                    }
                    Self::accumulate(grads, x, &self.nodes[x].value.shape, &dx);
                }
            }
            Op::Softmax => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let (rows, d) = node.value.as_2d();
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let yr = &node.value.data[r * d..(r + 1) * d];
                        let gr = &g.data[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for i in 0..d {
                            dx[r * d + i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    Self::accumulate(grads, x, &self.nodes[x].value.shape, &dx);
                }
            }
            Op::Transpose => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let gt = transpose_last_two(g)?;
                    Self::accumulate(grads, x, &self.nodes[x].value.shape, &gt.data);
                }
            }
            Op::SliceCols(start, end) => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let d = *self.nodes[x].value.shape.last().unwrap();
                    let (rows, w) = node.value.as_2d();
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        dx[r * d + start..r * d + end].copy_from_slice(&g.data[r * w..(r + 1) * w]);
                    }
                    Self::accumulate(grads, x, &self.nodes[x].value.shape, &dx);
                }
            }
            Op::ConcatCols => {
                let (rows, total) = node.value.as_2d();
                let mut off = 0;
                for &p in &node.inputs {
                    let w = *self.nodes[p].value.shape.last().unwrap();
                    if needs(self, p) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data[r * total + off..r * total + off + w]);
                        }
                        Self::accumulate(grads, p, &self.nodes[p].value.shape, &dp);
                    }
                    off += w;
                }
            }
            Op::Sum => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let dx = vec![g.data[0]; self.nodes[x].value.numel()];
                    Self::accumulate(grads, x, &self.nodes[x].value.shape, &dx);
                }
            }
            Op::Mean => {
                let x = node.inputs[0];
                if needs(self, x) {
                    let n = self.nodes[x].value.numel();
                    let dx = vec![g.data[0] / n as f64; n];
                    Self::accumulate(grads, x, &self.nodes[x].value.shape, &dx);
                }
            }
        }
        Ok(())
    }
}

fn transpose_last_two(t: &Tensor) -> Result<Tensor, CoreError> {
    match t.shape.as_slice() {
        [m, n] => {
            let mut data = vec![0.0; m * n];
            for r in 0..*m {
                for c in 0..*n {
                    data[c * m + r] = t.data[r * n + c];
                }
            }
            Ok(Tensor { shape: vec![*n, *m], data })
        }
        [b, m, n] => {
            let mut data = vec![0.0; b * m * n];
            for ib in 0..*b {
                for r in 0..*m {
                    for c in 0..*n {
                        data[ib * m * n + c * m + r] = t.data[ib * m * n + r * n + c];
                    }
                }
            }
            Ok(Tensor { shape: vec![*b, *n, *m], data })
        }
        s => Err(CoreError::Shape(format!("transpose needs rank >= 2, got {s:?}"))),
    }
}

/// Named parameters with Adam first/second moments.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    t_step: u64,
}

pub type ParamId = usize;

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: vec![], values: vec![], m: vec![], v: vec![], grads: vec![], t_step: 0 }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, CoreError> {
        if self.names.iter().any(|n| n == name) {
            return Err(CoreError::Config(format!("duplicate parameter name '{name}'")));
        }
        self.names.push(name.to_string());
        self.m.push(Tensor::zeros(value.shape.clone()));
        self.v.push(Tensor::zeros(value.shape.clone()));
        self.grads.push(None);
        self.values.push(value);
        Ok(self.values.len() - 1)
    }

    /// Uniform(-limit, limit) init with limit = sqrt(6 / (fan_in + fan_out)).
    pub fn add_xavier(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut SplitMix64,
    ) -> Result<ParamId, CoreError> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-limit, limit)).collect();
        self.add(name, Tensor::new(vec![rows, cols], data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId, CoreError> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Bind a parameter into a tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> NodeId {
        tape.leaf(self.values[id].clone(), true)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<(), CoreError> {
        if grad.shape != self.values[id].shape {
            return Err(CoreError::Shape(format!(
                "grad shape {:?} does not match parameter '{}' {:?}",
                grad.shape, self.names[id], self.values[id].shape
            )));
        }
        match &mut self.grads[id] {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(&grad.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Bias-corrected Adam update over all parameters with populated
    /// gradients; an error if no backward pass populated any.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<(), CoreError> {
        if self.grads.iter().all(|g| g.is_none()) {
            return Err(CoreError::Training(
                "adam_step called before any backward pass populated gradients".into(),
            ));
        }
        self.t_step += 1;
        let t = self.t_step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..self.values.len() {
            let Some(g) = &self.grads[i] else { continue };
            for j in 0..g.data.len() {
                let gv = g.data[j];
                self.m[i].data[j] = beta1 * self.m[i].data[j] + (1.0 - beta1) * gv;
                self.v[i].data[j] = beta2 * self.v[i].data[j] + (1.0 - beta2) * gv * gv;
                let m_hat = self.m[i].data[j] / bc1;
                let v_hat = self.v[i].data[j] / bc2;
                self.values[i].data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Binary checkpoint: 8-byte little-endian header length, JSON header
    /// (mandatory version, parameter names/shapes/offsets in elements),
    /// then all values as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        self.save_with_meta(path, serde_json::Value::Null)
    }

    /// Like [`ParamStore::save`] with an arbitrary JSON `meta` blob stored
    /// in the header (model config, normalizer hash, ...).
    pub fn save_with_meta(&self, path: &Path, meta: serde_json::Value) -> Result<(), CoreError> {
        let mut params = Vec::with_capacity(self.values.len());
        let mut offset = 0usize;
        for (name, value) in self.names.iter().zip(&self.values) {
            params.push(CheckpointParam {
                name: name.clone(),
                shape: value.shape.clone(),
                offset,
            });
            offset += value.numel();
        }
        let header = CheckpointHeader { version: CHECKPOINT_VERSION, params, total: offset, meta };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for value in &self.values {
            for v in &value.data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        Ok(Self::load_with_meta(path)?.0)
    }

    pub fn load_with_meta(path: &Path) -> Result<(Self, serde_json::Value), CoreError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len8 = [0u8; 8];
        f.read_exact(&mut len8)?;
        let hlen = u64::from_le_bytes(len8) as usize;
        let mut hbytes = vec![0u8; hlen];
        f.read_exact(&mut hbytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&hbytes)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(CoreError::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let mut blob = vec![0u8; header.total * 8];
        f.read_exact(&mut blob)?;
        let mut store = ParamStore::new();
        for p in &header.params {
            let numel: usize = p.shape.iter().product();
            if p.offset + numel > header.total {
                return Err(CoreError::Config(format!(
                    "checkpoint parameter '{}' overruns data block",
                    p.name
                )));
            }
            let data: Vec<f64> = (0..numel)
                .map(|i| {
                    let b = &blob[(p.offset + i) * 8..(p.offset + i + 1) * 8];
                    f64::from_le_bytes(b.try_into().unwrap())
                })
                .collect();
            store.add(&p.name, Tensor::new(p.shape.clone(), data)?)?;
        }
        Ok((store, header.meta))
    }

    /// SHA-256 over the serialized parameter values (names, shapes, bits).
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for d in &value.shape {
                h.update(d.to_le_bytes());
            }
            for v in &value.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    params: Vec<CheckpointParam>,
    total: usize,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Max relative error (1e-7 absolute floor) between reverse-mode and
/// central finite-difference gradients of `build`'s scalar output with
/// respect to a random input of the given shape.
pub fn gradcheck<F>(shape: &[usize], seed: u64, build: F) -> Result<f64, CoreError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, CoreError>,
{
    let mut rng = SplitMix64::new(seed);
    let numel: usize = shape.iter().product();
    let base: Vec<f64> = (0..numel).map(|_| rng.uniform(-1.5, 1.5)).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(shape.to_vec(), base.clone())?, true);
    let loss = build(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads[x]
        .as_ref()
        .ok_or_else(|| CoreError::Training("gradcheck: input received no gradient".into()))?
        .clone();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..numel {
        let eval = |data: &[f64]| -> Result<f64, CoreError> {
            let mut t = Tape::new();
            let xi = t.leaf(Tensor::new(shape.to_vec(), data.to_vec())?, true);
            let l = build(&mut t, xi)?;
            Ok(t.value(l).scalar_value())
        };
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let an = analytic.data[i];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    Ok(worst)
}
