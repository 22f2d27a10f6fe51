//! Operation tape and reverse pass.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep. A node whose inputs all lack
//! `requires_grad` is stored as a constant and keeps no backward state.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::param::{ParamId, ParamStore};
use super::{matmul_dims, shape_str, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleAdd { a: Var, b: Var, alpha: T, beta: T },
    ScaleBy { x: Var, s: Var },
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    /// Accumulated gradient of a leaf across backward calls.
    grad: Option<Vec<T>>,
}

/// Records a forward computation for one backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, format!("expected a matrix, got {}", shape_str(shape)))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor.shape, tensor.data, Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// Records a parameter as a leaf. Each parameter is recorded at most once
    /// per graph; later calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(
            p.tensor.shape.clone(),
            p.tensor.data.clone(),
            Op::Leaf,
            !p.frozen(),
        );
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2("add_bias", self.shape(x))?;
        if self.shape(bias) != [n] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {} does not match {}", shape_str(self.shape(bias)), shape_str(&[m, n])),
            ));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(vec![m, n], out, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    /// `alpha·a + beta·b`
    pub fn scale_add(&mut self, a: Var, b: Var, alpha: T, beta: T) -> Result<Var> {
        self.same_shape("scale_add", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| alpha * x + beta * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::ScaleAdd { a, b, alpha, beta }, rg))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim(
                "scale_by",
                format!("scale must hold one element, got {}", shape_str(self.shape(s))),
            ));
        }
        let c = self.data(s)[0];
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleBy { x, s }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Normalizes each row of `x[m×n]` then applies `gamma[n]`, `beta[n]`.
    /// A zero-variance row normalizes to zeros.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = dims2("layer_norm", self.shape(x))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "affine {} / {} does not match rows of width {n}",
                    shape_str(self.shape(gamma)),
                    shape_str(self.shape(beta))
                ),
            ));
        }
        let eps = T::lit(eps);
        let nf = T::lit(n as f64);
        let xs = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax over the last axis of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Row-wise softmax where `visible[i*n + j]` says whether row `i` may put
    /// mass on column `j`. Rows with nothing visible come out as zeros.
    pub fn masked_softmax(&mut self, x: Var, visible: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let (m, n) = dims2("softmax", self.shape(x))?;
        if let Some(v) = &visible {
            if v.len() != m * n {
                return Err(Error::dim(
                    "softmax",
                    format!("mask of {} entries for a {m}x{n} input", v.len()),
                ));
            }
        }
        let xs = self.data(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let vis = visible.as_ref().map(|v| &v[i * n..(i + 1) * n]);
            kernels::softmax_row(&xs[i * n..(i + 1) * n], vis, &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m, n], out, Op::Softmax(x), rg))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2("embedding", self.shape(table))?;
        if let Some((pos, &bad)) = ids.iter().enumerate().find(|(_, &i)| i >= v) {
            return Err(Error::Vocab {
                target: bad,
                position: pos,
                vocab: v,
            });
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "nothing to concatenate"))?;
        let (_, n) = dims2("concat_rows", self.shape(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2("concat_rows", self.shape(p))?;
            if c != n {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column mismatch {} vs {}", shape_str(self.shape(first)), shape_str(self.shape(p))),
                ));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "nothing to concatenate"))?;
        let (m, _) = dims2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat_cols", self.shape(p))?;
            if r != m {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row mismatch {} vs {}", shape_str(self.shape(first)), shape_str(self.shape(p))),
                ));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_rows", self.shape(x))?;
        if start + len > m {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} out of range for {}", start + len, shape_str(&[m, n])),
            ));
        }
        let out = self.data(x)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, n], out, Op::SliceRows { x, start }, rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_cols", self.shape(x))?;
        if start + len > n {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} out of range for {}", start + len, shape_str(&[m, n])),
            ));
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2("transpose", self.shape(x))?;
        let xs = self.data(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xs[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, m], out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::dim(
                "reshape",
                format!("{} -> {}", shape_str(self.shape(x)), shape_str(&shape)),
            ));
        }
        let out = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    /// Mean of `-log softmax(logits[t])[targets[t]]` over positions with
    /// `mask[t]`. Unmasked positions contribute exactly nothing, their
    /// targets are not even read.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = dims2("masked_cross_entropy", self.shape(logits))?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim(
                "masked_cross_entropy",
                format!(
                    "logits {} with {} targets and {} mask entries",
                    shape_str(&[t, v]),
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptySupervision);
        }
        for (pos, (&tg, &m)) in targets.iter().zip(mask).enumerate() {
            if m && tg >= v {
                return Err(Error::Vocab {
                    target: tg,
                    position: pos,
                    vocab: v,
                });
            }
        }
        let ls = self.data(logits);
        let mut probs = vec![T::zero(); t * v];
        let mut total = T::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &ls[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p /= z;
            }
            total += z.ln() + max - row[targets[i]];
        }
        let loss = total / T::lit(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        Ok(())
    }

    // ----------------------------------------------------------- backward

    /// Propagates d`loss`/d(node) to every node that requires gradients and
    /// adds the result into the leaves' accumulated gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(lv.shape())
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
                let n = nodes[b.0].value.shape[1];
                if let Some(da) = slot(nodes, grads, *a) {
                    kernels::matmul_grad_lhs(g, &nodes[b.0].value.data, da, m, k, n);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    kernels::matmul_grad_rhs(&nodes[a.0].value.data, g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot(nodes, grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = slot(nodes, grads, *bias) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value.data;
                let bv = &nodes[b.0].value.data;
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *c);
                }
            }
            Op::ScaleAdd { a, b, alpha, beta } => {
                if let Some(da) = slot(nodes, grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *alpha);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *beta);
                }
            }
            Op::ScaleBy { x, s } => {
                let c = nodes[s.0].value.data[0];
                let xv = &nodes[x.0].value.data;
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * c);
                }
                if let Some(ds) = slot(nodes, grads, *s) {
                    ds[0] += xv.iter().zip(g).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
            Op::Tanh(x) => {
                let y = &node.value.data;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * (T::one() - yi * yi);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value.data;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi * kernels::gelu_grad(xi);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = nodes[gamma.0].value.numel();
                let gv = &nodes[gamma.0].value.data;
                if let Some(dg) = slot(nodes, grads, *gamma) {
                    for (row, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += row[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = slot(nodes, grads, *beta) {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
                if let Some(dx) = slot(nodes, grads, *x) {
                    let nf = T::lit(n as f64);
                    let mut dh = vec![T::zero(); n];
                    for (i, (row, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..n {
                            dh[j] = row[j] * gv[j];
                            sum_dh += dh[j];
                            sum_dh_h += dh[j] * hrow[j];
                        }
                        let r = rstd[i] / nf;
                        for j in 0..n {
                            dx[i * n + j] += r * (nf * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = node.value.shape[1];
                let y = &node.value.data;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (i, (grow, yrow)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape[1];
                if let Some(dt) = slot(nodes, grads, *table) {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if let Some(dp) = slot(nodes, grads, p) {
                        dp.iter_mut().zip(&g[off..off + len]).for_each(|(a, &b)| *a += b);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape[0];
                let n = node.value.shape[1];
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape[1];
                    if let Some(dp) = slot(nodes, grads, p) {
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g[i * n + col..i * n + col + w])
                                .for_each(|(a, &b)| *a += b);
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.shape[1];
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, &b)| *a += b);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, len) = (node.value.shape[0], node.value.shape[1]);
                let n = nodes[x.0].value.shape[1];
                if let Some(dx) = slot(nodes, grads, *x) {
                    for i in 0..m {
                        dx[i * n + start..i * n + start + len]
                            .iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Transpose(x) => {
                let (n, m) = (node.value.shape[0], node.value.shape[1]);
                if let Some(dx) = slot(nodes, grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = nodes[logits.0].value.shape[1];
                let scale = g[0] / T::lit(*count as f64);
                if let Some(dl) = slot(nodes, grads, *logits) {
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            dl[i * v + j] += probs[i * v + j] * scale;
                        }
                        dl[i * v + targets[i]] -= scale;
                    }
                }
            }
        }
    }
}

/// Gradient buffer of an input, or None when it needs none.
fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, shape: Vec<usize>, data: &[f64]) -> Var {
        g.leaf(Tensor::from_f64(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let mut g = Graph::<f64>::new();
        let eye = leaf(&mut g, vec![2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut g, vec![2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(eye, b).unwrap();
        assert_eq!(g.data(c), &[5.0, 6.0, 7.0, 8.0]);

        let a = leaf(&mut g, vec![2, 3], &[0.0; 6]);
        let b = leaf(&mut g, vec![4, 2], &[0.0; 8]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn sum_and_square_grads() {
        let mut g = Graph::<f64>::new();
        let w = leaf(&mut g, vec![3], &[1.0, 2.0, 3.0]);
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let w = leaf(&mut g, vec![3], &[1.0, 2.0, 3.0]);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0, 6.0]);
        // a second pass accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let w = leaf(&mut g, vec![3], &[1.0, 2.0, 3.0]);
        assert!(matches!(g.backward(w), Err(Error::Rank(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let w = leaf(&mut g, vec![2], &[3.0, 4.0]);
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![1, 4], vec![3.0; 4]).unwrap();
        let gamma = g.constant(vec![4], vec![1.0; 4]).unwrap();
        let beta = g.constant(vec![4], vec![0.0; 4]).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.0; 4]);
    }

    #[test]
    fn softmax_uniform_and_fully_masked_row() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        let y = g.softmax(x).unwrap();
        for &p in g.data(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let vis = Arc::new(vec![true, false, false, false]);
        let y = g.masked_softmax(x, Some(vis)).unwrap();
        assert_eq!(g.data(y), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_errors() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(vec![2, 4], vec![0.0; 8]).unwrap();
        let loss = g.masked_cross_entropy(l, &[1, 3], &[false, true]).unwrap();
        assert!((g.data(loss)[0] - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            g.masked_cross_entropy(l, &[1, 3], &[false, false]),
            Err(Error::EmptySupervision)
        ));
        assert!(matches!(
            g.masked_cross_entropy(l, &[1, 4], &[true, true]),
            Err(Error::Vocab { target: 4, .. })
        ));
        // out-of-range targets at unsupervised positions are never read
        assert!(g.masked_cross_entropy(l, &[99, 0], &[false, true]).is_ok());
    }

    #[test]
    fn concat_slice_transpose_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let t = g.transpose(a).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.data(t), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let c = g.concat_cols(&[a, a]).unwrap();
        assert_eq!(g.shape(c), &[2, 6]);
        let s = g.slice_cols(c, 2, 2).unwrap();
        assert_eq!(g.data(s), &[2.0, 0.0, 5.0, 3.0]);
        let r = g.concat_rows(&[a, a]).unwrap();
        let s = g.slice_rows(r, 1, 2).unwrap();
        assert_eq!(g.data(s), &[3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
        assert!(g.slice_rows(r, 3, 2).is_err());
        assert!(g.concat_rows(&[a, t]).is_err());
    }
}
