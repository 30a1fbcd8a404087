use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{matmul, matmul_nt, matmul_tn};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::exec::ExecMode;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Transpose(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        smoothing: T,
        probs: Vec<T>,
        count: usize,
    },
    Sum(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-use tape. Values are computed eagerly as ops are recorded;
/// [`Graph::backward`] replays the tape once in reverse and accumulates
/// gradients into the owning [`ParamStore`].
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, usize>,
    checked: bool,
    consumed: bool,
    mode: ExecMode,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            checked: false,
            consumed: false,
            mode: ExecMode::default(),
        }
    }

    /// A graph that rejects non-finite inputs to every op.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check_var(v).expect("var from another graph")].value
    }

    fn check_var(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(Error::Tape("variable belongs to a different graph".into()));
        }
        if v.idx >= self.nodes.len() {
            return Err(Error::Tape("variable is no longer on the tape".into()));
        }
        Ok(v.idx)
    }

    fn input(&self, v: Var, op: &'static str) -> Result<usize> {
        if self.consumed {
            return Err(Error::Tape("graph already consumed by backward".into()));
        }
        let i = self.check_var(v)?;
        if self.checked && !self.nodes[i].value.is_finite() {
            return Err(Error::NonFinite(op));
        }
        Ok(i)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Records (once per graph) the current value of a trainable parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&idx) = self.params.get(&id) {
            return Var { graph: self.id, idx };
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), &[]);
        self.params.insert(id, v.idx);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.input(a, "matmul")?, self.input(b, "matmul")?);
        let (m, k) = self.val(ia).dims2("matmul")?;
        let (k2, n) = self.val(ib).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.val(ia).shape(), self.val(ib).shape()));
        }
        let data = matmul(self.mode, self.val(ia).data(), self.val(ib).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(ia, ib), &[ia, ib]))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.input(a, "matmul_nt")?, self.input(b, "matmul_nt")?);
        let (m, k) = self.val(ia).dims2("matmul_nt")?;
        let (n, k2) = self.val(ib).dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.val(ia).shape(), self.val(ib).shape()));
        }
        let data = matmul_nt(self.mode, self.val(ia).data(), self.val(ib).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMulNt(ia, ib), &[ia, ib]))
    }

    /// Elementwise sum of equal shapes, or a trailing-axis bias add when `b`
    /// is one-dimensional with the size of `a`'s last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.input(a, "add")?, self.input(b, "add")?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(out, Op::Add(ia, ib), &[ia, ib]));
        }
        if tb.rank() == 1 && tb.len() == ta.last_dim() {
            let d = tb.len();
            let bias = tb.data();
            let data = ta.data().iter().enumerate().map(|(i, &x)| x + bias[i % d]).collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(out, Op::AddBias(ia, ib), &[ia, ib]));
        }
        Err(Error::shape("add", ta.shape(), tb.shape()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.input(a, "mul")?, self.input(b, "mul")?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(ia, ib), &[ia, ib]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.input(a, "scale")?;
        let c = T::lit(c);
        let out = self.val(ia).map(|x| x * c);
        Ok(self.push(out, Op::Scale(ia, c), &[ia]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.input(a, "softmax")?;
        let t = self.val(ia);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(ia), &[ia]))
    }

    /// Layer normalisation over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let ix = self.input(x, "layer_norm")?;
        let ig = self.input(gamma, "layer_norm")?;
        let ib = self.input(beta, "layer_norm")?;
        let (tx, tg, tb) = (self.val(ix), self.val(ig), self.val(ib));
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let eps = T::lit(T::LN_EPS);
        let dn = T::lit(d as f64);
        let rows = tx.rows();
        let mut xhat = Vec::with_capacity(tx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            &[ix, ig, ib],
        ))
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.input(table, "embedding")?;
        let (v, d) = self.val(it).dims2("embedding")?;
        if ids.is_empty() {
            return Err(Error::InvalidTensor("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidTensor(format!(
                "embedding id {bad} out of range for vocab {v}"
            )));
        }
        let src = self.val(it).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            &[it],
        ))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.input(a, "relu")?;
        let out = self.val(ia).map(|x| if x > T::zero() { x } else { T::zero() });
        Ok(self.push(out, Op::Relu(ia), &[ia]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.input(a, "sigmoid")?;
        let out = self.val(ia).map(|x| T::one() / (T::one() + (-x).exp()));
        Ok(self.push(out, Op::Sigmoid(ia), &[ia]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.input(a, "tanh")?;
        let out = self.val(ia).map(|x| x.tanh());
        Ok(self.push(out, Op::Tanh(ia), &[ia]))
    }

    /// Concatenates rank-2 tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidTensor("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::InvalidTensor(format!("concat axis {axis} on rank-2 tensors")));
        }
        let idx = parts
            .iter()
            .map(|&p| self.input(p, "concat"))
            .collect::<Result<Vec<_>>>()?;
        let (r0, c0) = self.val(idx[0]).dims2("concat")?;
        let mut dims = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (r, c) = self.val(i).dims2("concat")?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(Error::shape("concat", self.val(idx[0]).shape(), self.val(i).shape()));
            }
            dims.push((r, c));
        }
        let out = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &i in &idx {
                data.extend_from_slice(self.val(i).data());
            }
            Tensor::new(vec![rows, c0], data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for (&i, &(_, c)) in idx.iter().zip(&dims) {
                    data.extend_from_slice(&self.val(i).data()[r * c..(r + 1) * c]);
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                inputs: idx.clone(),
                axis,
            },
            &idx,
        ))
    }

    /// Half-open range `start..end` of a rank-2 tensor along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ix = self.input(x, "slice")?;
        let (r, c) = self.val(ix).dims2("slice")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > extent {
            return Err(Error::InvalidTensor(format!(
                "slice {start}..{end} on axis {axis} of shape [{r}, {c}]"
            )));
        }
        let src = self.val(ix).data();
        let out = if axis == 0 {
            Tensor::new(vec![end - start, c], src[start * c..end * c].to_vec())?
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(r * w);
            for row in src.chunks(c) {
                data.extend_from_slice(&row[start..end]);
            }
            Tensor::new(vec![r, w], data)?
        };
        Ok(self.push(out, Op::Slice { x: ix, axis, start }, &[ix]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.input(x, "transpose")?;
        let (r, c) = self.val(ix).dims2("transpose")?;
        let out = Tensor::new(vec![c, r], super::kernels::transpose(self.val(ix).data(), r, c))?;
        Ok(self.push(out, Op::Transpose(ix), &[ix]))
    }

    /// Mean negative log-likelihood over unmasked rows of `[n, vocab]` logits,
    /// with optional uniform label smoothing. `mask[i] == false` marks padding.
    pub fn cross_entropy_mean(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<&[bool]>,
        smoothing: f64,
    ) -> Result<Var> {
        let il = self.input(logits, "cross_entropy_mean")?;
        let (n, v) = self.val(il).dims2("cross_entropy_mean")?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy_mean", &[n, v], &[targets.len()]));
        }
        let mask: Vec<bool> = match mask {
            Some(m) if m.len() != n => {
                return Err(Error::shape("cross_entropy_mean", &[n, v], &[m.len()]));
            }
            Some(m) => m.to_vec(),
            None => vec![true; n],
        };
        if let Some(&bad) = targets
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t)
            .find(|&&t| t >= v)
        {
            return Err(Error::InvalidTensor(format!("target {bad} out of range for vocab {v}")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::InvalidTensor(
                "cross_entropy_mean with every position masked".into(),
            ));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let eps = T::lit(smoothing);
        let vt = T::lit(v as f64);
        let mut probs = self.val(il).data().to_vec();
        let mut total = T::zero();
        for (i, row) in probs.chunks_mut(v).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            if mask[i] {
                let nll = lse - row[targets[i]];
                let mut loss = (T::one() - eps) * nll;
                if smoothing > 0.0 {
                    let mean_nll = row.iter().map(|&x| lse - x).sum::<T>() / vt;
                    loss = loss + eps * mean_nll;
                }
                total = total + loss;
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let out = Tensor::scalar(total / T::lit(count as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                mask,
                smoothing: eps,
                probs,
                count,
            },
            &[il],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.input(x, "sum")?;
        let s = self.val(ix).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), &[ix]))
    }

    /// Reverse pass from a scalar `loss`. Accumulates (`+=`) into the grads of
    /// every parameter reachable from `loss`, then clears the tape. A second
    /// call on the same graph is rejected.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this graph".into()));
        }
        let il = self.check_var(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mode = self.mode;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::full(self.nodes[il].value.shape(), T::one()));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |j: usize, t: Tensor<T>| {
                if !nodes[j].needs_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.get_mut(*id).grad.add_assign(&g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    if nodes[*a].needs_grad {
                        let da = matmul_nt(mode, g.data(), tb.data(), m, n, k);
                        acc(*a, Tensor::new(vec![m, k], da)?);
                    }
                    if nodes[*b].needs_grad {
                        let db = matmul_tn(mode, ta.data(), g.data(), m, k, n);
                        acc(*b, Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[0];
                    if nodes[*a].needs_grad {
                        let da = matmul(mode, g.data(), tb.data(), m, n, k);
                        acc(*a, Tensor::new(vec![m, k], da)?);
                    }
                    if nodes[*b].needs_grad {
                        let db = matmul_tn(mode, g.data(), ta.data(), m, n, k);
                        acc(*b, Tensor::new(vec![n, k], db)?);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddBias(a, b) => {
                    let d = nodes[*b].value.len();
                    let mut db = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (s, &x) in db.iter_mut().zip(row) {
                            *s = *s + x;
                        }
                    }
                    acc(*b, Tensor::new(vec![d], db)?);
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let da = zip_map(&g, tb, |x, y| x * y);
                    let db = zip_map(&g, ta, |x, y| x * y);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Scale(a, c) => acc(*a, g.map(|x| x * *c)),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let d = y.last_dim();
                    let mut dx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                        let dot = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>();
                        dx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                    }
                    acc(*a, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gam = nodes[*gamma].value.data();
                    let d = gam.len();
                    let dn = T::lit(d as f64);
                    let mut dgamma = vec![T::zero(); d];
                    let mut dbeta = vec![T::zero(); d];
                    let mut dx = Vec::with_capacity(g.len());
                    let mut dxhat = vec![T::zero(); d];
                    for ((gr, hr), &r) in g.data().chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        for j in 0..d {
                            dgamma[j] = dgamma[j] + gr[j] * hr[j];
                            dbeta[j] = dbeta[j] + gr[j];
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                        let mean_dh = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        dx.extend((0..d).map(|j| r * (dxhat[j] - mean_d - hr[j] * mean_dh)));
                    }
                    acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
                    acc(*gamma, Tensor::new(vec![d], dgamma)?);
                    acc(*beta, Tensor::new(vec![d], dbeta)?);
                }
                Op::Embedding { table, ids } => {
                    if nodes[*table].needs_grad {
                        let shape = nodes[*table].value.shape().to_vec();
                        let d = shape[1];
                        let mut dt = Tensor::zeros(&shape);
                        let buf = dt.data_mut();
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                buf[id * d + j] = buf[id * d + j] + g.data()[r * d + j];
                            }
                        }
                        acc(*table, dt);
                    }
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    acc(*a, zip_map(&g, y, |gv, yv| if yv > T::zero() { gv } else { T::zero() }));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(*a, zip_map(&g, y, |gv, yv| gv * yv * (T::one() - yv)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(*a, zip_map(&g, y, |gv, yv| gv * (T::one() - yv * yv)));
                }
                Op::Concat { inputs, axis } => {
                    let (rows, cols) = (g.shape()[0], g.shape()[1]);
                    let mut offset = 0;
                    for &j in inputs {
                        let (r, c) = (nodes[j].value.shape()[0], nodes[j].value.shape()[1]);
                        let part = if *axis == 0 {
                            g.data()[offset * cols..(offset + r) * cols].to_vec()
                        } else {
                            let mut p = Vec::with_capacity(r * c);
                            for row in 0..rows {
                                p.extend_from_slice(&g.data()[row * cols + offset..row * cols + offset + c]);
                            }
                            p
                        };
                        offset += if *axis == 0 { r } else { c };
                        acc(j, Tensor::new(vec![r, c], part)?);
                    }
                }
                Op::Slice { x, axis, start } => {
                    if !nodes[*x].needs_grad {
                        continue;
                    }
                    let shape = nodes[*x].value.shape().to_vec();
                    let c = shape[1];
                    let dx = grads[*x].get_or_insert_with(|| Tensor::zeros(&shape));
                    let buf = dx.data_mut();
                    let (gr, gc) = (g.shape()[0], g.shape()[1]);
                    for row in 0..gr {
                        let (r, c0) = if *axis == 0 { (start + row, 0) } else { (row, *start) };
                        let dst = &mut buf[r * c + c0..r * c + c0 + gc];
                        for (d, &v) in dst.iter_mut().zip(&g.data()[row * gc..(row + 1) * gc]) {
                            *d = *d + v;
                        }
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    acc(*x, Tensor::new(vec![c, r], super::kernels::transpose(g.data(), r, c))?);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    smoothing,
                    probs,
                    count,
                } => {
                    let shape = nodes[*logits].value.shape().to_vec();
                    let v = shape[1];
                    let scale = g.item() / T::lit(*count as f64);
                    let off = *smoothing / T::lit(v as f64);
                    let mut dl = vec![T::zero(); probs.len()];
                    for (i, (row, out)) in probs.chunks(v).zip(dl.chunks_mut(v)).enumerate() {
                        if !mask[i] {
                            continue;
                        }
                        for (j, (o, &p)) in out.iter_mut().zip(row).enumerate() {
                            let mut q = off;
                            if j == targets[i] {
                                q = q + (T::one() - *smoothing);
                            }
                            *o = (p - q) * scale;
                        }
                    }
                    acc(*logits, Tensor::new(shape, dl)?);
                }
                Op::Sum(x) => {
                    let shape = nodes[*x].value.shape().to_vec();
                    acc(*x, Tensor::full(&shape, g.item()));
                }
            }
        }
        self.nodes.clear();
        self.params.clear();
        self.consumed = true;
        Ok(())
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map: shapes already validated")
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}
