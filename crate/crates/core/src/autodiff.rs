//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena. Every operation evaluates eagerly and
//! records its parents, so node ids are already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Parameters are bound by name
//! with [`Graph::param`]; only trainable ones receive gradients.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    MaskRows(Var, Vec<bool>),
    MulConst(Var, Vec<f64>),
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
        count: f64,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    PadRows(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    SoftmaxCe {
        logits: Var,
        class: usize,
        probs: Vec<f64>,
    },
    SigmoidBce {
        logit: Var,
        target: f64,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::MaskedSoftmax(a)
            | Op::MaskRows(a, _)
            | Op::MulConst(a, _)
            | Op::PadRows(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::MaskedMean { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::SigmoidBce { logit, .. } => vec![*logit],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    /// Adds `other` into `self` entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Define-by-run computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter. Binding the same name twice returns the same node.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.bound.get(&p.name) {
            return v;
        }
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param(p.name.clone()),
            needs_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(p.name.clone(), v);
        v
    }

    /// Copies the value of `v` into a fresh constant, severing gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        check(k == k2, || format!("matmul {m}x{k} by {k2}x{n}"))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        check(k == k2, || format!("matmul_bt {m}x{k} by ({n}x{k2})^T"))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        check(self.shape(a) == self.shape(b), || {
            format!("elementwise {:?} vs {:?}", self.shape(a), self.shape(b))
        })?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let (r, c) = self.shape(a);
        Ok(self.push(Tensor::matrix(r, c, data)?, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        check(self.shape(row) == (1, c), || {
            format!("add_row {r}x{c} with {:?}", self.shape(row))
        })?;
        let rv = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|x| x.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        self.push(Tensor::matrix(r, c, data).expect("shape kept"), Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        self.push(Tensor::matrix(r, c, data).expect("shape kept"), Op::Relu(a))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        check(self.shape(gain) == (1, c) && self.shape(bias) == (1, c), || {
            format!(
                "layer_norm width {c} with gain {:?} bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )
        })?;
        check(eps > 0.0, || "layer_norm eps must be positive".into())?;
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = gv[j] * h + bv[j];
            }
        }
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax along each row, restricted to columns where `mask` is set.
    /// Masked columns get exactly zero; a row with no valid column is all zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(x);
        check(mask.len() == c, || {
            format!("masked_softmax mask length {} vs {c}", mask.len())
        })?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.value(x).data()[i * c..(i + 1) * c];
            softmax_into(row, mask, &mut out[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::MaskedSoftmax(x),
        ))
    }

    /// Zeroes every row whose mask bit is unset.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(x);
        check(mask.len() == r, || {
            format!("mask_rows mask length {} vs {r} rows", mask.len())
        })?;
        let mut data = self.value(x).data().to_vec();
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                data[i * c..(i + 1) * c].fill(0.0);
            }
        }
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::MaskRows(x, mask.to_vec())))
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let (r, c) = self.shape(x);
        check(factors.len() == r * c, || "mul_const shape mismatch".into())?;
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&factors)
            .map(|(a, b)| a * b)
            .collect();
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::MulConst(x, factors)))
    }

    /// `sum_t m_t x_t / sum_t m_t` over rows, as a `1 x cols` row.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(x);
        check(mask.len() == r, || {
            format!("pool mask length {} vs {r} rows", mask.len())
        })?;
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyPool);
        }
        let xv = self.value(x).data();
        let mut sum = vec![0.0; c];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (s, v) in sum.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                *s += v;
            }
        }
        let count = count as f64;
        for s in &mut sum {
            *s /= count;
        }
        Ok(self.push(
            Tensor::row(sum),
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        check(len > 0 && start + len <= c, || {
            format!("slice_cols [{start}, {}) of {c}", start + len)
        })?;
        let xv = self.value(x).data();
        let data = (0..r)
            .flat_map(|i| xv[i * c + start..i * c + start + len].iter().copied())
            .collect();
        Ok(self.push(Tensor::matrix(r, len, data)?, Op::SliceCols { x, start }))
    }

    /// Concatenates along the feature axis; all parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), || "concat of nothing".into())?;
        let r = self.shape(parts[0]).0;
        check(parts.iter().all(|p| self.shape(*p).0 == r), || {
            "concat_cols row mismatch".into()
        })?;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Appends zero rows up to `rows`.
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        check(rows >= r, || format!("pad_rows {r} -> {rows}"))?;
        if rows == r {
            return Ok(x);
        }
        let mut data = self.value(x).data().to_vec();
        data.resize(rows * c, 0.0);
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::PadRows(x)))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(table);
        check(!ids.is_empty() && ids.iter().all(|&i| i < n), || {
            format!("gather ids out of range for table of {n} rows")
        })?;
        let tv = self.value(table);
        let data = ids
            .iter()
            .flat_map(|&i| tv.row_slice(i).iter().copied())
            .collect::<Vec<_>>();
        Ok(self.push(
            Tensor::matrix(ids.len(), c, data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `-log softmax(logits)[class]` for a `1 x C` logit row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, class: usize) -> Result<Var> {
        let (r, c) = self.shape(logits);
        check(r == 1 && class < c, || {
            format!("softmax_cross_entropy class {class} for {r}x{c} logits")
        })?;
        let lv = self.value(logits).data();
        let max = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = lv.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - lv[class];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                class,
                probs,
            },
        ))
    }

    /// Binary cross-entropy on a `1 x 1` logit, `target` in {0, 1}.
    pub fn sigmoid_bce(&mut self, logit: Var, target: f64) -> Result<Var> {
        check(self.shape(logit) == (1, 1), || "sigmoid_bce expects a 1x1 logit".into())?;
        let s = self.value(logit).data()[0];
        // -log sigma(s) = softplus(-s), -log(1 - sigma(s)) = softplus(s)
        let loss = target * softplus(-s) + (1.0 - target) * softplus(s);
        Ok(self.push(Tensor::scalar(loss), Op::SigmoidBce { logit, target }))
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let (r, c) = node.value.dims2();
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    let mut single = Gradients::default();
                    single.insert(name.clone(), t);
                    out.accumulate(&single);
                }
                Op::MatMul(a, b) => {
                    let (_, k) = self.shape(*a);
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    if self.needs_grad(*a) {
                        // dA = dY * B^T
                        let mut da = vec![0.0; r * k];
                        for i in 0..r {
                            let grow = &g[i * c..(i + 1) * c];
                            for p in 0..k {
                                let brow = &bv[p * c..(p + 1) * c];
                                da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        acc(&mut grads, *a, da);
                    }
                    if self.needs_grad(*b) {
                        // dB = A^T * dY
                        let mut db = vec![0.0; k * c];
                        for i in 0..r {
                            let grow = &g[i * c..(i + 1) * c];
                            for p in 0..k {
                                let x = av[i * k + p];
                                let drow = &mut db[p * c..(p + 1) * c];
                                for (d, y) in drow.iter_mut().zip(grow) {
                                    *d += x * y;
                                }
                            }
                        }
                        acc(&mut grads, *b, db);
                    }
                }
                Op::MatMulBt(a, b) => {
                    // Y = A B^T, A: r x k, B: c x k
                    let (_, k) = self.shape(*a);
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    if self.needs_grad(*a) {
                        let mut da = vec![0.0; r * k];
                        for i in 0..r {
                            let drow = &mut da[i * k..(i + 1) * k];
                            for j in 0..c {
                                let gij = g[i * c + j];
                                for (d, y) in drow.iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                    *d += gij * y;
                                }
                            }
                        }
                        acc(&mut grads, *a, da);
                    }
                    if self.needs_grad(*b) {
                        let mut db = vec![0.0; c * k];
                        for i in 0..r {
                            let arow = &av[i * k..(i + 1) * k];
                            for j in 0..c {
                                let gij = g[i * c + j];
                                for (d, x) in db[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                    *d += gij * x;
                                }
                            }
                        }
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.needs_grad(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs_grad(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.needs_grad(*b) {
                        acc(&mut grads, *b, g.iter().map(|v| -v).collect());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs_grad(*row) {
                        let mut dr = vec![0.0; c];
                        for chunk in g.chunks(c) {
                            for (d, v) in dr.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                        acc(&mut grads, *row, dr);
                    }
                    if self.needs_grad(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    if self.needs_grad(*a) {
                        acc(&mut grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    }
                    if self.needs_grad(*b) {
                        acc(&mut grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.iter().map(|v| v * s).collect()),
                Op::Relu(a) => {
                    let av = self.value(*a).data();
                    let d = g
                        .iter()
                        .zip(av)
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain).data();
                    if self.needs_grad(*gain) {
                        let mut dg = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                dg[j] += g[i * c + j] * xhat[i * c + j];
                            }
                        }
                        acc(&mut grads, *gain, dg);
                    }
                    if self.needs_grad(*bias) {
                        let mut db = vec![0.0; c];
                        for chunk in g.chunks(c) {
                            for (d, v) in db.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                        acc(&mut grads, *bias, db);
                    }
                    if self.needs_grad(*x) {
                        let n = c as f64;
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..c {
                                let dh = g[i * c + j] * gv[j];
                                s1 += dh;
                                s2 += dh * xhat[i * c + j];
                            }
                            for j in 0..c {
                                let dh = g[i * c + j] * gv[j];
                                dx[i * c + j] = inv_std[i] / n * (n * dh - s1 - xhat[i * c + j] * s2);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::MaskedSoftmax(a) => {
                    let y = node.value.data();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            dx[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::MaskRows(a, mask) => {
                    let mut d = g;
                    for (i, &keep) in mask.iter().enumerate() {
                        if !keep {
                            d[i * c..(i + 1) * c].fill(0.0);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::MulConst(a, f) => acc(&mut grads, *a, g.iter().zip(f).map(|(x, y)| x * y).collect()),
                Op::MaskedMean { x, mask, count } => {
                    let (xr, xc) = self.shape(*x);
                    let mut d = vec![0.0; xr * xc];
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for j in 0..xc {
                            d[i * xc + j] = g[j] / count;
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::SliceCols { x, start } => {
                    let (xr, xc) = self.shape(*x);
                    let mut d = vec![0.0; xr * xc];
                    for i in 0..xr {
                        d[i * xc + start..i * xc + start + c].copy_from_slice(&g[i * c..(i + 1) * c]);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.shape(*p).1;
                        if self.needs_grad(*p) {
                            let mut d = Vec::with_capacity(r * pc);
                            for i in 0..r {
                                d.extend_from_slice(&g[i * c + offset..i * c + offset + pc]);
                            }
                            acc(&mut grads, *p, d);
                        }
                        offset += pc;
                    }
                }
                Op::PadRows(a) => {
                    let (ar, _) = self.shape(*a);
                    acc(&mut grads, *a, g[..ar * c].to_vec());
                }
                Op::Gather { table, ids } => {
                    let (tr, tc) = self.shape(*table);
                    let mut d = vec![0.0; tr * tc];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..tc {
                            d[id * tc + j] += g[i * tc + j];
                        }
                    }
                    acc(&mut grads, *table, d);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    acc(&mut grads, *a, vec![g[0]; n]);
                }
                Op::SoftmaxCe {
                    logits,
                    class,
                    probs,
                } => {
                    let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    d[*class] -= g[0];
                    acc(&mut grads, *logits, d);
                }
                Op::SigmoidBce { logit, target } => {
                    let s = self.value(*logit).data()[0];
                    acc(&mut grads, *logit, vec![(sigmoid(s) - target) * g[0]]);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// Masked softmax of one row into `out`; shared by the graph op and
/// [`crate::nn::masked_softmax`].
pub(crate) fn softmax_into(row: &[f64], mask: &[bool], out: &mut [f64]) {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for ((o, v), &m) in out.iter_mut().zip(row).zip(mask) {
        *o = if m { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
