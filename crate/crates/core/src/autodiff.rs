//! Reverse-mode gradient tape.
//!
//! Every primitive appends a record holding its output value and the ids of
//! its inputs. [`Tape::backward`] walks the records in exact reverse creation
//! order and accumulates gradients into trainable leaves. A tape is
//! single-use: after `backward` it refuses a second pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SelectRow {
        x: Var,
        row: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    PickPerRow {
        x: Var,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    trainable: bool,
}

/// Gradients of trainable leaves, produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a trainable leaf. Leaves that the loss does not depend on
    /// map to an all-zero tensor.
    pub fn get(&self, leaf: Var) -> Option<&Tensor<T>> {
        self.grads.get(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(&v, t)| (v, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a trainable leaf; `backward` reports a gradient for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            trainable: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Ids of all trainable leaves in creation order.
    pub fn params(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].trainable)
            .map(Var)
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), &[a], "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    fn row_broadcast(&self, x: Var, v: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let xv = self.value(x);
        let vv = self.value(v);
        let d = xv.last_dim();
        if vv.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op,
                expected: vec![d],
                got: vv.shape().to_vec(),
            });
        }
        let data = xv
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(vv.data()).map(|(&a, &b)| f(a, b)))
            .collect();
        Ok(Tensor::from_parts(xv.shape().to_vec(), data))
    }

    /// `x + v` with `v` broadcast over every row of `x`'s last axis.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.row_broadcast(x, v, "add_row", |a, b| a + b)?;
        self.push(out, Op::AddRow(x, v), &[x, v], "add_row")
    }

    /// `x ⊙ v` with `v` broadcast over every row of `x`'s last axis.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.row_broadcast(x, v, "mul_row", |a, b| a * b)?;
        self.push(out, Op::MulRow(x, v), &[x, v], "mul_row")
    }

    /// `x · scale + shift` for constant scalars.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * scale + shift);
        self.push(out, Op::Affine(x, scale), &[x], "affine")
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Result<Var> {
        self.affine(x, scale, T::zero())
    }

    /// LayerNorm over the last axis with population variance and `eps`
    /// inside the square root.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::InvalidArgument(format!("layernorm: eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                return Err(Error::InvalidShape(format!(
                    "layernorm: {name} has shape {:?}, input width is {d}",
                    self.shape(p)
                )));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let dn = T::from_usize(d).expect("width fits");
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
            "layernorm",
        )
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax()?;
        self.push(out, Op::Softmax(x), &[x], "softmax")
    }

    /// Row softmax of a square score matrix where row `i` only attends to
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if n != m {
            return Err(Error::InvalidShape(format!(
                "causal_softmax needs a square matrix, got {n}x{m}"
            )));
        }
        let mut data = self.value(x).data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            softmax_in_place(&mut row[..=i]);
            for v in &mut row[i + 1..] {
                *v = T::zero();
            }
        }
        let out = Tensor::from_parts(vec![n, n], data);
        self.push(out, Op::Softmax(x), &[x], "causal_softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            data.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::LogSoftmax(x), &[x], "log_softmax")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x], "gelu")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::InvalidShape(format!(
                "slice_cols: columns {start}..{} out of range for width {n}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let data = (0..m)
            .flat_map(|i| src[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let out = Tensor::from_parts(vec![m, len], data);
        self.push(out, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols: no inputs".into()))?;
        let (m, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    expected: vec![m, pn],
                    got: vec![pm, pn],
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![m, total], data);
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack_rows: no inputs".into()))?;
        let shape = self.shape(*first).to_vec();
        if shape.len() != 1 {
            return Err(Error::InvalidShape(format!(
                "stack_rows: rows must be vectors, got {shape:?}"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * shape[0]);
        for &r in rows {
            self.value(r).expect_shape("stack_rows", &shape)?;
            data.extend_from_slice(self.value(r).data());
        }
        let out = Tensor::from_parts(vec![rows.len(), shape[0]], data);
        self.push(out, Op::StackRows(rows.to_vec()), rows, "stack_rows")
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if row >= m {
            return Err(Error::InvalidShape(format!(
                "select_row: row {row} out of range for {m} rows"
            )));
        }
        let out = Tensor::from_parts(vec![n], self.value(x).row(row).to_vec());
        self.push(out, Op::SelectRow { x, row }, &[x], "select_row")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x], "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = T::from_usize(xv.len()).expect("length fits");
        let s = xv.data().iter().fold(T::zero(), |a, &v| a + v) / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// Sums over the last axis. A vector reduces to a one-element tensor.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let data: Vec<T> = xv
            .data()
            .chunks(d)
            .map(|r| r.iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        let mut shape = xv.shape()[..xv.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::from_parts(shape, data);
        self.push(out, Op::SumLast(x), &[x], "sum_last")
    }

    /// Scales every row (last axis) to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if n == T::zero() {
                return Err(Error::ZeroNorm { op: "normalize_rows" });
            }
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::NormalizeRows { x, norms }, &[x], "normalize_rows")
    }

    /// Picks `x[i, index[i]]` from each row of a matrix.
    pub fn pick_per_row(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if index.len() != m {
            return Err(Error::InvalidShape(format!(
                "pick_per_row: {} indices for {m} rows",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= n) {
            return Err(Error::LabelOutOfRange { label: bad, classes: n });
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(i, &j)| self.value(x).data()[i * n + j])
            .collect();
        let out = Tensor::from_parts(vec![m], data);
        self.push(
            out,
            Op::PickPerRow {
                x,
                index: index.to_vec(),
            },
            &[x],
            "pick_per_row",
        )
    }

    /// Cosine similarity between matching rows of two equal-shape tensors.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let prod = self.mul(na, nb)?;
        self.sum_last(prod)
    }

    /// `x · Wᵀ + bias` for `W` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let wt = self.transpose(weight)?;
        let y = self.matmul(x, wt)?;
        self.add_row(y, bias)
    }

    /// Reverse pass from a scalar loss. Returns a gradient for every trainable
    /// leaf on the tape (zero for leaves the loss does not reach).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.trainable {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
        }

        let out = self
            .params()
            .into_iter()
            .map(|v| {
                let shape = self.shape(v).to_vec();
                let t = match grads[v.0].take() {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                };
                (v, t)
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<T>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let n = bv.dims2()?.1;
                if needs(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * bv.data()[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    acc(*a, da);
                }
                if needs(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] = db[p * n + j] + a_ip * g[i * n + j];
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                acc(*a, da);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if needs(*a) {
                    acc(*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
                }
            }
            Op::AddRow(x, v) => {
                if needs(*x) {
                    acc(*x, g.to_vec());
                }
                if needs(*v) {
                    let d = self.value(*v).len();
                    let mut dv = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (o, &r) in dv.iter_mut().zip(row) {
                            *o = *o + r;
                        }
                    }
                    acc(*v, dv);
                }
            }
            Op::MulRow(x, v) => {
                let xv = self.value(*x).data();
                let vv = self.value(*v).data();
                let d = vv.len();
                if needs(*x) {
                    let dx = g
                        .chunks(d)
                        .flat_map(|row| row.iter().zip(vv).map(|(&g, &s)| g * s))
                        .collect();
                    acc(*x, dx);
                }
                if needs(*v) {
                    let mut dv = vec![T::zero(); d];
                    for (grow, xrow) in g.chunks(d).zip(xv.chunks(d)) {
                        for ((o, &gi), &xi) in dv.iter_mut().zip(grow).zip(xrow) {
                            *o = *o + gi * xi;
                        }
                    }
                    acc(*v, dv);
                }
            }
            Op::Affine(x, s) => acc(*x, g.iter().map(|&v| v * *s).collect()),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let dn = T::from_usize(d).expect("width fits");
                if needs(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gi), &hi) in dg.iter_mut().zip(grow).zip(hrow) {
                            *o = *o + gi * hi;
                        }
                    }
                    acc(*gamma, dg);
                }
                if needs(*beta) {
                    let mut db = vec![T::zero(); d];
                    for grow in g.chunks(d) {
                        for (o, &gi) in db.iter_mut().zip(grow) {
                            *o = *o + gi;
                        }
                    }
                    acc(*beta, db);
                }
                if needs(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, hrow), &inv) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                        let dh: Vec<T> = grow.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().fold(T::zero(), |a, &v| a + v) / dn;
                        let mean_dh_h = dh.iter().zip(hrow).fold(T::zero(), |a, (&p, &q)| a + p * q) / dn;
                        dx.extend(dh.iter().zip(hrow).map(|(&p, &h)| inv * (p - mean_dh - h * mean_dh_h)));
                    }
                    acc(*x, dx);
                }
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(d).zip(y.chunks(d)) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    dx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| yi * (gi - dot)));
                }
                acc(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let d = node.value.last_dim();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(d).zip(y.chunks(d)) {
                    let total = grow.iter().fold(T::zero(), |a, &v| a + v);
                    dx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| gi - yi.exp() * total));
                }
                acc(*x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, g.iter().zip(xv).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect());
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2()?;
                let len = node.value.last_dim();
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if needs(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        acc(p, dp);
                    }
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                let d = node.value.last_dim();
                for (i, &r) in rows.iter().enumerate() {
                    if needs(r) {
                        acc(r, g[i * d..(i + 1) * d].to_vec());
                    }
                }
            }
            Op::SelectRow { x, row } => {
                let (m, n) = self.value(*x).dims2()?;
                let mut dx = vec![T::zero(); m * n];
                dx[row * n..(row + 1) * n].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let share = g[0] / T::from_usize(n).expect("length fits");
                acc(*x, vec![share; n]);
            }
            Op::SumLast(x) => {
                let d = self.value(*x).last_dim();
                acc(*x, g.iter().flat_map(|&gi| std::iter::repeat_n(gi, d)).collect());
            }
            Op::NormalizeRows { x, norms } => {
                let d = node.value.last_dim();
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, yrow), &n) in g.chunks(d).zip(y.chunks(d)).zip(norms) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    dx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| (gi - yi * dot) / n));
                }
                acc(*x, dx);
            }
            Op::PickPerRow { x, index } => {
                let (m, n) = self.value(*x).dims2()?;
                let mut dx = vec![T::zero(); m * n];
                for (i, &j) in index.iter().enumerate() {
                    dx[i * n + j] = g[i];
                }
                acc(*x, dx);
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of_f64(GELU_C);
    let k = T::of_f64(GELU_K);
    let half = T::of_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of_f64(GELU_C);
    let k = T::of_f64(GELU_K);
    let half = T::of_f64(0.5);
    let three = T::of_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}
