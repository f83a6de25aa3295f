//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! A [`Graph`] records every operation eagerly: values are computed when a
//! node is created, and [`Graph::backward`] walks the tape in reverse to
//! accumulate exact derivatives of a scalar loss into a [`Grads`] view.
//! Parameters are referenced from a borrowed [`Params`] view and are never
//! copied onto the tape.

use super::params::{Grads, ParamId, Params};
use super::tensor::{matmul_into, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Transpose(Var),
    Embedding { table: Var, ids: Vec<usize> },
    MeanRows(Var),
    SumAll(Var),
    ConcatCols(Var, Var),
    SliceCols { src: Var, start: usize },
    SliceRows { src: Var, start: usize },
    Reshape(Var),
    SoftmaxRows(Var),
    Bce { p: Var, labels: Vec<f64> },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Probability clamp applied before taking logs in [`Graph::bce`].
pub const BCE_CLAMP: f64 = 1e-7;

pub struct Graph<'a> {
    params: Params<'a>,
    nodes: Vec<Node>,
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Graph<'a> {
    pub fn new(params: Params<'a>) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(i) => self.params.get(ParamId(i)),
            _ => node.value.as_ref().expect("non-parameter node without value"),
        }
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| shape_err(op, format!("rank > 2 tensor {:?}", self.value(v).shape())))
    }

    fn push(&mut self, op: Op, value: Tensor, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            other => parents(other).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Input, value, "input")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id.0),
            value: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("[{m} x {k}] * [{k2} x {n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.dims(a, op)?, self.dims(b, op)?);
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (r, c) = self.dims(a, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(op, Tensor::from_parts(vec![r, c], data), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a `1 x n` bias row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "add_row")?;
        let (r, n2) = self.dims(row, "add_row")?;
        if r != 1 || n != n2 {
            return Err(shape_err("add_row", format!("[{m} x {n}] + [{r} x {n2}]")));
        }
        let bias = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(bias) {
                *v += b;
            }
        }
        self.push(Op::AddRow(a, row), Tensor::from_parts(vec![m, n], data), "add_row")
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let (r, c) = self.dims(a, name)?;
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        self.push(op, Tensor::from_parts(vec![r, c], data), name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), "scale", move |x| x * c)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Offset(a), "offset", move |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Softplus(a), "softplus", stable_softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    /// Natural log; non-positive inputs are rejected as non-finite.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Ln(a), "ln", f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Square(a), "square", |x| x * x)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose(a), Tensor::from_parts(vec![c, r], data), "transpose")
    }

    /// Gathers rows of `table` (a `V x n` matrix) into an `ids.len() x n` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, n) = self.dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(shape_err("embedding", "no ids to look up"));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocabulary { item: id, vocab: v });
            }
            data.extend_from_slice(self.value(table).row_slice(id));
        }
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Tensor::from_parts(vec![ids.len(), n], data),
            "embedding",
        )
    }

    /// Mean over rows: `m x n` to `1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "mean_rows")?;
        if m == 0 {
            return Err(shape_err("mean_rows", "zero rows"));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; n];
        for chunk in src.chunks(n) {
            for (o, v) in data.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        self.push(Op::MeanRows(a), Tensor::from_parts(vec![1, n], data), "mean_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a, "concat")?;
        let (rb, cb) = self.dims(b, "concat")?;
        if ra != rb {
            return Err(shape_err("concat", format!("[{ra} x {ca}] | [{rb} x {cb}]")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        self.push(Op::ConcatCols(a, b), Tensor::from_parts(vec![ra, ca + cb], data), "concat")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols { src: a, start }, Tensor::from_parts(vec![r, len], data), "slice_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a, "slice_rows")?;
        if start + len > r || len == 0 {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows { src: a, start }, Tensor::from_parts(vec![len, c], data), "slice_rows")
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).reshape(&[rows, cols])?;
        self.push(Op::Reshape(a), t, "reshape")
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a, "softmax")?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(Op::SoftmaxRows(a), Tensor::from_parts(vec![r, c], data), "softmax")
    }

    /// Mean binary cross-entropy of probabilities `p` (one per row, `m x 1`
    /// or `1 x m`) against `labels`. Probabilities are clamped into
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logarithm.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let n = self.value(p).len();
        if n != labels.len() || n == 0 {
            return Err(shape_err(
                "bce",
                format!("{n} probabilities vs {} labels", labels.len()),
            ));
        }
        let loss = self
            .value(p)
            .data()
            .iter()
            .zip(labels)
            .map(|(p, y)| binary_cross_entropy(*y, *p))
            .sum::<f64>()
            / n as f64;
        self.push(
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
            "bce",
        )
    }

    /// Runs reverse-mode differentiation from a scalar `loss`, accumulating
    /// parameter gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Grads<'_>) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = adj[idx].take() else { continue };
            let out = node.value.as_ref();
            match &node.op {
                Op::Input => {}
                Op::Param(i) => grads.get_mut(*i).add_assign(&dy),
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2().unwrap();
                    let (_, n) = self.value(*b).dims2().unwrap();
                    if self.needs(*a) {
                        // dA = dY * B^T
                        let bv = self.value(*b).data();
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let dyr = &dy.data()[i * n..(i + 1) * n];
                            for p in 0..k {
                                let br = &bv[p * n..(p + 1) * n];
                                da[i * k + p] = dyr.iter().zip(br).map(|(x, y)| x * y).sum();
                            }
                        }
                        self.acc(&mut adj, grads, *a, Tensor::from_parts(vec![m, k], da));
                    }
                    if self.needs(*b) {
                        // dB = A^T * dY
                        let av = self.value(*a).data();
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let dyr = &dy.data()[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a_ip = av[i * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                for (o, g) in db[p * n..(p + 1) * n].iter_mut().zip(dyr) {
                                    *o += a_ip * g;
                                }
                            }
                        }
                        self.acc(&mut adj, grads, *b, Tensor::from_parts(vec![k, n], db));
                    }
                }
                Op::Add(a, b) => {
                    self.acc_shaped(&mut adj, grads, *a, dy.data().to_vec());
                    self.acc_shaped(&mut adj, grads, *b, dy.into_data());
                }
                Op::Sub(a, b) => {
                    self.acc_shaped(&mut adj, grads, *a, dy.data().to_vec());
                    self.acc_shaped(&mut adj, grads, *b, dy.data().iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let da = dy.data().iter().zip(bv).map(|(g, y)| g * y).collect();
                    let db = dy.data().iter().zip(av).map(|(g, x)| g * x).collect();
                    self.acc_shaped(&mut adj, grads, *a, da);
                    self.acc_shaped(&mut adj, grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let n = self.value(*row).len();
                    if self.needs(*row) {
                        let mut dr = vec![0.0; n];
                        for chunk in dy.data().chunks(n) {
                            for (o, g) in dr.iter_mut().zip(chunk) {
                                *o += g;
                            }
                        }
                        self.acc_shaped(&mut adj, grads, *row, dr);
                    }
                    self.acc_shaped(&mut adj, grads, *a, dy.into_data());
                }
                Op::Scale(a, c) => {
                    let d = dy.data().iter().map(|g| g * c).collect();
                    self.acc_shaped(&mut adj, grads, *a, d);
                }
                Op::Offset(a) => self.acc_shaped(&mut adj, grads, *a, dy.into_data()),
                Op::Sigmoid(a) => {
                    let y = out.unwrap().data();
                    let d = dy.data().iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                    self.acc_shaped(&mut adj, grads, *a, d);
                }
                Op::Tanh(a) => {
                    let y = out.unwrap().data();
                    let d = dy.data().iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                    self.acc_shaped(&mut adj, grads, *a, d);
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let d = dy
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.acc_shaped(&mut adj, grads, *a, d);
                }
                Op::Softplus(a) => {
                    let x = self.value(*a).data();
                    let d = dy.data().iter().zip(x).map(|(g, x)| g * sigmoid(*x)).collect();
                    self.acc_shaped(&mut adj, grads, *a, d);
                }
                Op::Exp(a) => {
                    let y = out.unwrap().data();
                    let d = dy.data().iter().zip(y).map(|(g, e)| g * e).collect();
                    self.acc_shaped(&mut adj, grads, *a, d);
                }
                Op::Ln(a) => {
                    let x = self.value(*a).data();
                    let d = dy.data().iter().zip(x).map(|(g, x)| g / x).collect();
                    self.acc_shaped(&mut adj, grads, *a, d);
                }
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    let d = dy.data().iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                    self.acc_shaped(&mut adj, grads, *a, d);
                }
                Op::Transpose(a) => {
                    let (r, c) = self.value(*a).dims2().unwrap();
                    // dy is c x r
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = dy.data()[j * r + i];
                        }
                    }
                    self.acc_shaped(&mut adj, grads, *a, d);
                }
                Op::Embedding { table, ids } => {
                    let (v, n) = self.value(*table).dims2().unwrap();
                    if let Op::Param(pi) = self.nodes[table.0].op {
                        let g = grads.get_mut(pi).data_mut();
                        for (row, &id) in ids.iter().enumerate() {
                            for (o, d) in g[id * n..(id + 1) * n].iter_mut().zip(&dy.data()[row * n..(row + 1) * n]) {
                                *o += d;
                            }
                        }
                    } else {
                        let mut d = vec![0.0; v * n];
                        for (row, &id) in ids.iter().enumerate() {
                            for (o, g) in d[id * n..(id + 1) * n].iter_mut().zip(&dy.data()[row * n..(row + 1) * n]) {
                                *o += g;
                            }
                        }
                        self.acc_shaped(&mut adj, grads, *table, d);
                    }
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.value(*a).dims2().unwrap();
                    let inv = 1.0 / m as f64;
                    let mut d = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        d.extend(dy.data().iter().map(|g| g * inv));
                    }
                    self.acc_shaped(&mut adj, grads, *a, d);
                }
                Op::SumAll(a) => {
                    let n = self.value(*a).len();
                    self.acc_shaped(&mut adj, grads, *a, vec![dy.data()[0]; n]);
                }
                Op::ConcatCols(a, b) => {
                    let (r, ca) = self.value(*a).dims2().unwrap();
                    let (_, cb) = self.value(*b).dims2().unwrap();
                    let mut da = Vec::with_capacity(r * ca);
                    let mut db = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        let row = &dy.data()[i * (ca + cb)..(i + 1) * (ca + cb)];
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    self.acc_shaped(&mut adj, grads, *a, da);
                    self.acc_shaped(&mut adj, grads, *b, db);
                }
                Op::SliceCols { src, start } => {
                    let (r, c) = self.value(*src).dims2().unwrap();
                    let len = dy.len() / r;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + len]
                            .copy_from_slice(&dy.data()[i * len..(i + 1) * len]);
                    }
                    self.acc_shaped(&mut adj, grads, *src, d);
                }
                Op::SliceRows { src, start } => {
                    let (r, c) = self.value(*src).dims2().unwrap();
                    let mut d = vec![0.0; r * c];
                    d[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                    self.acc_shaped(&mut adj, grads, *src, d);
                }
                Op::Reshape(a) => self.acc_shaped(&mut adj, grads, *a, dy.into_data()),
                Op::SoftmaxRows(a) => {
                    let s = out.unwrap();
                    let (_, c) = s.dims2().unwrap();
                    let mut d = Vec::with_capacity(s.len());
                    for (srow, grow) in s.data().chunks(c).zip(dy.data().chunks(c)) {
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        d.extend(srow.iter().zip(grow).map(|(s, g)| s * (g - dot)));
                    }
                    self.acc_shaped(&mut adj, grads, *a, d);
                }
                Op::Bce { p, labels } => {
                    let g = dy.data()[0] / labels.len() as f64;
                    let d = self
                        .value(*p)
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(p, y)| {
                            if *p < BCE_CLAMP || *p > 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                g * (p - y) / (p * (1.0 - p))
                            }
                        })
                        .collect();
                    self.acc_shaped(&mut adj, grads, *p, d);
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc_shaped(&self, adj: &mut [Option<Tensor>], grads: &mut Grads<'_>, v: Var, d: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        let shape = self.value(v).shape().to_vec();
        self.acc(adj, grads, v, Tensor::from_parts(shape, d));
    }

    fn acc(&self, adj: &mut [Option<Tensor>], grads: &mut Grads<'_>, v: Var, d: Tensor) {
        if !self.needs(v) {
            return;
        }
        if let Op::Param(i) = self.nodes[v.0].op {
            grads.get_mut(i).add_assign(&d);
            return;
        }
        match &mut adj[v.0] {
            Some(t) => t.add_assign(&d),
            slot @ None => *slot = Some(d),
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::AddRow(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::ConcatCols(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Offset(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::Softplus(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Square(a)
        | Op::Transpose(a)
        | Op::MeanRows(a)
        | Op::SumAll(a)
        | Op::Reshape(a)
        | Op::SoftmaxRows(a) => vec![*a],
        Op::Embedding { table, .. } => vec![*table],
        Op::SliceCols { src, .. } | Op::SliceRows { src, .. } => vec![*src],
        Op::Bce { p, .. } => vec![*p],
    }
}

/// `-[y ln p + (1 - y) ln(1 - p)]` with `p` clamped into
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn binary_cross_entropy(y: f64, p: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Logistic function, stable for large magnitudes.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    stable_softplus(x)
}
