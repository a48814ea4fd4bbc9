use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{dot, matmul_nt_into, matmul_tn_into};
use super::{Grads, ParamId, ParamStore, ShapeMismatch, Tensor};

pub type OpResult = Result<Var, ShapeMismatch>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Reduction or normalization axis. `Rows` runs down each column, `Cols`
/// along each row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddCol(Var, Var),
    AddRow(Var, Var),
    OuterSum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Ln(Var),
    Exp(Var),
    Softmax(Var, Axis, Option<Vec<bool>>),
    LogSoftmax(Var, Axis, Option<Vec<bool>>),
    Sum(Var, Axis),
    SumAll(Var),
    Concat(Vec<Var>, Axis),
    Slice(Var, Axis, usize),
    Embed(Var, Vec<usize>),
    Transpose(Var),
    Dropout(Var, Vec<f64>),
    Normalize(Var),
    Pick(Var, usize, usize),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for one reverse pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> ShapeMismatch {
    ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The parameter as a differentiable leaf, registered once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, ShapeMismatch> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_vec(ta.rows(), ta.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Matrix `a (m x n)` plus column vector `b (m x 1)` added to every column.
    pub fn add_col(&mut self, a: Var, b: Var) -> OpResult {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape() != (ta.rows(), 1) {
            return Err(mismatch("add_col", ta, tb));
        }
        let mut out = ta.clone();
        let n = ta.cols();
        for (r, bv) in tb.data().iter().enumerate() {
            for x in &mut out.data_mut()[r * n..(r + 1) * n] {
                *x += bv;
            }
        }
        Ok(self.push(out, Op::AddCol(a, b), &[a, b]))
    }

    /// Matrix `a (m x n)` plus row vector `b (1 x n)` added to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> OpResult {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape() != (1, ta.cols()) {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut out = ta.clone();
        let n = ta.cols();
        for r in 0..ta.rows() {
            for (x, bv) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *x += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    /// `out[i][j] = a[i] + b[j]` for `a (m x 1)` and `b (1 x n)`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> OpResult {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != 1 || tb.rows() != 1 {
            return Err(mismatch("outer_sum", ta, tb));
        }
        let (m, n) = (ta.rows(), tb.cols());
        let mut data = Vec::with_capacity(m * n);
        for &x in ta.data() {
            data.extend(tb.data().iter().map(|y| x + y));
        }
        Ok(self.push(Tensor::from_vec(m, n, data), Op::OuterSum(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    /// Natural logarithm.
    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let out = softmax_forward(self.value(a), axis, None, false);
        self.push(out, Op::Softmax(a, axis, None), &[a])
    }

    /// Softmax restricted to entries where `mask` is true. Masked entries
    /// are exactly zero and receive no gradient. A group with no unmasked
    /// entry is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>, axis: Axis) -> OpResult {
        if mask.len() != self.value(a).len() {
            let t = self.value(a);
            return Err(ShapeMismatch {
                op: "masked_softmax",
                left: t.shape(),
                right: (mask.len(), 1),
            });
        }
        let out = softmax_forward(self.value(a), axis, Some(&mask), false);
        Ok(self.push(out, Op::Softmax(a, axis, Some(mask)), &[a]))
    }

    /// Log-softmax; with a mask, masked entries are set to zero and excluded
    /// from normalization.
    pub fn log_softmax(&mut self, a: Var, mask: Option<Vec<bool>>, axis: Axis) -> OpResult {
        if let Some(m) = &mask {
            if m.len() != self.value(a).len() {
                let t = self.value(a);
                return Err(ShapeMismatch {
                    op: "log_softmax",
                    left: t.shape(),
                    right: (m.len(), 1),
                });
            }
        }
        let out = softmax_forward(self.value(a), axis, mask.as_deref(), true);
        Ok(self.push(out, Op::LogSoftmax(a, axis, mask), &[a]))
    }

    pub fn sum(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let (m, n) = t.shape();
        let out = match axis {
            Axis::Rows => {
                let mut o = Tensor::zeros(1, n);
                for r in 0..m {
                    for (x, y) in o.data_mut().iter_mut().zip(t.row(r)) {
                        *x += y;
                    }
                }
                o
            }
            Axis::Cols => Tensor::from_vec(m, 1, (0..m).map(|r| t.row(r).iter().sum()).collect()),
        };
        self.push(out, Op::Sum(a, axis), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Stacks `parts` vertically (`Axis::Rows`) or side by side (`Axis::Cols`).
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> OpResult {
        assert!(!parts.is_empty(), "concat needs at least one part");
        let first = self.value(parts[0]).clone();
        let out = match axis {
            Axis::Rows => {
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.cols() != cols {
                        return Err(mismatch("concat", &first, t));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::from_vec(rows, cols, data)
            }
            Axis::Cols => {
                let rows = first.rows();
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows() != rows {
                        return Err(mismatch("concat", &first, t));
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::from_vec(rows, cols, data)
            }
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Rows (`Axis::Rows`) or columns (`Axis::Cols`) `start..start + len`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> OpResult {
        let t = self.value(a);
        let (m, n) = t.shape();
        let out = match axis {
            Axis::Rows if start + len <= m => Tensor::from_vec(len, n, t.data()[start * n..(start + len) * n].to_vec()),
            Axis::Cols if start + len <= n => {
                let mut data = Vec::with_capacity(m * len);
                for r in 0..m {
                    data.extend_from_slice(&t.row(r)[start..start + len]);
                }
                Tensor::from_vec(m, len, data)
            }
            _ => {
                return Err(ShapeMismatch {
                    op: "slice",
                    left: (m, n),
                    right: (start, len),
                })
            }
        };
        Ok(self.push(out, Op::Slice(a, axis, start), &[a]))
    }

    /// Looks up rows of `table (V x d)`; the result is `d x ids.len()`, one
    /// column per id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> OpResult {
        let t = self.value(table);
        let (v, d) = t.shape();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(ShapeMismatch {
                op: "embed",
                left: (v, d),
                right: (bad, 1),
            });
        }
        let mut out = Tensor::zeros(d, ids.len());
        for (j, &id) in ids.iter().enumerate() {
            for (k, &x) in t.row(id).iter().enumerate() {
                out.set(k, j, x);
            }
        }
        Ok(self.push(out, Op::Embed(table, ids.to_vec()), &[table]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Inverted dropout with a mask drawn from `seed`. A rate of zero returns
    /// `a` unchanged.
    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(t.rows(), t.cols(), data);
        self.push(out, Op::Dropout(a, mask), &[a])
    }

    /// Divides every entry by the sum of all entries.
    pub fn normalize(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum();
        let out = t.map(|x| x / s);
        self.push(out, Op::Normalize(a), &[a])
    }

    /// The single entry at `(r, c)` as a `1 x 1` value.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let out = Tensor::scalar(self.value(a).get(r, c));
        self.push(out, Op::Pick(a, r, c), &[a])
    }

    /// `w · x + b`.
    pub fn linear(&mut self, w: ParamId, b: ParamId, x: Var) -> OpResult {
        let (w, b) = (self.param(w), self.param(b));
        let y = self.matmul(w, x)?;
        self.add_col(y, b)
    }

    /// Reverse pass from a `1 x 1` output; parameter gradients are added
    /// to `grads`.
    pub fn backward(&self, output: Var, grads: &mut Grads) {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        self.backward_with(output, Tensor::scalar(1.0), grads);
    }

    pub fn backward_with(&self, output: Var, seed: Tensor, grads: &mut Grads) {
        let mut g: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        g[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, Var(i), &gi, &mut g, grads);
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, me: Var, gout: &Tensor, g: &mut [Option<Tensor>], grads: &mut Grads) {
        let y = self.value(me);
        match op {
            Op::Leaf => {}
            Op::Param(id) => grads.accumulate(*id, gout),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    let buf = slot(g, *a, m, k);
                    matmul_nt_into(gout.data(), tb.data(), buf.data_mut(), m, n, k);
                }
                if self.needs(*b) {
                    let buf = slot(g, *b, k, n);
                    matmul_tn_into(ta.data(), gout.data(), buf.data_mut(), m, k, n);
                }
            }
            Op::Add(a, b) => {
                self.acc(g, *a, gout);
                self.acc(g, *b, gout);
            }
            Op::Sub(a, b) => {
                self.acc(g, *a, gout);
                if self.needs(*b) {
                    self.acc_owned(g, *b, gout.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let t = zip(gout, self.value(*b), |x, y| x * y);
                    self.acc_owned(g, *a, t);
                }
                if self.needs(*b) {
                    let t = zip(gout, self.value(*a), |x, y| x * y);
                    self.acc_owned(g, *b, t);
                }
            }
            Op::AddCol(a, b) => {
                self.acc(g, *a, gout);
                if self.needs(*b) {
                    let n = gout.cols();
                    let rs = (0..gout.rows()).map(|r| gout.data()[r * n..(r + 1) * n].iter().sum()).collect();
                    self.acc_owned(g, *b, Tensor::column(rs));
                }
            }
            Op::AddRow(a, b) | Op::OuterSum(a, b) => {
                if matches!(op, Op::AddRow(..)) {
                    self.acc(g, *a, gout);
                } else if self.needs(*a) {
                    let n = gout.cols();
                    let rs = (0..gout.rows()).map(|r| gout.data()[r * n..(r + 1) * n].iter().sum()).collect();
                    self.acc_owned(g, *a, Tensor::column(rs));
                }
                if self.needs(*b) {
                    let mut cs = Tensor::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (x, y) in cs.data_mut().iter_mut().zip(gout.row(r)) {
                            *x += y;
                        }
                    }
                    self.acc_owned(g, *b, cs);
                }
            }
            Op::Scale(a, s) => self.acc_owned(g, *a, gout.map(|x| x * s)),
            Op::AddScalar(a) => self.acc(g, *a, gout),
            Op::Tanh(a) => self.acc_owned(g, *a, zip(gout, y, |d, y| d * (1.0 - y * y))),
            Op::Sigmoid(a) => self.acc_owned(g, *a, zip(gout, y, |d, y| d * y * (1.0 - y))),
            Op::LeakyRelu(a, slope) => {
                let t = zip(gout, self.value(*a), |d, x| if x > 0.0 { d } else { d * slope });
                self.acc_owned(g, *a, t);
            }
            Op::Ln(a) => self.acc_owned(g, *a, zip(gout, self.value(*a), |d, x| d / x)),
            Op::Exp(a) => self.acc_owned(g, *a, zip(gout, y, |d, y| d * y)),
            Op::Softmax(a, axis, mask) => {
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for group in groups(y.shape(), *axis) {
                    let s: f64 = group.iter().map(|&i| gout.data()[i] * y.data()[i]).sum();
                    for &i in &group {
                        if mask.as_ref().is_some_and(|m| !m[i]) {
                            continue;
                        }
                        out.data_mut()[i] = y.data()[i] * (gout.data()[i] - s);
                    }
                }
                self.acc_owned(g, *a, out);
            }
            Op::LogSoftmax(a, axis, mask) => {
                let mut out = Tensor::zeros(y.rows(), y.cols());
                let live = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                for group in groups(y.shape(), *axis) {
                    let s: f64 = group.iter().filter(|&&i| live(i)).map(|&i| gout.data()[i]).sum();
                    for &i in group.iter().filter(|&&i| live(i)) {
                        out.data_mut()[i] = gout.data()[i] - y.data()[i].exp() * s;
                    }
                }
                self.acc_owned(g, *a, out);
            }
            Op::Sum(a, axis) => {
                let (m, n) = self.value(*a).shape();
                let mut out = Tensor::zeros(m, n);
                for r in 0..m {
                    for c in 0..n {
                        let d = match axis {
                            Axis::Rows => gout.data()[c],
                            Axis::Cols => gout.data()[r],
                        };
                        out.set(r, c, d);
                    }
                }
                self.acc_owned(g, *a, out);
            }
            Op::SumAll(a) => {
                let (m, n) = self.value(*a).shape();
                self.acc_owned(g, *a, Tensor::filled(m, n, gout.item()));
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let (m, n) = self.value(p).shape();
                    if self.needs(p) {
                        let piece = match axis {
                            Axis::Rows => Tensor::from_vec(m, n, gout.data()[offset * n..(offset + m) * n].to_vec()),
                            Axis::Cols => {
                                let mut data = Vec::with_capacity(m * n);
                                for r in 0..m {
                                    data.extend_from_slice(&gout.row(r)[offset..offset + n]);
                                }
                                Tensor::from_vec(m, n, data)
                            }
                        };
                        self.acc_owned(g, p, piece);
                    }
                    offset += match axis {
                        Axis::Rows => m,
                        Axis::Cols => n,
                    };
                }
            }
            Op::Slice(a, axis, start) => {
                let (m, n) = self.value(*a).shape();
                let buf = slot(g, *a, m, n);
                match axis {
                    Axis::Rows => {
                        for (x, d) in buf.data_mut()[start * n..].iter_mut().zip(gout.data()) {
                            *x += d;
                        }
                    }
                    Axis::Cols => {
                        let len = gout.cols();
                        for r in 0..m {
                            for c in 0..len {
                                buf.data_mut()[r * n + start + c] += gout.get(r, c);
                            }
                        }
                    }
                }
            }
            Op::Embed(table, ids) => {
                let (v, d) = self.value(*table).shape();
                let buf = slot(g, *table, v, d);
                for (j, &id) in ids.iter().enumerate() {
                    for k in 0..d {
                        buf.data_mut()[id * d + k] += gout.get(k, j);
                    }
                }
            }
            Op::Transpose(a) => self.acc_owned(g, *a, gout.transpose()),
            Op::Dropout(a, mask) => {
                let data = gout.data().iter().zip(mask).map(|(d, m)| d * m).collect();
                self.acc_owned(g, *a, Tensor::from_vec(gout.rows(), gout.cols(), data));
            }
            Op::Normalize(a) => {
                let x = self.value(*a);
                let s = x.sum();
                let gx = dot(gout.data(), x.data());
                let t = gout.map(|d| d / s - gx / (s * s));
                self.acc_owned(g, *a, t);
            }
            Op::Pick(a, r, c) => {
                let (m, n) = self.value(*a).shape();
                let buf = slot(g, *a, m, n);
                buf.data_mut()[r * n + c] += gout.item();
            }
        }
    }

    fn acc(&self, g: &mut [Option<Tensor>], v: Var, t: &Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut g[v.0] {
            Some(acc) => acc.add_assign(t),
            slot @ None => *slot = Some(t.clone()),
        }
    }

    fn acc_owned(&self, g: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut g[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }
}

fn slot(g: &mut [Option<Tensor>], v: Var, m: usize, n: usize) -> &mut Tensor {
    g[v.0].get_or_insert_with(|| Tensor::zeros(m, n))
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Flat indices of each normalization group.
fn groups((m, n): (usize, usize), axis: Axis) -> Vec<Vec<usize>> {
    match axis {
        Axis::Rows => (0..n).map(|c| (0..m).map(|r| r * n + c).collect()).collect(),
        Axis::Cols => (0..m).map(|r| (r * n..(r + 1) * n).collect()).collect(),
    }
}

fn softmax_forward(t: &Tensor, axis: Axis, mask: Option<&[bool]>, log: bool) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    let live = |i: usize| mask.is_none_or(|m| m[i]);
    for group in groups(t.shape(), axis) {
        let max = group
            .iter()
            .filter(|&&i| live(i))
            .map(|&i| t.data()[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let z: f64 = group.iter().filter(|&&i| live(i)).map(|&i| (t.data()[i] - max).exp()).sum();
        let lz = z.ln();
        for &i in group.iter().filter(|&&i| live(i)) {
            let shifted = t.data()[i] - max;
            out.data_mut()[i] = if log { shifted - lz } else { shifted.exp() / z };
        }
    }
    out
}
