//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation whose inputs require gradients. Values
//! are addressed by [`Var`] handles, which are only meaningful on the tape that
//! produced them. Parameters are read from a borrowed [`ParamStore`] without
//! copying; [`Tape::backward`] consumes the tape and returns a [`Gradients`]
//! table keyed by node and by parameter.
//!
//! Binary elementwise ops (`add`, `sub`, `mul`, `div`) broadcast their second
//! operand when it is `[1, c]`, `[r, 1]` or `[1, 1]`.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// Cosine similarity of vectors whose norm product is below this is defined as 0.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Vec<usize>, usize),
    SegmentSum(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColMean(Var),
    L2NormRows(Var),
    CosineSim(Var, Var),
    Mse(Var, Var),
    HeadDot(Var, Var),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

static EMPTY_STORE: ParamStore = ParamStore::empty();

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn bcast_ok(a: &[usize], b: &[usize]) -> bool {
    (b[0] == a[0] || b[0] == 1) && (b[1] == a[1] || b[1] == 1)
}

/// Index into a broadcast operand of shape `b` for output position `(i, j)`.
#[inline]
fn bidx(b: &[usize], i: usize, j: usize) -> usize {
    let bi = if b[0] == 1 { 0 } else { i };
    let bj = if b[1] == 1 { 0 } else { j };
    bi * b[1] + bj
}

/// Sums a full-shape gradient down to the broadcast shape `b`.
fn reduce_to(g: &Tensor, b: &[usize]) -> Tensor {
    if g.shape() == b {
        return g.clone();
    }
    let mut out = Tensor::zeros(b[0], b[1]);
    let c = g.cols();
    for i in 0..g.rows() {
        for j in 0..c {
            out.data_mut()[bidx(b, i, j)] += g.data()[i * c + j];
        }
    }
    out
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::detached()
    }
}

impl Tape<'static> {
    /// A tape with no parameter store, for plain tensor computations.
    pub fn detached() -> Self {
        Tape::new(&EMPTY_STORE)
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that gradients flow into when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Loads a parameter. Frozen parameters behave as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: self.store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !bcast_ok(ta.shape(), tb.shape()) {
            return shape_err(name, &[ta.shape(), tb.shape()]);
        }
        let (r, c) = (ta.rows(), ta.cols());
        let bs = tb.shape();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(ta.data()[i * c + j], tb.data()[bidx(bs, i, j)]));
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(r, c, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = t.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(r, c, out).expect("shape"), Op::SoftmaxRows(a), rg)
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    /// Output has the input's shape; segments with no rows are ignored.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let t = self.value(a);
        if segments.len() != t.rows() || segments.iter().any(|&s| s >= num_segments) {
            return shape_err("segment_softmax", &[t.shape(), &[segments.len(), num_segments]]);
        }
        let c = t.cols();
        let mut max = vec![f64::NEG_INFINITY; num_segments * c];
        for (e, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let m = &mut max[s * c + j];
                *m = m.max(t.data()[e * c + j]);
            }
        }
        let mut out = vec![0.0; t.len()];
        let mut denom = vec![0.0; num_segments * c];
        for (e, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let v = (t.data()[e * c + j] - max[s * c + j]).exp();
                out[e * c + j] = v;
                denom[s * c + j] += v;
            }
        }
        for (e, &s) in segments.iter().enumerate() {
            for j in 0..c {
                out[e * c + j] /= denom[s * c + j];
            }
        }
        let out = Tensor::new(t.rows(), c, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SegmentSoftmax(a, segments.to_vec(), num_segments), rg))
    }

    /// Sums rows into `num_segments` output rows by segment id.
    pub fn segment_sum(&mut self, a: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let t = self.value(a);
        if segments.len() != t.rows() || segments.iter().any(|&s| s >= num_segments) {
            return shape_err("segment_sum", &[t.shape(), &[segments.len(), num_segments]]);
        }
        let c = t.cols();
        let mut out = Tensor::zeros(num_segments, c);
        for (e, &s) in segments.iter().enumerate() {
            let o = &mut out.data_mut()[s * c..(s + 1) * c];
            for (x, y) in o.iter_mut().zip(t.row_slice(e)) {
                *x += y;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SegmentSum(a, segments.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return shape_err("gather_rows", &[t.shape(), &[bad]]);
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(idx.len(), c, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        };
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return shape_err("concat_rows", &[self.value(first).shape(), t.shape()]);
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, c, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        };
        let r = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != r {
                return shape_err("concat_cols", &[self.value(first).shape(), self.value(p).shape()]);
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::new(r, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return shape_err("slice_cols", &[t.shape(), &[start, len]]);
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for i in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        let out = Tensor::new(t.rows(), len, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return shape_err("mean", &[t.shape()]);
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Per-row sums, `[r, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows()).map(|i| t.row_slice(i).iter().sum()).collect();
        let out = Tensor::new(t.rows(), 1, out).expect("shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::RowSum(a), rg)
    }

    /// Mean of the rows, `[1, c]`.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() == 0 {
            return shape_err("col_mean", &[t.shape()]);
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row(out), Op::ColMean(a), rg))
    }

    /// Euclidean norm of each row, `[r, 1]`.
    pub fn l2norm_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows())
            .map(|i| t.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(t.rows(), 1, out).expect("shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::L2NormRows(a), rg)
    }

    /// Row-wise cosine similarity of equal-shape inputs, `[r, 1]`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("cosine_sim", &[ta.shape(), tb.shape()]);
        }
        let out: Vec<f64> = (0..ta.rows())
            .map(|i| cosine(ta.row_slice(i), tb.row_slice(i)))
            .collect();
        let out = Tensor::new(ta.rows(), 1, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::CosineSim(a, b), rg))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.is_empty() {
            return shape_err("mse", &[ta.shape(), tb.shape()]);
        }
        let m = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.len() as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), rg))
    }

    /// Per-head dot products: `p` is `[e, h·k]`, `w` is `[h, k]`, output `[e, h]`
    /// with `out[i, j] = p[i, j·k..(j+1)·k] · w[j]`.
    pub fn head_dot(&mut self, p: Var, w: Var) -> Result<Var> {
        let (tp, tw) = (self.value(p), self.value(w));
        let (h, k) = (tw.rows(), tw.cols());
        if tp.cols() != h * k {
            return shape_err("head_dot", &[tp.shape(), tw.shape()]);
        }
        let e = tp.rows();
        let mut out = vec![0.0; e * h];
        for i in 0..e {
            let row = tp.row_slice(i);
            for j in 0..h {
                out[i * h + j] = row[j * k..(j + 1) * k]
                    .iter()
                    .zip(tw.row_slice(j))
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        let out = Tensor::new(e, h, out)?;
        let rg = self.rg(&[p, w]);
        Ok(self.push(out, Op::HeadDot(p, w), rg))
    }

    /// Smallest `|x|` over the inputs of every ReLU-family op on the tape;
    /// `+inf` when there are none. Used to keep finite differences off kinks.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for n in &self.nodes {
            if let Op::LeakyRelu(a, _) | Op::Relu(a) = n.op {
                for v in self.value(a).data() {
                    m = m.min(v.abs());
                }
            }
        }
        m
    }

    /// Reverse pass from a `[1, 1]` loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.rows(), lt.cols(), 1.0));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].as_ref().map(|_| (id, v)))
            .collect::<Vec<_>>();
        let mut params = params;
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = match &self.nodes[i].value {
            Value::Owned(t) => t,
            Value::Param(_) => return,
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.acc(grads, *b, reduce_to(g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.acc(grads, *b, reduce_to(&g.map(|x| -x), self.shape(*b)));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(self.nodes[i].op, Op::Div(..));
                let (ta, tb) = (self.value(*a), self.value(*b));
                let bs = tb.shape();
                let c = ta.cols();
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    for r in 0..ta.rows() {
                        for j in 0..c {
                            let y = tb.data()[bidx(bs, r, j)];
                            let v = &mut ga.data_mut()[r * c + j];
                            *v = if is_div { *v / y } else { *v * y };
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut full = g.clone();
                    for r in 0..ta.rows() {
                        for j in 0..c {
                            let x = ta.data()[r * c + j];
                            let y = tb.data()[bidx(bs, r, j)];
                            let v = &mut full.data_mut()[r * c + j];
                            *v = if is_div { -*v * x / (y * y) } else { *v * x };
                        }
                    }
                    self.acc(grads, *b, reduce_to(&full, bs));
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g.map(|x| k * x)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; n * k];
                    matmul_nt_into(g.data(), tb.data(), &mut ga, n, m, k);
                    self.acc(grads, *a, Tensor::new(n, k, ga).expect("shape"));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * m];
                    matmul_tn_into(ta.data(), g.data(), &mut gb, n, k, m);
                    self.acc(grads, *b, Tensor::new(k, m, gb).expect("shape"));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let d = zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { slope * gv });
                self.acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => self.acc(grads, *a, zip_map(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Tanh(a) => self.acc(grads, *a, zip_map(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Exp(a) => self.acc(grads, *a, zip_map(g, out, |gv, y| gv * y)),
            Op::Log(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, zip_map(g, x, |gv, xv| gv / xv));
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut d = vec![0.0; r * c];
                for row in 0..r {
                    let y = &out.data()[row * c..(row + 1) * c];
                    let gy = &g.data()[row * c..(row + 1) * c];
                    let s: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[row * c + j] = y[j] * (gy[j] - s);
                    }
                }
                self.acc(grads, *a, Tensor::new(r, c, d).expect("shape"));
            }
            Op::SegmentSoftmax(a, seg, nseg) => {
                let c = out.cols();
                let mut s = vec![0.0; nseg * c];
                for (e, &sg) in seg.iter().enumerate() {
                    for j in 0..c {
                        s[sg * c + j] += out.data()[e * c + j] * g.data()[e * c + j];
                    }
                }
                let mut d = vec![0.0; out.len()];
                for (e, &sg) in seg.iter().enumerate() {
                    for j in 0..c {
                        let k = e * c + j;
                        d[k] = out.data()[k] * (g.data()[k] - s[sg * c + j]);
                    }
                }
                self.acc(grads, *a, Tensor::new(out.rows(), c, d).expect("shape"));
            }
            Op::SegmentSum(a, seg) => {
                let c = out.cols();
                let mut d = Vec::with_capacity(seg.len() * c);
                for &sg in seg {
                    d.extend_from_slice(g.row_slice(sg));
                }
                self.acc(grads, *a, Tensor::new(seg.len(), c, d).expect("shape"));
            }
            Op::GatherRows(a, idx) => {
                if !self.requires_grad(*a) {
                    return;
                }
                let src = self.value(*a);
                let c = src.cols();
                let mut d = Tensor::zeros(src.rows(), c);
                for (e, &r) in idx.iter().enumerate() {
                    let o = &mut d.data_mut()[r * c..(r + 1) * c];
                    for (x, y) in o.iter_mut().zip(g.row_slice(e)) {
                        *x += y;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let c = out.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.requires_grad(p) {
                        let d = g.data()[off * c..(off + r) * c].to_vec();
                        self.acc(grads, p, Tensor::new(r, c, d).expect("shape"));
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (out.rows(), out.cols());
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(r * c);
                        for row in 0..r {
                            d.extend_from_slice(&g.data()[row * total + off..row * total + off + c]);
                        }
                        self.acc(grads, p, Tensor::new(r, c, d).expect("shape"));
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (c, len) = (src.cols(), out.cols());
                let mut d = Tensor::zeros(src.rows(), c);
                for row in 0..src.rows() {
                    d.data_mut()[row * c + start..row * c + start + len].copy_from_slice(g.row_slice(row));
                }
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let s = self.value(*a).shape();
                self.acc(grads, *a, Tensor::filled(s[0], s[1], g.item()));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let k = g.item() / t.len() as f64;
                self.acc(grads, *a, Tensor::filled(t.rows(), t.cols(), k));
            }
            Op::RowSum(a) => {
                let s = self.value(*a).shape();
                let mut d = Tensor::zeros(s[0], s[1]);
                for row in 0..s[0] {
                    let gv = g.data()[row];
                    d.data_mut()[row * s[1]..(row + 1) * s[1]].fill(gv);
                }
                self.acc(grads, *a, d);
            }
            Op::ColMean(a) => {
                let s = self.value(*a).shape();
                let k = 1.0 / s[0] as f64;
                let mut d = Vec::with_capacity(s[0] * s[1]);
                for _ in 0..s[0] {
                    d.extend(g.data().iter().map(|v| v * k));
                }
                self.acc(grads, *a, Tensor::new(s[0], s[1], d).expect("shape"));
            }
            Op::L2NormRows(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut d = Tensor::zeros(x.rows(), c);
                for row in 0..x.rows() {
                    let nrm = out.data()[row];
                    if nrm == 0.0 {
                        continue;
                    }
                    let k = g.data()[row] / nrm;
                    for j in 0..c {
                        d.data_mut()[row * c + j] = k * x.data()[row * c + j];
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::CosineSim(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                let mut da = Tensor::zeros(ta.rows(), c);
                let mut db = Tensor::zeros(ta.rows(), c);
                for row in 0..ta.rows() {
                    let (x, y) = (ta.row_slice(row), tb.row_slice(row));
                    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if nx * ny < COSINE_EPS {
                        continue;
                    }
                    let cs = out.data()[row];
                    let gv = g.data()[row];
                    for j in 0..c {
                        da.data_mut()[row * c + j] = gv * (y[j] / (nx * ny) - cs * x[j] / (nx * nx));
                        db.data_mut()[row * c + j] = gv * (x[j] / (nx * ny) - cs * y[j] / (ny * ny));
                    }
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() / ta.len() as f64;
                let d = zip_map(ta, tb, |x, y| k * (x - y));
                if self.requires_grad(*b) {
                    self.acc(grads, *b, d.map(|v| -v));
                }
                self.acc(grads, *a, d);
            }
            Op::HeadDot(p, w) => {
                let (tp, tw) = (self.value(*p), self.value(*w));
                let (h, k) = (tw.rows(), tw.cols());
                let e = tp.rows();
                if self.requires_grad(*p) {
                    let mut d = Tensor::zeros(e, h * k);
                    for i in 0..e {
                        for j in 0..h {
                            let gv = g.data()[i * h + j];
                            for (t, wv) in tw.row_slice(j).iter().enumerate() {
                                d.data_mut()[i * h * k + j * k + t] = gv * wv;
                            }
                        }
                    }
                    self.acc(grads, *p, d);
                }
                if self.requires_grad(*w) {
                    let mut d = Tensor::zeros(h, k);
                    for i in 0..e {
                        let row = tp.row_slice(i);
                        for j in 0..h {
                            let gv = g.data()[i * h + j];
                            for t in 0..k {
                                d.data_mut()[j * k + t] += gv * row[j * k + t];
                            }
                        }
                    }
                    self.acc(grads, *w, d);
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Cosine similarity of two slices; 0 when either is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na * nb < COSINE_EPS {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a node, if it required one and was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// `(param, grad)` pairs in parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::new(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_inputs_is_uniform() {
        let mut tape = Tape::detached();
        let x = tape.constant(t(1, 2, &[1.0, 1.0]));
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn leaky_relu_negative_branch() {
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::scalar(-1.0));
        let y = tape.leaky_relu(x, 0.2);
        assert!((tape.value(y).item() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_vector_with_itself() {
        let mut tape = Tape::detached();
        let x = tape.constant(t(1, 3, &[0.3, -2.0, 5.0]));
        let c = tape.cosine_sim(x, x).unwrap();
        assert!((tape.value(c).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::detached();
        let x = tape.leaf(t(1, 3, &[1.0, -2.0, 3.0]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_gradient_uses_mean_normalization() {
        // d/dx mean((x - 0)^2) over one element = 2x = 4 at x = 2
        let mut tape = Tape::detached();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let z = tape.constant(Tensor::scalar(0.0));
        let l = tape.mse(x, z).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 4.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::detached();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]), true);
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::detached();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().starts_with("matmul"), "{err}");
        let c = tape.constant(Tensor::zeros(3, 2));
        assert!(matches!(tape.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::detached();
        let a = tape.constant(Tensor::scalar(1.0));
        let b = tape.exp(a);
        assert!(!tape.requires_grad(b));
    }

    #[test]
    fn segment_softmax_normalizes_each_segment() {
        let mut tape = Tape::detached();
        let x = tape.constant(t(4, 1, &[0.0, 3f64.ln(), 7.0, 7.0]));
        let y = tape.segment_softmax(x, &[0, 0, 1, 1], 2).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.5, 0.5]);
    }
}
