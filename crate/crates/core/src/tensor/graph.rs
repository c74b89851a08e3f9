use std::sync::atomic::{AtomicU32, Ordering};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{matmul_at_raw, matmul_bt_raw, matmul_raw, transpose_raw, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Additive constant marking a masked softmax entry.
pub const MASK_NEG: f64 = -1e9;
/// Rows whose maximum is below this are treated as fully masked.
const MASKED_ROW: f64 = -1e8;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u32,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulBt,
    Transpose,
    Add,
    Sub,
    Mul,
    AddBias,
    ScaleRows,
    Affine,
    Powf,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    ClampMin,
    Softmax,
    LogSoftmax,
    Concat,
    SliceCols,
    SliceRows,
    GatherRows,
    Pick,
    Sum,
    Unfold,
    SegmentMax,
    MaxCols,
    RepeatRows,
    RepeatCols,
    Dropout,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulBt => "matmul_bt",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddBias => "add_bias",
            OpKind::ScaleRows => "scale_rows",
            OpKind::Affine => "affine",
            OpKind::Powf => "powf",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::ClampMin => "clamp_min",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Concat => "concat",
            OpKind::SliceCols => "slice_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::Pick => "pick",
            OpKind::Sum => "sum",
            OpKind::Unfold => "unfold",
            OpKind::SegmentMax => "segment_max",
            OpKind::MaxCols => "max_cols",
            OpKind::RepeatRows => "repeat_rows",
            OpKind::RepeatCols => "repeat_cols",
            OpKind::Dropout => "dropout",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_OPS: [OpKind; 31] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::MatMulBt,
    OpKind::Transpose,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::AddBias,
    OpKind::ScaleRows,
    OpKind::Affine,
    OpKind::Powf,
    OpKind::Tanh,
    OpKind::Sigmoid,
    OpKind::Relu,
    OpKind::Exp,
    OpKind::Log,
    OpKind::ClampMin,
    OpKind::Softmax,
    OpKind::LogSoftmax,
    OpKind::Concat,
    OpKind::SliceCols,
    OpKind::SliceRows,
    OpKind::GatherRows,
    OpKind::Pick,
    OpKind::Sum,
    OpKind::Unfold,
    OpKind::SegmentMax,
    OpKind::MaxCols,
    OpKind::RepeatRows,
    OpKind::RepeatCols,
    OpKind::Dropout,
];

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Affine(Var, S),
    Powf(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, S),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>, usize),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Unfold(Var, Vec<usize>, usize),
    /// Flat source index of every output element.
    SegmentMax(Var, Vec<usize>),
    MaxCols(Var, Vec<usize>),
    RepeatRows(Var),
    RepeatCols(Var),
    Dropout(Var, Vec<S>),
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulBt(..) => OpKind::MatMulBt,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::ScaleRows(..) => OpKind::ScaleRows,
            Op::Affine(..) => OpKind::Affine,
            Op::Powf(..) => OpKind::Powf,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Concat(..) => OpKind::Concat,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::Pick(..) => OpKind::Pick,
            Op::Sum(..) => OpKind::Sum,
            Op::Unfold(..) => OpKind::Unfold,
            Op::SegmentMax(..) => OpKind::SegmentMax,
            Op::MaxCols(..) => OpKind::MaxCols,
            Op::RepeatRows(..) => OpKind::RepeatRows,
            Op::RepeatCols(..) => OpKind::RepeatCols,
            Op::Dropout(..) => OpKind::Dropout,
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in execution order, which is a
/// topological order of the computation.
pub struct Graph<'p, S: Scalar = f32> {
    tape: u32,
    nodes: Vec<Node<S>>,
    params: Option<&'p ParamStore<S>>,
    param_vars: IndexMap<String, Var>,
    leaf_grads: Vec<Option<Tensor<S>>>,
    mode: Mode,
    rng: ChaCha8Rng,
    fault: Option<(OpKind, f64)>,
    clamp_events: usize,
}

fn mat<S: Scalar>(r: usize, c: usize, data: Vec<S>) -> Tensor<S> {
    Tensor::new(vec![r, c], data).expect("op output shape is consistent")
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// A tape without parameters, in evaluation mode.
    pub fn bare() -> Self {
        Self::build(None, Mode::Eval, 0)
    }

    pub fn new(params: &'p ParamStore<S>, mode: Mode, seed: u64) -> Self {
        Self::build(Some(params), mode, seed)
    }

    fn build(params: Option<&'p ParamStore<S>>, mode: Mode, seed: u64) -> Self {
        Graph {
            tape: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params,
            param_vars: IndexMap::new(),
            leaf_grads: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            fault: None,
            clamp_events: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the backward output of one op kind. Test fixture for the
    /// gradient checker; never set during training.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, scale: f64) {
        self.fault = Some((kind, scale));
    }

    /// Number of probabilities clamped away from zero before a log.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub(crate) fn note_clamps(&mut self, n: usize) {
        self.clamp_events += n;
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.tape || v.id >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        assert_eq!(v.tape, self.tape, "variable belongs to another tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(Error::NonFinite(kind.name()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.id].requires_grad),
        };
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var { id, tape: self.tape })
    }

    fn inputs(&self, op: &Op<S>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ScaleRows(a, b) => vec![*a, *b],
            Op::Concat(vs, _) => vs.clone(),
            Op::Transpose(a)
            | Op::Affine(a, _)
            | Op::Powf(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::ClampMin(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::GatherRows(a, _)
            | Op::Pick(a, _)
            | Op::Sum(a)
            | Op::Unfold(a, _, _)
            | Op::SegmentMax(a, _)
            | Op::MaxCols(a, _)
            | Op::RepeatRows(a)
            | Op::RepeatCols(a)
            | Op::Dropout(a, _) => vec![*a],
        }
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Records a leaf; `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.id].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a named parameter from the attached store; repeated lookups
    /// within one tape return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::Config("tape has no parameter store".into()))?;
        let p = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let v = self.leaf(p.value.clone(), true)?;
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.is_some_and(|p| p.get(name).is_some())
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push(mat(m, n, out), Op::MatMul(a, b))
    }

    /// `a · bᵀ`; `b` is laid out like a weight matrix `out × in`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::dim(
                "matmul_bt",
                format!("{:?} x {:?}^T", ta.shape(), tb.shape()),
            ));
        }
        let out = matmul_bt_raw(ta.data(), tb.data(), m, k, n);
        self.push(mat(m, n, out), Op::MatMulBt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let out = transpose_raw(t.data(), r, c);
        self.push(mat(c, r, out), Op::Transpose(a))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Vec<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push(mat(r, c, out), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push(mat(r, c, out), Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push(mat(r, c, out), Op::Mul(a, b))
    }

    /// Adds a `1 × c` (or length-`c`) bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (tx, tb) = (self.value(x), self.value(bias));
        let (r, c) = (tx.rows(), tx.cols());
        if tb.len() != c {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + bias {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o = *o + b;
            }
        }
        self.push(mat(r, c, out), Op::AddBias(x, bias))
    }

    /// Multiplies row `i` of `x` by `w[i]`, with `w` an `r × 1` column.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (tx, tw) = (self.value(x), self.value(w));
        let (r, c) = (tx.rows(), tx.cols());
        if tw.len() != r {
            return Err(Error::dim(
                "scale_rows",
                format!("{:?} scaled by {:?}", tx.shape(), tw.shape()),
            ));
        }
        let mut out = tx.data().to_vec();
        for (row, &k) in out.chunks_mut(c).zip(tw.data()) {
            for o in row {
                *o = *o * k;
            }
        }
        self.push(mat(r, c, out), Op::ScaleRows(x, w))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check(x)?;
        let (k, s) = (S::of(scale), S::of(shift));
        let (r, c) = self.shape(x);
        let out = self.value(x).data().iter().map(|&v| k * v + s).collect();
        self.push(mat(r, c, out), Op::Affine(x, k))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.shape(x);
        let e = S::of(p);
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if p == 0.0 { S::one() } else { v.powf(e) })
            .collect();
        self.push(mat(r, c, out), Op::Powf(x, p))
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.shape(x);
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(mat(r, c, out), op)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(S::zero()), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    /// `max(x, floor)`; gradient flows only where `x ≥ floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let f = S::of(floor);
        self.unary(x, |v| v.max(f), Op::ClampMin(x, f))
    }

    // ── normalization ───────────────────────────────────────────────

    /// Softmax along `axis` of a matrix (0: columns, 1: rows).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.softmax_rows(x),
            0 => {
                let t = self.transpose(x)?;
                let s = self.softmax_rows(t)?;
                self.transpose(s)
            }
            _ => Err(Error::dim("softmax", format!("axis {axis} on a matrix"))),
        }
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = softmax_data(self.value(x))?;
        let (r, c) = self.shape(x);
        self.push(mat(r, c, out), Op::Softmax(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            if m.f64() < MASKED_ROW {
                return Err(Error::DegenerateDistribution);
            }
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        self.push(mat(r, c, out), Op::LogSoftmax(x))
    }

    // ── structure ───────────────────────────────────────────────────

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat of zero tensors".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let shapes: Vec<(usize, usize)> = parts.iter().map(|&p| self.shape(p)).collect();
        let (r0, c0) = shapes[0];
        let ok = match axis {
            0 => shapes.iter().all(|s| s.1 == c0),
            1 => shapes.iter().all(|s| s.0 == r0),
            _ => false,
        };
        if !ok {
            return Err(Error::dim(
                "concat",
                format!("incompatible shapes {shapes:?} along axis {axis}"),
            ));
        }
        let (r, c, out) = if axis == 0 {
            let r: usize = shapes.iter().map(|s| s.0).sum();
            let mut out = Vec::with_capacity(r * c0);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            (r, c0, out)
        } else {
            let c: usize = shapes.iter().map(|s| s.1).sum();
            let mut out = Vec::with_capacity(r0 * c);
            for i in 0..r0 {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row(i));
                }
            }
            (r0, c, out)
        };
        self.push(mat(r, c, out), Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.shape(x);
        if len == 0 || start + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + len),
            ));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        self.push(mat(r, len, out), Op::SliceCols(x, start))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.shape(x);
        if len == 0 || start + len > r {
            return Err(Error::dim(
                "slice_rows",
                format!("[{start}, {}) of {r} rows", start + len),
            ));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push(mat(len, c, out), Op::SliceRows(x, start))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, 1)
    }

    /// Embedding lookup: output row `i` is `table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.check(table)?;
        if indices.is_empty() {
            return Err(Error::EmptyInput("gather of zero rows".into()));
        }
        let (r, c) = self.shape(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} of a {r}-row table")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(t.row(i));
        }
        self.push(mat(indices.len(), c, out), Op::GatherRows(table, indices.to_vec()))
    }

    /// Selects `x[i, cols[i]]` for every row, giving an `r × 1` column.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.shape(x);
        if cols.len() != r {
            return Err(Error::dim("pick", format!("{} indices for {r} rows", cols.len())));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Index(format!("column {bad} of {c}")));
        }
        let t = self.value(x);
        let out = cols.iter().enumerate().map(|(i, &j)| t.at(i, j)).collect();
        self.push(mat(r, 1, out), Op::Pick(x, cols.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Stacks `width` consecutive rows starting at each entry of `starts`
    /// into one row each (1-D convolution windows).
    pub fn unfold(&mut self, x: Var, starts: &[usize], width: usize) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.shape(x);
        if starts.is_empty() || width == 0 {
            return Err(Error::EmptyInput("unfold with no windows".into()));
        }
        if let Some(&bad) = starts.iter().find(|&&s| s + width > r) {
            return Err(Error::dim(
                "unfold",
                format!("window at {bad} of width {width} exceeds {r} rows"),
            ));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(starts.len() * width * c);
        for &s in starts {
            out.extend_from_slice(&t.data()[s * c..(s + width) * c]);
        }
        self.push(mat(starts.len(), width * c, out), Op::Unfold(x, starts.to_vec(), width))
    }

    /// Column-wise max over consecutive row segments of the given lengths.
    pub fn segment_max(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.shape(x);
        if lengths.iter().sum::<usize>() != r || lengths.contains(&0) {
            return Err(Error::dim("segment_max", format!("segments {lengths:?} over {r} rows")));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(lengths.len() * c);
        let mut src = Vec::with_capacity(lengths.len() * c);
        let mut start = 0;
        for &len in lengths {
            for j in 0..c {
                let mut best = start;
                for i in start + 1..start + len {
                    if t.at(i, j) > t.at(best, j) {
                        best = i;
                    }
                }
                out.push(t.at(best, j));
                src.push(best * c + j);
            }
            start += len;
        }
        self.push(mat(lengths.len(), c, out), Op::SegmentMax(x, src))
    }

    /// Max-pool over all rows, giving `1 × c`.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).0;
        self.segment_max(x, &[r])
    }

    /// Row-wise max, giving `r × 1`.
    pub fn max_cols(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(r);
        let mut arg = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.push(row[best]);
            arg.push(best);
        }
        self.push(mat(r, 1, out), Op::MaxCols(x, arg))
    }

    /// Broadcasts a single row to `n` rows.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if t.rows() != 1 || n == 0 {
            return Err(Error::dim("repeat_rows", format!("{:?} x{n}", t.shape())));
        }
        let c = t.cols();
        let out = t.data().repeat(n);
        self.push(mat(n, c, out), Op::RepeatRows(x))
    }

    /// Broadcasts a single column to `n` columns.
    pub fn repeat_cols(&mut self, x: Var, n: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if t.cols() != 1 || n == 0 {
            return Err(Error::dim("repeat_cols", format!("{:?} x{n}", t.shape())));
        }
        let out = t.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        let r = t.rows();
        self.push(mat(r, n, out), Op::RepeatCols(x))
    }

    /// Inverted dropout in train mode, identity in eval mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = S::of(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<S> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { S::zero() } else { keep })
            .collect();
        let (r, c) = self.shape(x);
        let out = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.push(mat(r, c, out), Op::Dropout(x, mask))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Back-propagates from a scalar loss. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Rank(lt.shape().to_vec()));
        }
        if !self.nodes[loss.id].requires_grad {
            return Err(Error::NotOnTape);
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::ones(lt.shape()));
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g.reshape(node.value.shape().to_vec())?),
                }
                continue;
            }
            let contributions = self.local_backward(node, &g);
            let scale = match self.fault {
                Some((kind, k)) if kind == node.op.kind() => Some(S::of(k)),
                _ => None,
            };
            for (v, mut t) in contributions {
                if !self.nodes[v.id].requires_grad {
                    continue;
                }
                if let Some(k) = scale {
                    t = t.scale(k);
                }
                match &mut grads[v.id] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaf_grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Gradients of every parameter bound on this tape, in binding order.
    pub fn param_grads(&self) -> IndexMap<String, Tensor<S>> {
        self.param_vars
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    fn local_backward(&self, node: &Node<S>, g: &Tensor<S>) -> Vec<(Var, Tensor<S>)> {
        let val = |v: Var| &self.nodes[v.id].value;
        let y = &node.value;
        let (gr, gc) = (g.rows(), g.cols());
        let like = |v: Var, data: Vec<S>| {
            let t = val(v);
            Tensor::new(t.shape().to_vec(), data).expect("gradient matches input shape")
        };
        let ew = |v: Var, f: &dyn Fn(S, S) -> S| {
            // f(upstream, input-or-output element)
            like(v, g.data().iter().zip(val(v).data()).map(|(&a, &b)| f(a, b)).collect())
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let da = matmul_bt_raw(g.data(), tb.data(), m, n, k);
                let db = matmul_at_raw(ta.data(), g.data(), m, k, n);
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let da = matmul_raw(g.data(), tb.data(), m, n, k);
                let db = matmul_at_raw(g.data(), ta.data(), m, n, k);
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::Transpose(a) => vec![(*a, like(*a, transpose_raw(g.data(), gr, gc)))],
            Op::Add(a, b) => vec![(*a, like(*a, g.data().to_vec())), (*b, like(*b, g.data().to_vec()))],
            Op::Sub(a, b) => vec![
                (*a, like(*a, g.data().to_vec())),
                (*b, like(*b, g.data().iter().map(|&v| -v).collect())),
            ],
            Op::Mul(a, b) => vec![(*a, ew(*b, &|u, x| u * x)), (*b, ew(*a, &|u, x| u * x))],
            Op::AddBias(x, b) => {
                let mut db = vec![S::zero(); gc];
                for row in g.data().chunks(gc) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                vec![(*x, like(*x, g.data().to_vec())), (*b, like(*b, db))]
            }
            Op::ScaleRows(x, w) => {
                let (tx, tw) = (val(*x), val(*w));
                let mut dx = g.data().to_vec();
                let mut dw = vec![S::zero(); gr];
                for i in 0..gr {
                    let k = tw.data()[i];
                    for j in 0..gc {
                        let idx = i * gc + j;
                        dw[i] = dw[i] + g.data()[idx] * tx.data()[idx];
                        dx[idx] = dx[idx] * k;
                    }
                }
                vec![(*x, like(*x, dx)), (*w, like(*w, dw))]
            }
            Op::Affine(x, k) => vec![(*x, like(*x, g.data().iter().map(|&v| v * *k).collect()))],
            Op::Powf(x, p) => {
                let p = *p;
                let e = S::of(p);
                let d = move |u: S, x: S| {
                    if p == 0.0 {
                        S::zero()
                    } else if x == S::zero() {
                        if p > 1.0 {
                            S::zero()
                        } else if p == 1.0 {
                            u
                        } else {
                            u * e * S::min_positive_value().powf(e - S::one())
                        }
                    } else {
                        u * e * x.powf(e - S::one())
                    }
                };
                vec![(*x, ew(*x, &d))]
            }
            Op::Tanh(x) => vec![(*x, like(*x, zip_map(g, y, |u, t| u * (S::one() - t * t))))],
            Op::Sigmoid(x) => vec![(*x, like(*x, zip_map(g, y, |u, s| u * s * (S::one() - s))))],
            Op::Relu(x) => vec![(*x, ew(*x, &|u, v| if v > S::zero() { u } else { S::zero() }))],
            Op::Exp(x) => vec![(*x, like(*x, zip_map(g, y, |u, e| u * e)))],
            Op::Log(x) => vec![(*x, ew(*x, &|u, v| u / v))],
            Op::ClampMin(x, f) => {
                let f = *f;
                vec![(*x, ew(*x, &move |u, v| if v >= f { u } else { S::zero() }))]
            }
            Op::Softmax(x) => {
                let mut dx = Vec::with_capacity(g.len());
                for i in 0..gr {
                    let (gi, yi) = (g.row(i), y.row(i));
                    let dot: S = gi.iter().zip(yi).map(|(&a, &b)| a * b).sum();
                    dx.extend(gi.iter().zip(yi).map(|(&a, &b)| b * (a - dot)));
                }
                vec![(*x, like(*x, dx))]
            }
            Op::LogSoftmax(x) => {
                let mut dx = Vec::with_capacity(g.len());
                for i in 0..gr {
                    let (gi, yi) = (g.row(i), y.row(i));
                    let total: S = gi.iter().copied().sum();
                    dx.extend(gi.iter().zip(yi).map(|(&a, &l)| a - l.exp() * total));
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Concat(parts, axis) => {
                let mut out = Vec::with_capacity(parts.len());
                if *axis == 0 {
                    let mut start = 0;
                    for &p in parts {
                        let n = val(p).len();
                        out.push((p, like(p, g.data()[start..start + n].to_vec())));
                        start += n;
                    }
                } else {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = val(p).cols();
                        let mut d = Vec::with_capacity(gr * pc);
                        for i in 0..gr {
                            d.extend_from_slice(&g.row(i)[offset..offset + pc]);
                        }
                        out.push((p, like(p, d)));
                        offset += pc;
                    }
                }
                out
            }
            Op::SliceCols(x, start) => {
                let c = val(*x).cols();
                let mut d = vec![S::zero(); val(*x).len()];
                for i in 0..gr {
                    d[i * c + start..i * c + start + gc].copy_from_slice(g.row(i));
                }
                vec![(*x, like(*x, d))]
            }
            Op::SliceRows(x, start) => {
                let c = val(*x).cols();
                let mut d = vec![S::zero(); val(*x).len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*x, like(*x, d))]
            }
            Op::GatherRows(t, idx) => {
                let c = val(*t).cols();
                let mut d = vec![S::zero(); val(*t).len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] = d[i * c + j] + g.data()[k * c + j];
                    }
                }
                vec![(*t, like(*t, d))]
            }
            Op::Pick(x, cols) => {
                let c = val(*x).cols();
                let mut d = vec![S::zero(); val(*x).len()];
                for (i, &j) in cols.iter().enumerate() {
                    d[i * c + j] = g.data()[i];
                }
                vec![(*x, like(*x, d))]
            }
            Op::Sum(x) => vec![(*x, like(*x, vec![g.item(); val(*x).len()]))],
            Op::Unfold(x, starts, width) => {
                let c = val(*x).cols();
                let mut d = vec![S::zero(); val(*x).len()];
                for (p, &s) in starts.iter().enumerate() {
                    let src = &g.data()[p * width * c..(p + 1) * width * c];
                    for (o, &v) in d[s * c..(s + width) * c].iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::SegmentMax(x, src) => {
                let mut d = vec![S::zero(); val(*x).len()];
                for (k, &s) in src.iter().enumerate() {
                    d[s] = d[s] + g.data()[k];
                }
                vec![(*x, like(*x, d))]
            }
            Op::MaxCols(x, arg) => {
                let c = val(*x).cols();
                let mut d = vec![S::zero(); val(*x).len()];
                for (i, &j) in arg.iter().enumerate() {
                    d[i * c + j] = g.data()[i];
                }
                vec![(*x, like(*x, d))]
            }
            Op::RepeatRows(x) => {
                let mut d = vec![S::zero(); gc];
                for row in g.data().chunks(gc) {
                    for (o, &v) in d.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::RepeatCols(x) => {
                let d = g.data().chunks(gc).map(|row| row.iter().copied().sum()).collect();
                vec![(*x, like(*x, d))]
            }
            Op::Dropout(x, mask) => vec![(*x, like(*x, g.data().iter().zip(mask).map(|(&u, &m)| u * m).collect()))],
        }
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Vec<S> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Row-wise stabilized softmax of a value tensor.
pub(crate) fn softmax_data<S: Scalar>(t: &Tensor<S>) -> Result<Vec<S>> {
    let (r, c) = (t.rows(), t.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row(i);
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        if m.f64() < MASKED_ROW {
            return Err(Error::DegenerateDistribution);
        }
        let start = out.len();
        let mut z = S::zero();
        for &v in row {
            let e = (v - m).exp();
            z = z + e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o = *o / z;
        }
    }
    Ok(out)
}
