//! Define-by-run reverse-mode differentiation.
//!
//! Operations execute eagerly on flat buffers. When at least one operand
//! is attached to a [`Tape`], the operation is also recorded as a node
//! holding whatever its backward rule needs. [`Tensor::backward`] walks
//! the node list once, in reverse creation order, accumulating gradients
//! into the [`Param`]s the tape watched. The tape is meant to be rebuilt
//! for every forward pass and is single-threaded.

use std::cell::RefCell;
use std::rc::Rc;

use super::special::digamma;
use super::tensor::{
    broadcast_shape, for_each_broadcast, mm_nn_acc, mm_nt_acc, mm_tn_acc, Mask, TapeNodeRef,
    Tensor,
};
use crate::error::{Error, Result};

/// Surrogate for -infinity in masked scores; keeps gradients finite
/// while exp() still underflows to exactly zero.
const MASKED_SCORE: f64 = -1e30;

// ---- parameters -----------------------------------------------------------

/// A named trainable tensor with a persistent gradient accumulator.
///
/// Backward passes add into `grad`; it keeps accumulating across calls
/// until [`Param::zero_grad`] resets it.
#[derive(Clone)]
pub struct Param {
    pub(crate) inner: Rc<ParamInner>,
}

pub(crate) struct ParamInner {
    name: String,
    shape: Vec<usize>,
    pub(crate) value: RefCell<Vec<f64>>,
    pub(crate) grad: RefCell<Vec<f64>>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Result<Param> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::Shape {
                op: "param",
                detail: format!("shape {:?} holds {numel} elements, got {}", shape, value.len()),
            });
        }
        Ok(Param {
            inner: Rc::new(ParamInner {
                name: name.into(),
                shape: shape.to_vec(),
                grad: RefCell::new(vec![0.0; numel]),
                value: RefCell::new(value),
            }),
        })
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn value(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.inner.value.borrow()
    }

    pub fn grad(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.inner.grad.borrow()
    }

    pub fn set_value(&self, value: Vec<f64>) {
        assert_eq!(value.len(), self.numel(), "param {}: value size", self.name());
        *self.inner.value.borrow_mut() = value;
    }

    /// In-place update of the stored value (optimizer hook).
    pub fn update(&self, f: impl FnOnce(&mut [f64], &[f64])) {
        let grad = self.inner.grad.borrow();
        let mut value = self.inner.value.borrow_mut();
        f(&mut value, &grad);
    }

    pub fn zero_grad(&self) {
        for g in self.inner.grad.borrow_mut().iter_mut() {
            *g = 0.0;
        }
    }

    pub fn scale_grad(&self, factor: f64) {
        for g in self.inner.grad.borrow_mut().iter_mut() {
            *g *= factor;
        }
    }
}

/// Ordered collection of the parameters of a model; the order is the
/// optimizer-state and checkpoint order.
#[derive(Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { params: Vec::new() }
    }

    pub fn register(&mut self, param: Param) -> Param {
        self.params.push(param.clone());
        param
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name() == name)
    }

    /// Total number of scalar parameters.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        for p in &self.params {
            for g in p.grad().iter() {
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    pub fn any_non_finite_grad(&self) -> bool {
        self.params.iter().any(|p| p.grad().iter().any(|g| !g.is_finite()))
    }

    /// Snapshot of every value buffer, in registration order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.value().clone()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot arity");
        for (p, v) in self.params.iter().zip(snapshot) {
            p.set_value(v.clone());
        }
    }
}

// ---- tape -----------------------------------------------------------------

pub struct Tape {
    pub(crate) inner: Rc<TapeInner>,
}

pub(crate) struct TapeInner {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

pub(crate) struct Node {
    rule: Rule,
    out: Rc<Vec<f64>>,
}

/// A recorded input: its forward value plus its node id when it was
/// itself produced on the tape (None = constant, no propagation).
struct Arg {
    data: Rc<Vec<f64>>,
    node: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum UnOp {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Square,
    Sqrt,
    Abs,
    Softplus,
    Relu,
    Lgamma,
}

enum Rule {
    Leaf {
        param: Rc<ParamInner>,
    },
    Binary {
        op: BinOp,
        a: Arg,
        b: Arg,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
        out_shape: Vec<usize>,
    },
    Unary {
        op: UnOp,
        a: Arg,
    },
    Affine {
        a: Arg,
        mul: f64,
    },
    Matmul {
        a: Arg,
        b: Arg,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast2 {
        a: Arg,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape {
        a: Arg,
    },
    ConcatLast {
        parts: Vec<Arg>,
        lead: usize,
        widths: Vec<usize>,
    },
    SliceLast {
        a: Arg,
        lead: usize,
        full: usize,
        offset: usize,
        len: usize,
    },
    SelectAxis1 {
        a: Arg,
        d0: usize,
        d1: usize,
        inner: usize,
        index: usize,
    },
    StackAxis1 {
        parts: Vec<Arg>,
        d0: usize,
        inner: usize,
    },
    SumAll {
        a: Arg,
    },
    SumAxis1 {
        a: Arg,
        d0: usize,
        d1: usize,
        inner: usize,
    },
    MaskedSoftmax {
        a: Arg,
        batch: usize,
        groups: usize,
        t: usize,
        qmask: Rc<Vec<bool>>,
        kmask: Rc<Vec<bool>>,
    },
}

impl Rule {
    fn name(&self) -> &'static str {
        match self {
            Rule::Leaf { .. } => "leaf",
            Rule::Binary { op, .. } => match op {
                BinOp::Add => "add",
                BinOp::Sub => "sub",
                BinOp::Mul => "mul",
                BinOp::Div => "div",
            },
            Rule::Unary { op, .. } => match op {
                UnOp::Neg => "neg",
                UnOp::Exp => "exp",
                UnOp::Log => "log",
                UnOp::Tanh => "tanh",
                UnOp::Sigmoid => "sigmoid",
                UnOp::Square => "square",
                UnOp::Sqrt => "sqrt",
                UnOp::Abs => "abs",
                UnOp::Softplus => "softplus",
                UnOp::Relu => "relu",
                UnOp::Lgamma => "lgamma",
            },
            Rule::Affine { .. } => "affine",
            Rule::Matmul { .. } => "matmul",
            Rule::TransposeLast2 { .. } => "transpose_last2",
            Rule::Reshape { .. } => "reshape",
            Rule::ConcatLast { .. } => "concat_last",
            Rule::SliceLast { .. } => "slice_last",
            Rule::SelectAxis1 { .. } => "select_axis1",
            Rule::StackAxis1 { .. } => "stack_axis1",
            Rule::SumAll { .. } => "sum_all",
            Rule::SumAxis1 { .. } => "sum_axis1",
            Rule::MaskedSoftmax { .. } => "masked_softmax",
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
            }),
        }
    }

    /// Register a parameter for this pass; the returned tensor is a leaf
    /// whose gradient lands in the parameter's accumulator. The value is
    /// snapshotted: later mutation of the param does not affect the tape.
    pub fn watch(&self, param: &Param) -> Tensor {
        let data = Rc::new(param.value().clone());
        let id = self.push(
            Rule::Leaf {
                param: Rc::clone(&param.inner),
            },
            Rc::clone(&data),
        );
        Tensor {
            shape: param.shape().to_vec(),
            data,
            node: Some(TapeNodeRef {
                tape: Rc::clone(&self.inner),
                id,
            }),
        }
    }

    pub fn watch_all(&self, params: &ParamSet) -> Vec<Tensor> {
        params.iter().map(|p| self.watch(p)).collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    /// First node whose output holds a non-finite value, as
    /// `(node index, op name)`. Diagnostic for numeric faults.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        let nodes = self.inner.nodes.borrow();
        for (i, node) in nodes.iter().enumerate() {
            if node.out.iter().any(|v| !v.is_finite()) {
                return Some((i, node.rule.name()));
            }
        }
        None
    }

    fn push(&self, rule: Rule, out: Rc<Vec<f64>>) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node { rule, out });
        nodes.len() - 1
    }
}

// ---- recording helpers ----------------------------------------------------

/// The common tape of the given operands, if any; errors when two
/// operands sit on different tapes.
fn common_tape(op: &'static str, inputs: &[&Tensor]) -> Result<Option<Rc<TapeInner>>> {
    let mut found: Option<Rc<TapeInner>> = None;
    for t in inputs {
        if let Some(node) = &t.node {
            match &found {
                None => found = Some(Rc::clone(&node.tape)),
                Some(existing) => {
                    if !Rc::ptr_eq(existing, &node.tape) {
                        return Err(Error::TapeMismatch { op });
                    }
                }
            }
        }
    }
    Ok(found)
}

fn arg_of(t: &Tensor) -> Arg {
    Arg {
        data: Rc::clone(&t.data),
        node: t.node.as_ref().map(|n| n.id),
    }
}

/// Finish an op: wrap the output, recording a node when any input was
/// on a tape.
fn finish(
    op: &'static str,
    inputs: &[&Tensor],
    shape: Vec<usize>,
    data: Vec<f64>,
    rule: impl FnOnce() -> Rule,
) -> Result<Tensor> {
    let tape = common_tape(op, inputs)?;
    let data = Rc::new(data);
    let node = tape.map(|tape| {
        let id = {
            let mut nodes = tape.nodes.borrow_mut();
            nodes.push(Node {
                rule: rule(),
                out: Rc::clone(&data),
            });
            nodes.len() - 1
        };
        TapeNodeRef { tape, id }
    });
    Ok(Tensor { shape, data, node })
}

// ---- forward ops ----------------------------------------------------------

impl Tensor {
    fn binary(&self, other: &Tensor, op: BinOp, name: &'static str) -> Result<Tensor> {
        let out_shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| Error::Shape {
            op: name,
            detail: format!("{:?} vs {:?}", self.shape, other.shape),
        })?;
        if op == BinOp::Div {
            if let Some(index) = other.data.iter().position(|&v| v == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    index,
                    value: 0.0,
                });
            }
        }
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        let (a, b) = (&self.data, &other.data);
        if self.shape == other.shape {
            match op {
                BinOp::Add => {
                    for i in 0..numel {
                        data[i] = a[i] + b[i];
                    }
                }
                BinOp::Sub => {
                    for i in 0..numel {
                        data[i] = a[i] - b[i];
                    }
                }
                BinOp::Mul => {
                    for i in 0..numel {
                        data[i] = a[i] * b[i];
                    }
                }
                BinOp::Div => {
                    for i in 0..numel {
                        data[i] = a[i] / b[i];
                    }
                }
            }
        } else {
            for_each_broadcast(&out_shape, &self.shape, &other.shape, |o, ai, bi| {
                data[o] = match op {
                    BinOp::Add => a[ai] + b[bi],
                    BinOp::Sub => a[ai] - b[bi],
                    BinOp::Mul => a[ai] * b[bi],
                    BinOp::Div => a[ai] / b[bi],
                };
            });
        }
        finish(name, &[self, other], out_shape.clone(), data, || Rule::Binary {
            op,
            a: arg_of(self),
            b: arg_of(other),
            a_shape: self.shape.clone(),
            b_shape: other.shape.clone(),
            out_shape,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Div, "div")
    }

    fn unary(&self, op: UnOp, name: &'static str) -> Result<Tensor> {
        if matches!(op, UnOp::Log) {
            if let Some(index) = self.data.iter().position(|&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    index,
                    value: self.data[index],
                });
            }
        }
        if matches!(op, UnOp::Lgamma) {
            if let Some(index) = self.data.iter().position(|&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "lgamma",
                    index,
                    value: self.data[index],
                });
            }
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .map(|&x| match op {
                UnOp::Neg => -x,
                UnOp::Exp => x.exp(),
                UnOp::Log => x.ln(),
                UnOp::Tanh => x.tanh(),
                UnOp::Sigmoid => sigmoid_scalar(x),
                UnOp::Square => x * x,
                UnOp::Sqrt => x.sqrt(),
                UnOp::Abs => x.abs(),
                UnOp::Softplus => softplus_scalar(x),
                UnOp::Relu => x.max(0.0),
                UnOp::Lgamma => super::special::lgamma(x),
            })
            .collect();
        finish(name, &[self], self.shape.clone(), data, || Rule::Unary {
            op,
            a: arg_of(self),
        })
    }

    pub fn neg(&self) -> Tensor {
        self.unary(UnOp::Neg, "neg").expect("neg is total")
    }

    pub fn exp(&self) -> Tensor {
        self.unary(UnOp::Exp, "exp").expect("exp is total")
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary(UnOp::Log, "log")
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(UnOp::Tanh, "tanh").expect("tanh is total")
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(UnOp::Sigmoid, "sigmoid").expect("sigmoid is total")
    }

    pub fn square(&self) -> Tensor {
        self.unary(UnOp::Square, "square").expect("square is total")
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(UnOp::Sqrt, "sqrt").expect("sqrt is total")
    }

    pub fn abs(&self) -> Tensor {
        self.unary(UnOp::Abs, "abs").expect("abs is total")
    }

    /// Overflow-safe `ln(1 + exp(x))`; strictly positive for finite input.
    pub fn softplus(&self) -> Tensor {
        self.unary(UnOp::Softplus, "softplus").expect("softplus is total")
    }

    pub fn relu(&self) -> Tensor {
        self.unary(UnOp::Relu, "relu").expect("relu is total")
    }

    /// Elementwise log-gamma; gradient flows via the digamma function.
    pub fn lgamma(&self) -> Result<Tensor> {
        self.unary(UnOp::Lgamma, "lgamma")
    }

    /// `self * mul + add` with scalar constants.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&x| x * mul + add).collect();
        finish("affine", &[self], self.shape.clone(), data, || Rule::Affine {
            a: arg_of(self),
            mul,
        })
        .expect("affine is total")
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.affine(1.0, c)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.affine(c, 0.0)
    }

    /// Matrix product over the last two axes; leading axes must match
    /// exactly and are treated as a batch dimension.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let ra = self.shape.len();
        let rb = other.shape.len();
        if ra < 2 || rb < 2 || ra != rb || self.shape[..ra - 2] != other.shape[..rb - 2] {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (kb, n) = (other.shape[rb - 2], other.shape[rb - 1]);
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner extents differ: {:?} vs {:?}", self.shape, other.shape),
            });
        }
        let batch: usize = self.shape[..ra - 2].iter().product();
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            mm_nn_acc(
                &self.data[bi * m * k..(bi + 1) * m * k],
                &other.data[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut out_shape = self.shape[..ra - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        finish("matmul", &[self, other], out_shape, data, || Rule::Matmul {
            a: arg_of(self),
            b: arg_of(other),
            batch,
            m,
            k,
            n,
        })
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let r = self.shape.len();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose_last2",
                detail: format!("rank {r} tensor"),
            });
        }
        let (rows, cols) = (self.shape[r - 2], self.shape[r - 1]);
        let batch: usize = self.shape[..r - 2].iter().product();
        let mut data = vec![0.0; self.numel()];
        for bi in 0..batch {
            let src = &self.data[bi * rows * cols..(bi + 1) * rows * cols];
            let dst = &mut data[bi * rows * cols..(bi + 1) * rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
        let mut out_shape = self.shape[..r - 2].to_vec();
        out_shape.push(cols);
        out_shape.push(rows);
        finish("transpose_last2", &[self], out_shape, data, || {
            Rule::TransposeLast2 {
                a: arg_of(self),
                batch,
                rows,
                cols,
            }
        })
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        finish("reshape", &[self], shape.to_vec(), self.data.as_ref().clone(), || {
            Rule::Reshape { a: arg_of(self) }
        })
    }

    /// Slice a contiguous range of the last axis.
    pub fn slice_last(&self, offset: usize, len: usize) -> Result<Tensor> {
        let r = self.shape.len();
        if r == 0 {
            return Err(Error::Shape {
                op: "slice_last",
                detail: "rank 0".into(),
            });
        }
        let full = self.shape[r - 1];
        if offset + len > full {
            return Err(Error::Shape {
                op: "slice_last",
                detail: format!("range {offset}..{} of extent {full}", offset + len),
            });
        }
        let lead: usize = self.shape[..r - 1].iter().product();
        let mut data = vec![0.0; lead * len];
        for i in 0..lead {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.data[i * full + offset..i * full + offset + len]);
        }
        let mut out_shape = self.shape[..r - 1].to_vec();
        out_shape.push(len);
        finish("slice_last", &[self], out_shape, data, || Rule::SliceLast {
            a: arg_of(self),
            lead,
            full,
            offset,
            len,
        })
    }

    /// Select index `i` along axis 1, dropping that axis:
    /// `[d0, d1, rest...] -> [d0, rest...]`.
    pub fn select_axis1(&self, index: usize) -> Result<Tensor> {
        let r = self.shape.len();
        if r < 2 {
            return Err(Error::Shape {
                op: "select_axis1",
                detail: format!("rank {r} tensor"),
            });
        }
        let (d0, d1) = (self.shape[0], self.shape[1]);
        if index >= d1 {
            return Err(Error::Shape {
                op: "select_axis1",
                detail: format!("index {index} of extent {d1}"),
            });
        }
        let inner: usize = self.shape[2..].iter().product();
        let mut data = vec![0.0; d0 * inner];
        for i0 in 0..d0 {
            let src = (i0 * d1 + index) * inner;
            data[i0 * inner..(i0 + 1) * inner].copy_from_slice(&self.data[src..src + inner]);
        }
        let mut out_shape = vec![d0];
        out_shape.extend_from_slice(&self.shape[2..]);
        finish("select_axis1", &[self], out_shape, data, || Rule::SelectAxis1 {
            a: arg_of(self),
            d0,
            d1,
            inner,
            index,
        })
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor {
        let mut acc = 0.0;
        for &v in self.data.iter() {
            acc += v;
        }
        finish("sum_all", &[self], vec![1], vec![acc], || Rule::SumAll {
            a: arg_of(self),
        })
        .expect("sum_all is total")
    }

    /// Sum over axis 1: `[d0, d1, rest...] -> [d0, rest...]`.
    pub fn sum_axis1(&self) -> Result<Tensor> {
        let r = self.shape.len();
        if r < 2 {
            return Err(Error::Shape {
                op: "sum_axis1",
                detail: format!("rank {r} tensor"),
            });
        }
        let (d0, d1) = (self.shape[0], self.shape[1]);
        let inner: usize = self.shape[2..].iter().product();
        let mut data = vec![0.0; d0 * inner];
        for i0 in 0..d0 {
            for t in 0..d1 {
                let src = (i0 * d1 + t) * inner;
                for j in 0..inner {
                    data[i0 * inner + j] += self.data[src + j];
                }
            }
        }
        let mut out_shape = vec![d0];
        out_shape.extend_from_slice(&self.shape[2..]);
        finish("sum_axis1", &[self], out_shape, data, || Rule::SumAxis1 {
            a: arg_of(self),
            d0,
            d1,
            inner,
        })
    }

    /// Row-wise softmax over the last axis of `[B, ..., T, T]` scores,
    /// restricted by a shared query/key validity mask of shape `[B, T]`.
    pub fn masked_softmax(&self, mask: &Mask) -> Result<Tensor> {
        self.masked_softmax_qk(mask, mask)
    }

    /// General form with distinct query and key masks.
    ///
    /// Rows of masked queries are all zero. Valid queries normalize over
    /// valid keys only; masked keys get exactly zero weight. A valid
    /// query with no valid key is an error.
    pub fn masked_softmax_qk(&self, qmask: &Mask, kmask: &Mask) -> Result<Tensor> {
        let r = self.shape.len();
        if r < 3 {
            return Err(Error::Shape {
                op: "masked_softmax",
                detail: format!("need [batch, ..., queries, keys], got {:?}", self.shape),
            });
        }
        let batch = self.shape[0];
        let t = self.shape[r - 1];
        if self.shape[r - 2] != t
            || qmask.batch() != batch
            || qmask.steps() != t
            || kmask.batch() != batch
            || kmask.steps() != t
        {
            return Err(Error::Shape {
                op: "masked_softmax",
                detail: format!(
                    "scores {:?} with query mask {}x{} / key mask {}x{}",
                    self.shape,
                    qmask.batch(),
                    qmask.steps(),
                    kmask.batch(),
                    kmask.steps()
                ),
            });
        }
        let groups: usize = self.shape[1..r - 2].iter().product();
        let mut data = vec![0.0; self.numel()];
        for b in 0..batch {
            for g in 0..groups {
                for q in 0..t {
                    let row = ((b * groups + g) * t + q) * t;
                    if !qmask.valid(b, q) {
                        continue; // row stays all-zero
                    }
                    let mut max = f64::NEG_INFINITY;
                    let mut any = false;
                    for k in 0..t {
                        if kmask.valid(b, k) {
                            any = true;
                            max = max.max(self.data[row + k]);
                        }
                    }
                    if !any {
                        return Err(Error::DegenerateSoftmaxRow { batch: b, query: q });
                    }
                    let mut sum = 0.0;
                    for k in 0..t {
                        let score = if kmask.valid(b, k) {
                            self.data[row + k]
                        } else {
                            MASKED_SCORE
                        };
                        let e = (score - max).exp();
                        data[row + k] = e;
                        sum += e;
                    }
                    for k in 0..t {
                        data[row + k] /= sum;
                    }
                }
            }
        }
        finish("masked_softmax", &[self], self.shape.clone(), data, || {
            Rule::MaskedSoftmax {
                a: arg_of(self),
                batch,
                groups,
                t,
                qmask: qmask.bits_rc(),
                kmask: kmask.bits_rc(),
            }
        })
    }
}

/// Concatenate along the last axis; all leading axes must match.
pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_last of zero tensors".into()));
    }
    let first = parts[0];
    let r = first.shape.len();
    if r == 0 {
        return Err(Error::Shape {
            op: "concat_last",
            detail: "rank 0".into(),
        });
    }
    let lead_shape = &first.shape[..r - 1];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if p.shape.len() != r || &p.shape[..r - 1] != lead_shape {
            return Err(Error::Shape {
                op: "concat_last",
                detail: format!("{:?} vs {:?}", first.shape, p.shape),
            });
        }
        widths.push(p.shape[r - 1]);
    }
    let lead: usize = lead_shape.iter().product();
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; lead * total];
    for i in 0..lead {
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            data[i * total + off..i * total + off + w].copy_from_slice(&p.data[i * w..(i + 1) * w]);
            off += w;
        }
    }
    let mut out_shape = lead_shape.to_vec();
    out_shape.push(total);
    finish("concat_last", parts, out_shape, data, || Rule::ConcatLast {
        parts: parts.iter().map(|p| arg_of(p)).collect(),
        lead,
        widths,
    })
}

/// Stack `n` tensors of shape `[d0, rest...]` into `[d0, n, rest...]`.
pub fn stack_axis1(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("stack_axis1 of zero tensors".into()));
    }
    let first = parts[0];
    if first.shape.is_empty() {
        return Err(Error::Shape {
            op: "stack_axis1",
            detail: "rank 0".into(),
        });
    }
    for p in parts {
        if p.shape != first.shape {
            return Err(Error::Shape {
                op: "stack_axis1",
                detail: format!("{:?} vs {:?}", first.shape, p.shape),
            });
        }
    }
    let d0 = first.shape[0];
    let inner: usize = first.shape[1..].iter().product();
    let n = parts.len();
    let mut data = vec![0.0; d0 * n * inner];
    for i0 in 0..d0 {
        for (j, p) in parts.iter().enumerate() {
            data[(i0 * n + j) * inner..(i0 * n + j + 1) * inner]
                .copy_from_slice(&p.data[i0 * inner..(i0 + 1) * inner]);
        }
    }
    let mut out_shape = vec![d0, n];
    out_shape.extend_from_slice(&first.shape[1..]);
    finish("stack_axis1", parts, out_shape, data, || Rule::StackAxis1 {
        parts: parts.iter().map(|p| arg_of(p)).collect(),
        d0,
        inner,
    })
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// ---- backward -------------------------------------------------------------

impl Tensor {
    /// Reverse sweep from a scalar loss: every watched parameter that
    /// contributed receives its gradient (accumulating on top of
    /// whatever was already there). Each tape node is visited once, in
    /// reverse creation order, so repeated runs are deterministic.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        let node = self.node.as_ref().ok_or_else(|| {
            Error::Contract("backward requires a loss attached to a tape".into())
        })?;
        let nodes = node.tape.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(node.id + 1);
        grads.resize_with(node.id + 1, || None);
        grads[node.id] = Some(vec![1.0]);
        for i in (0..=node.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes[i], &g, &mut grads);
        }
        Ok(())
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.rule {
        Rule::Leaf { param } => {
            let mut pg = param.grad.borrow_mut();
            for (dst, &src) in pg.iter_mut().zip(g) {
                *dst += src;
            }
        }
        Rule::Binary {
            op,
            a,
            b,
            a_shape,
            b_shape,
            out_shape,
        } => {
            let (av, bv) = (&a.data, &b.data);
            if let Some(ia) = a.node {
                let ga = grad_buf(grads, ia, av.len());
                for_each_broadcast(out_shape, a_shape, b_shape, |o, ai, bi| {
                    ga[ai] += match op {
                        BinOp::Add | BinOp::Sub => g[o],
                        BinOp::Mul => g[o] * bv[bi],
                        BinOp::Div => g[o] / bv[bi],
                    };
                });
            }
            if let Some(ib) = b.node {
                let gb = grad_buf(grads, ib, bv.len());
                for_each_broadcast(out_shape, a_shape, b_shape, |o, ai, bi| {
                    gb[bi] += match op {
                        BinOp::Add => g[o],
                        BinOp::Sub => -g[o],
                        BinOp::Mul => g[o] * av[ai],
                        BinOp::Div => -g[o] * av[ai] / (bv[bi] * bv[bi]),
                    };
                });
            }
        }
        Rule::Unary { op, a } => {
            if let Some(ia) = a.node {
                let av = &a.data;
                let out = &node.out;
                let ga = grad_buf(grads, ia, av.len());
                for i in 0..av.len() {
                    ga[i] += match op {
                        UnOp::Neg => -g[i],
                        UnOp::Exp => g[i] * out[i],
                        UnOp::Log => g[i] / av[i],
                        UnOp::Tanh => g[i] * (1.0 - out[i] * out[i]),
                        UnOp::Sigmoid => g[i] * out[i] * (1.0 - out[i]),
                        UnOp::Square => g[i] * 2.0 * av[i],
                        UnOp::Sqrt => g[i] / (2.0 * out[i]),
                        UnOp::Abs => {
                            if av[i] > 0.0 {
                                g[i]
                            } else if av[i] < 0.0 {
                                -g[i]
                            } else {
                                0.0
                            }
                        }
                        UnOp::Softplus => g[i] * sigmoid_scalar(av[i]),
                        UnOp::Relu => {
                            if av[i] > 0.0 {
                                g[i]
                            } else {
                                0.0
                            }
                        }
                        UnOp::Lgamma => g[i] * digamma(av[i]),
                    };
                }
            }
        }
        Rule::Affine { a, mul } => {
            if let Some(ia) = a.node {
                let ga = grad_buf(grads, ia, a.data.len());
                for i in 0..a.data.len() {
                    ga[i] += g[i] * mul;
                }
            }
        }
        Rule::Matmul { a, b, batch, m, k, n } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            if let Some(ia) = a.node {
                let ga = grad_buf(grads, ia, a.data.len());
                for bi in 0..batch {
                    mm_nt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &b.data[bi * k * n..(bi + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                    );
                }
            }
            if let Some(ib) = b.node {
                let gb = grad_buf(grads, ib, b.data.len());
                for bi in 0..batch {
                    mm_tn_acc(
                        &a.data[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                    );
                }
            }
        }
        Rule::TransposeLast2 { a, batch, rows, cols } => {
            if let Some(ia) = a.node {
                let ga = grad_buf(grads, ia, a.data.len());
                for bi in 0..*batch {
                    let goff = bi * rows * cols;
                    for i in 0..*rows {
                        for j in 0..*cols {
                            ga[goff + i * cols + j] += g[goff + j * rows + i];
                        }
                    }
                }
            }
        }
        Rule::Reshape { a } => {
            if let Some(ia) = a.node {
                let ga = grad_buf(grads, ia, a.data.len());
                for i in 0..a.data.len() {
                    ga[i] += g[i];
                }
            }
        }
        Rule::ConcatLast { parts, lead, widths } => {
            let total: usize = widths.iter().sum();
            let mut off = 0;
            for (p, &w) in parts.iter().zip(widths) {
                if let Some(ip) = p.node {
                    let gp = grad_buf(grads, ip, p.data.len());
                    for i in 0..*lead {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Rule::SliceLast {
            a,
            lead,
            full,
            offset,
            len,
        } => {
            if let Some(ia) = a.node {
                let ga = grad_buf(grads, ia, a.data.len());
                for i in 0..*lead {
                    for j in 0..*len {
                        ga[i * full + offset + j] += g[i * len + j];
                    }
                }
            }
        }
        Rule::SelectAxis1 {
            a,
            d0,
            d1,
            inner,
            index,
        } => {
            if let Some(ia) = a.node {
                let ga = grad_buf(grads, ia, a.data.len());
                for i0 in 0..*d0 {
                    let dst = (i0 * d1 + index) * inner;
                    for j in 0..*inner {
                        ga[dst + j] += g[i0 * inner + j];
                    }
                }
            }
        }
        Rule::StackAxis1 { parts, d0, inner } => {
            let n = parts.len();
            for (j, p) in parts.iter().enumerate() {
                if let Some(ip) = p.node {
                    let gp = grad_buf(grads, ip, p.data.len());
                    for i0 in 0..*d0 {
                        for r in 0..*inner {
                            gp[i0 * inner + r] += g[(i0 * n + j) * inner + r];
                        }
                    }
                }
            }
        }
        Rule::SumAll { a } => {
            if let Some(ia) = a.node {
                let ga = grad_buf(grads, ia, a.data.len());
                for v in ga.iter_mut() {
                    *v += g[0];
                }
            }
        }
        Rule::SumAxis1 { a, d0, d1, inner } => {
            if let Some(ia) = a.node {
                let ga = grad_buf(grads, ia, a.data.len());
                for i0 in 0..*d0 {
                    for t in 0..*d1 {
                        let dst = (i0 * d1 + t) * inner;
                        for j in 0..*inner {
                            ga[dst + j] += g[i0 * inner + j];
                        }
                    }
                }
            }
        }
        Rule::MaskedSoftmax {
            a,
            batch,
            groups,
            t,
            qmask,
            kmask,
        } => {
            if let Some(ia) = a.node {
                let w = &node.out;
                let ga = grad_buf(grads, ia, a.data.len());
                for b in 0..*batch {
                    for grp in 0..*groups {
                        for q in 0..*t {
                            if !qmask[b * t + q] {
                                continue;
                            }
                            let row = ((b * groups + grp) * t + q) * t;
                            let mut dot = 0.0;
                            for k in 0..*t {
                                dot += g[row + k] * w[row + k];
                            }
                            for k in 0..*t {
                                if kmask[b * t + k] {
                                    ga[row + k] += w[row + k] * (g[row + k] - dot);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
