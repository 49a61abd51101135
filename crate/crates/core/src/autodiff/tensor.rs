//! Dense row-major f64 tensors.
//!
//! A [`Tensor`] is an immutable value: shape plus a shared flat buffer.
//! When produced by an operation recorded on a [`super::Tape`] it also
//! carries a handle to its tape node; a tensor without a node is a
//! constant and never receives gradient.

use std::rc::Rc;

use super::tape::TapeInner;
use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) node: Option<TapeNodeRef>,
}

#[derive(Clone)]
pub(crate) struct TapeNodeRef {
    pub(crate) tape: Rc<TapeInner>,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("on_tape", &self.node.is_some())
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Constant tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!("shape {:?} holds {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![0.0; numel]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![value; numel]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::full(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Single stored value of a one-element tensor.
    pub fn to_scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "to_scalar on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_on_tape(&self) -> bool {
        self.node.is_some()
    }

    /// Same value with the tape link severed; never receives gradient.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

/// Boolean validity mask over a padded batch: `batch` rows of `steps`
/// positions, true = real data, false = padding.
#[derive(Clone, Debug)]
pub struct Mask {
    batch: usize,
    steps: usize,
    bits: Rc<Vec<bool>>,
}

impl Mask {
    pub fn new(batch: usize, steps: usize, bits: Vec<bool>) -> Result<Mask> {
        if bits.len() != batch * steps {
            return Err(Error::Shape {
                op: "mask",
                detail: format!("{batch}x{steps} mask needs {} bits, got {}", batch * steps, bits.len()),
            });
        }
        Ok(Mask {
            batch,
            steps,
            bits: Rc::new(bits),
        })
    }

    /// Left-aligned mask: row `i` has `lengths[i]` leading valid steps.
    pub fn from_lengths(lengths: &[usize], steps: usize) -> Mask {
        let mut bits = vec![false; lengths.len() * steps];
        for (i, &len) in lengths.iter().enumerate() {
            for t in 0..len.min(steps) {
                bits[i * steps + t] = true;
            }
        }
        Mask {
            batch: lengths.len(),
            steps,
            bits: Rc::new(bits),
        }
    }

    pub fn all_valid(batch: usize, steps: usize) -> Mask {
        Mask {
            batch,
            steps,
            bits: Rc::new(vec![true; batch * steps]),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn valid(&self, row: usize, t: usize) -> bool {
        self.bits[row * self.steps + t]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub(crate) fn bits_rc(&self) -> Rc<Vec<bool>> {
        Rc::clone(&self.bits)
    }

    /// Number of valid steps in a row.
    pub fn count(&self, row: usize) -> usize {
        self.bits[row * self.steps..(row + 1) * self.steps]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// 0/1 tensor of this mask, shape `[batch, steps]`.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor {
            shape: vec![self.batch, self.steps],
            data: Rc::new(data),
            node: None,
        }
    }
}

// ---- broadcasting helpers -------------------------------------------------

/// Broadcast result shape, numpy rules (right-aligned, extents equal or 1).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Per-axis input strides aligned to `out_shape`, zero on broadcast axes.
fn aligned_strides(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    // row-major strides of the input
    let mut in_strides = vec![0usize; in_shape.len()];
    let mut acc = 1usize;
    for i in (0..in_shape.len()).rev() {
        in_strides[i] = acc;
        acc *= in_shape[i];
    }
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        if i >= pad && in_shape[i - pad] != 1 {
            out[i] = in_strides[i - pad];
        }
    }
    out
}

/// Visit every output element of a broadcast binary op with the flat
/// offsets of the output and both inputs.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    let sa = aligned_strides(out_shape, a_shape);
    let sb = aligned_strides(out_shape, b_shape);
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ai, bi);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            ai += sa[axis];
            bi += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            ai -= sa[axis] * out_shape[axis];
            bi -= sb[axis] * out_shape[axis];
        }
    }
}

// ---- raw matmul kernels ---------------------------------------------------

/// out = a(m x k) . b(k x n), accumulating into `out`.
pub(crate) fn mm_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += g(m x n) . b(k x n)^T  -> (m x k)
pub(crate) fn mm_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            orow[p] += acc;
        }
    }
}

/// out += a(m x k)^T . g(m x n)  -> (k x n)
pub(crate) fn mm_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
}
