//! Dense n-dimensional `f64` tensor, row-major.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Value type of the whole engine. Gradients are held by the [`Tape`]
/// recording the computation, not by the tensor itself, so tensors stay
/// plain owned data that can be cloned, stored and sent between threads.
///
/// [`Tape`]: crate::autodiff::Tape
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `product(shape) == data.len()`.
    /// A rank-0 shape (`[]`) denotes a scalar with one element.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::BadShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: "element count does not match shape product",
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1-d tensor from a flat vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::BadShape {
                op: "item",
                shape: self.shape.clone(),
                reason: "expected a single-element tensor",
            });
        }
        Ok(self.data[0])
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for d in (0..self.shape.len()).rev() {
            debug_assert!(idx[d] < self.shape[d]);
            off += idx[d] * stride;
            stride *= self.shape[d];
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    /// Extracts the leading block `[0..keep[0], 0..keep[1], ...]` as a new
    /// tensor. `keep` must have the same rank and fit inside this shape.
    pub fn lead_block(&self, keep: &[usize]) -> Result<Tensor> {
        if keep.len() != self.shape.len()
            || keep.iter().zip(&self.shape).any(|(&k, &s)| k == 0 || k > s)
        {
            return Err(Error::ShapeMismatch {
                op: "lead_block",
                lhs: self.shape.clone(),
                rhs: keep.to_vec(),
            });
        }
        let mut out = Tensor::zeros(keep);
        for_lead_block(&self.shape, keep, |big, small| {
            out.data[small] = self.data[big];
        });
        Ok(out)
    }

    /// Adds `block` onto the leading block of this tensor in place.
    pub fn add_lead_block(&mut self, block: &Tensor) -> Result<()> {
        let keep = block.shape().to_vec();
        if keep.len() != self.shape.len()
            || keep.iter().zip(&self.shape).any(|(&k, &s)| k == 0 || k > s)
        {
            return Err(Error::ShapeMismatch {
                op: "add_lead_block",
                lhs: self.shape.clone(),
                rhs: keep,
            });
        }
        for_lead_block(&self.shape, &keep, |big, small| {
            self.data[big] += block.data[small];
        });
        Ok(())
    }

    /// Overwrites the leading block of this tensor with `block`.
    pub fn write_lead_block(&mut self, block: &Tensor) -> Result<()> {
        let keep = block.shape().to_vec();
        if keep.len() != self.shape.len()
            || keep.iter().zip(&self.shape).any(|(&k, &s)| k == 0 || k > s)
        {
            return Err(Error::ShapeMismatch {
                op: "write_lead_block",
                lhs: self.shape.clone(),
                rhs: keep,
            });
        }
        for_lead_block(&self.shape, &keep, |big, small| {
            self.data[big] = block.data[small];
        });
        Ok(())
    }

    /// Index of the maximum along `axis`, ties resolved toward the lowest
    /// index. The result has the input shape with `axis` removed (flattened
    /// row-major).
    pub fn max_index(&self, axis: usize) -> Result<Vec<usize>> {
        if axis >= self.shape.len() {
            return Err(Error::BadShape {
                op: "max_index",
                shape: self.shape.clone(),
                reason: "axis out of range",
            });
        }
        let n = self.shape[axis];
        if n == 0 {
            return Err(Error::BadShape {
                op: "max_index",
                shape: self.shape.clone(),
                reason: "axis is empty",
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0usize;
                let mut best_v = self.data[o * n * inner + i];
                for j in 1..n {
                    let v = self.data[(o * n + j) * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}

/// Visits every coordinate in the leading `keep` block of a `shape`-shaped
/// tensor, passing (flat index in the big tensor, flat index in the block).
fn for_lead_block(shape: &[usize], keep: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let small_len: usize = keep.iter().product();
    for flat_small in 0..small_len {
        let mut rem = flat_small;
        let mut flat_big = 0;
        for d in (0..rank).rev() {
            flat_big += (rem % keep[d]) * strides[d];
            rem /= keep[d];
        }
        f(flat_big, flat_small);
    }
}
