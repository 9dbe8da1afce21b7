//! Dense row-major tensors and pairwise index contraction.
//!
//! Contraction is evaluated by permuting both operands so that the contracted
//! axes become a single inner dimension and then running one matrix product.
//! The nested-loop definition (sum over the shared indices of the products of
//! elements) is kept in the test module as the reference.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// An N-order array of `f64` in row-major order. A 0-order tensor (scalar)
/// has an empty shape and exactly one element.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeData {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "empty vector");
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for slot in t.data.iter_mut() {
            *slot = f(&idx);
            increment(&mut idx, shape);
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Reorders axes so that output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.rank())?;
        if perm.iter().enumerate().all(|(k, &p)| k == p) {
            return Ok(self.clone());
        }
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let old_strides = self.strides();
        let gather: Vec<usize> = perm.iter().map(|&p| old_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; new_shape.len()];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(&gather).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            increment(&mut idx, &new_shape);
        }
        Ok(Self {
            shape: new_shape,
            data: out,
        })
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Which axes of `a` and `b` are summed together, and how the surviving axes
/// are ordered in the result.
///
/// Surviving axes are numbered `a`'s free axes first (in their original
/// order), then `b`'s. `output_order[k]` names the surviving axis placed at
/// output position `k`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContractionSpec {
    pub pairs: Vec<(usize, usize)>,
    pub output_order: Option<Vec<usize>>,
}

impl ContractionSpec {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        Self {
            pairs,
            output_order: None,
        }
    }

    /// Plain tensor product: no shared indices.
    pub fn outer() -> Self {
        Self::default()
    }

    pub fn with_output_order(mut self, order: Vec<usize>) -> Self {
        self.output_order = Some(order);
        self
    }

    fn validate(&self, a: &[usize], b: &[usize]) -> Result<()> {
        let mut seen_a = vec![false; a.len()];
        let mut seen_b = vec![false; b.len()];
        for &(ia, ib) in &self.pairs {
            if ia >= a.len() {
                return Err(Error::AxisOutOfRange {
                    tensor: 'a',
                    axis: ia,
                    rank: a.len(),
                });
            }
            if ib >= b.len() {
                return Err(Error::AxisOutOfRange {
                    tensor: 'b',
                    axis: ib,
                    rank: b.len(),
                });
            }
            if seen_a[ia] || seen_b[ib] {
                return Err(Error::InvalidSpec(format!(
                    "axis pair ({ia}, {ib}) reuses an axis"
                )));
            }
            seen_a[ia] = true;
            seen_b[ib] = true;
            if a[ia] != b[ib] {
                return Err(Error::DimensionMismatch {
                    axis_a: ia,
                    dim_a: a[ia],
                    axis_b: ib,
                    dim_b: b[ib],
                });
            }
        }
        if let Some(order) = &self.output_order {
            let free = a.len() + b.len() - 2 * self.pairs.len();
            check_permutation(order, free)?;
        }
        Ok(())
    }
}

/// Contracts `a` with `b` along the axis pairs in `spec`.
pub fn contract(a: &DenseTensor, b: &DenseTensor, spec: &ContractionSpec) -> Result<DenseTensor> {
    spec.validate(a.shape(), b.shape())?;

    let contracted_a: Vec<usize> = spec.pairs.iter().map(|p| p.0).collect();
    let contracted_b: Vec<usize> = spec.pairs.iter().map(|p| p.1).collect();
    let free_a: Vec<usize> = (0..a.rank()).filter(|i| !contracted_a.contains(i)).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|i| !contracted_b.contains(i)).collect();

    let perm_a: Vec<usize> = free_a.iter().chain(&contracted_a).copied().collect();
    let perm_b: Vec<usize> = contracted_b.iter().chain(&free_b).copied().collect();
    let a_p = a.permute(&perm_a)?;
    let b_p = b.permute(&perm_b)?;

    let m: usize = free_a.iter().map(|&i| a.shape[i]).product();
    let k: usize = contracted_a.iter().map(|&i| a.shape[i]).product();
    let n: usize = free_b.iter().map(|&i| b.shape[i]).product();

    let mut out = vec![0.0; m * n];
    matmul_into(a_p.data(), b_p.data(), &mut out, m, k, n);

    let shape: Vec<usize> = free_a
        .iter()
        .map(|&i| a.shape[i])
        .chain(free_b.iter().map(|&i| b.shape[i]))
        .collect();
    let result = DenseTensor { shape, data: out };
    match &spec.output_order {
        Some(order) => result.permute(order),
        None => Ok(result),
    }
}

/// Tensor product: the result shape is `a.shape ++ b.shape`.
pub fn outer(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
    let mut shape = a.shape.clone();
    shape.extend_from_slice(&b.shape);
    let mut data = Vec::with_capacity(a.len() * b.len());
    for &x in &a.data {
        data.extend(b.data.iter().map(|&y| x * y));
    }
    DenseTensor { shape, data }
}

/// Applies `contract(item, b, spec)` to every batch member. Members must share
/// a shape; output order follows input order.
pub fn batched_contract(
    batch: &[DenseTensor],
    b: &DenseTensor,
    spec: &ContractionSpec,
) -> Result<Vec<DenseTensor>> {
    if let Some(first) = batch.first() {
        for (index, item) in batch.iter().enumerate().skip(1) {
            if item.shape != first.shape {
                return Err(Error::HeterogeneousBatch {
                    index,
                    expected: first.shape.clone(),
                    found: item.shape.clone(),
                });
            }
        }
    }
    batch.par_iter().map(|a| contract(a, b, spec)).collect()
}

/// `out (m x n) = a (m x k) * b (k x n)`, all row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..shape.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

fn check_permutation(perm: &[usize], rank: usize) -> Result<()> {
    if perm.len() != rank {
        return Err(Error::InvalidSpec(format!(
            "output order has {} entries for {} surviving axes",
            perm.len(),
            rank
        )));
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::InvalidSpec(format!(
                "output order {perm:?} is not a permutation"
            )));
        }
        seen[p] = true;
    }
    Ok(())
}
