//! Dense row-major tensors of rank 1 to 3.

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
    /// Median of absolute values; even counts average the middle pair.
    AbsMedian,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Shape(format!("rank must be 1..=3, got {}", shape.len())));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "extents {shape:?} imply {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self> {
        let rows: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| T::of(v)).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Number of rows when viewed as a matrix (leading axes flattened).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.data.len() / self.cols().max(1),
        }
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.is_empty() || shape.len() > 3 {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of squares, accumulated left to right.
    pub fn sum_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (n, k) = (self.shape[0], self.shape[1]);
        let (k2, m) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = Self::zeros(&[n, m]);
        gemm(n, k, m, T::one(), &self.data, false, &other.data, false, T::zero(), &mut out.data);
        Ok(out)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Reduce along `axis`, removing it from the shape (a rank-1 input
    /// reduces to a single-element vector).
    pub fn reduce(&self, kind: Reduction, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::Contract(format!(
                "axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        let extent = self.shape[axis];
        if extent == 0 {
            return Err(Error::EmptyAxis { axis });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        let mut lane = Vec::with_capacity(extent);
        for o in 0..outer {
            for i in 0..inner {
                lane.clear();
                lane.extend((0..extent).map(|e| self.data[(o * extent + e) * inner + i]));
                out.push(reduce_lane(&mut lane, kind));
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Self::new(shape, out)
    }
}

/// Reduce one lane; `lane` may be reordered.
pub fn reduce_lane<T: Scalar>(lane: &mut [T], kind: Reduction) -> T {
    match kind {
        Reduction::Sum => lane.iter().fold(T::zero(), |a, &v| a + v),
        Reduction::Mean => {
            lane.iter().fold(T::zero(), |a, &v| a + v) / T::from_usize(lane.len()).unwrap()
        }
        Reduction::Max => lane
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, v| if v > a { v } else { a }),
        Reduction::AbsMedian => abs_median(lane),
    }
}

/// Median of `|v|` over a non-empty slice. Reorders `values`.
pub fn abs_median<T: Scalar>(values: &mut [T]) -> T {
    for v in values.iter_mut() {
        *v = v.abs();
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / T::of(2.0)
    }
}

/// Row-wise softmax of `logits + mask`, with per-row max subtraction.
///
/// Mask entries must be `0` or `-inf`.
pub fn masked_softmax<T: Scalar>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape() != mask.shape() || logits.rank() != 2 {
        return Err(Error::Shape(format!(
            "logits {:?} and mask {:?} must be equal rank-2 shapes",
            logits.shape(),
            mask.shape()
        )));
    }
    let cols = logits.cols();
    let mut out = logits.clone();
    for (r, (row, mrow)) in out
        .data
        .chunks_mut(cols)
        .zip(mask.data.chunks(cols))
        .enumerate()
    {
        for (v, &m) in row.iter_mut().zip(mrow) {
            if m == T::neg_infinity() {
                *v = T::neg_infinity();
            } else if m != T::zero() {
                return Err(Error::Contract(format!("mask entry {m} is neither 0 nor -inf")));
            }
        }
        softmax_in_place(row).map_err(|_| Error::FullyMaskedRow { row: r })?;
    }
    Ok(out)
}

/// Softmax of one row where `-inf` marks excluded entries.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) -> std::result::Result<(), ()> {
    let max = row
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, v| if v > a { v } else { a });
    if max == T::neg_infinity() {
        return Err(());
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

/// Causal mask: `0` on and below the diagonal, `-inf` above.
pub fn causal_mask<T: Scalar>(t: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data[i * t + j] = T::neg_infinity();
        }
    }
    m
}
