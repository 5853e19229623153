//! Dense row-major `f64` tensors and the order-statistic primitives shared by
//! the quantize and prune operators.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major n-dimensional array of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, rejecting extent/length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} has a zero extent"
            )));
        }
        if expected != data.len() {
            return Err(Error::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor over `data`.
    pub fn from_slice(data: &[f64]) -> Result<Self> {
        Self::new(vec![data.len()], data.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Internal constructor for results of arithmetic on already validated
    /// tensors. Values may overflow to infinity; callers that care check
    /// [`Tensor::is_finite`].
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// In-place access for the single owner of the tensor.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected: n,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, context: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape(), context)?;
        Ok(Self::from_raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape(), "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Euclidean norm over all elements.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0.0).count()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn expect_shape(&self, expected: &[usize], context: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                context: context.to_string(),
                expected: expected.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Linearly interpolated order statistic: with sorted values `v` and
/// `p = a * (M - 1)`, returns `v[floor p] + frac(p) * (v[ceil p] - v[floor p])`.
pub fn quantile(x: &Tensor, a: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::InvalidArgument(format!(
            "quantile fraction {a} outside [0, 1]"
        )));
    }
    let mut sorted = x.data().to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(interpolate_sorted(&sorted, a))
}

pub(crate) fn interpolate_sorted(sorted: &[f64], a: f64) -> f64 {
    let p = a * (sorted.len() - 1) as f64;
    let lo = p.floor() as usize;
    let hi = p.ceil() as usize;
    let frac = p - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Elementwise `min(max(x, lo), hi)`.
pub fn clip(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if lo > hi {
        return Err(Error::InvalidArgument(format!(
            "clip bounds inverted: lo {lo} > hi {hi}"
        )));
    }
    Ok(x.map(|v| v.max(lo).min(hi)))
}

/// Flat indices of the `k` smallest `|score|` values, ordered by the key
/// `(|score|, index)` so ties resolve toward the lower index. The returned
/// indices are sorted ascending.
pub fn select_k_smallest_magnitude(scores: &Tensor, k: usize) -> Result<Vec<usize>> {
    let m = scores.len();
    if k > m {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} of {m} elements"
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let data = scores.data();
    let key = |&a: &usize, &b: &usize| -> Ordering {
        data[a].abs().total_cmp(&data[b].abs()).then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..m).collect();
    if k < m {
        idx.select_nth_unstable_by(k - 1, key);
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}
