//! Dense row-major tensors and the elementwise/loss primitives used by the
//! attacks and models.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Batches use `N x C x H x W` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(Error::invalid(format!("shape {shape:?} holds {n} elements but {} were given", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: (0..n).map(&mut f).collect() }
    }

    /// One-element tensor with empty shape.
    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the leading (batch) dimension; 1 for rank-0 tensors.
    pub fn batch_size(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements per leading-dimension entry.
    pub fn example_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn example(&self, i: usize) -> &[T] {
        let m = self.example_len();
        &self.data[i * m..(i + 1) * m]
    }

    pub fn example_mut(&mut self, i: usize) -> &mut [T] {
        let m = self.example_len();
        &mut self.data[i * m..(i + 1) * m]
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(&[], &self.shape)),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if checked_numel(&shape)? != self.data.len() {
            return Err(Error::shape(&shape, &self.shape));
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(shape, &self.shape));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sign with `sign(0) = 0`.
    pub fn sign(&self) -> Self {
        self.map(sign)
    }

    /// Elementwise `min(max(x, lo), hi)`.
    pub fn clamp(&self, lo: T, hi: T) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::invalid(format!("clamp bounds reversed: lo = {lo}, hi = {hi}")));
        }
        Ok(self.map(|v| v.max(lo).min(hi)))
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect() }
    }

    /// Copies a contiguous range of leading-dimension entries.
    pub fn slice_batch(&self, range: Range<usize>) -> Result<Self> {
        let n = self.batch_size();
        if self.shape.is_empty() || range.start > range.end || range.end > n {
            return Err(Error::invalid(format!("batch range {range:?} outside 0..{n}")));
        }
        let m = self.example_len();
        let mut shape = self.shape.clone();
        shape[0] = range.len();
        Ok(Self { shape, data: self.data[range.start * m..range.end * m].to_vec() })
    }

    /// Gathers leading-dimension entries by index.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.batch_size();
        let m = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            if i >= n {
                return Err(Error::invalid(format!("index {i} outside batch of {n}")));
            }
            data.extend_from_slice(self.example(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Concatenates along the leading dimension.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(&first.shape, &p.shape));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::invalid(format!("shape {shape:?} overflows")))
}

#[inline]
pub fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Standard normal CDF via the complementary error function.
#[inline]
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (-x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erfc()
}

#[inline]
pub fn normal_pdf<T: Scalar>(x: T) -> T {
    T::lit(0.398_942_280_401_432_7) * (T::lit(-0.5) * x * x).exp()
}

/// `x * Phi(x)` with the exact erf form of `Phi`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    normal_cdf(x) + x * normal_pdf(x)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax of one logit row into `probs`; returns the example's loss and
/// `1 - p[label]`, both computed without cancellation for confident rows.
pub(crate) fn cross_entropy_row<T: Scalar>(row: &[T], label: usize, probs: &mut [T]) -> (T, T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    let mut others = T::zero();
    for (j, (p, &z)) in probs.iter_mut().zip(row).enumerate() {
        *p = (z - max).exp();
        sum += *p;
        if j != label {
            others += *p;
        }
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    let loss = if row[label] == max { others.ln_1p() } else { max + sum.ln() - row[label] };
    (loss, others / sum)
}

/// Per-example cross-entropy of `logits` (`N x K`) against class labels.
pub fn per_example_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
    let (n, k) = check_logits(logits, labels)?;
    let mut probs = vec![T::zero(); k];
    Ok((0..n).map(|i| cross_entropy_row(&logits.data()[i * k..(i + 1) * k], labels[i], &mut probs).0).collect())
}

/// Mean softmax cross-entropy over the batch.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let per = per_example_cross_entropy(logits, labels)?;
    let n = T::lit(per.len() as f64);
    Ok(per.into_iter().sum::<T>() / n)
}

pub(crate) fn check_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let &[n, k] = logits.shape() else {
        return Err(Error::invalid(format!("logits must be rank 2, got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::shape(&[n], &[labels.len()]));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::LabelOutOfRange { index, label, classes: k });
    }
    Ok((n, k))
}

/// Mean over all elements of `(a - b)^2`.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.expect_shape(b.shape())?;
    if a.is_empty() {
        return Ok(T::zero());
    }
    let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(s / T::lit(a.len() as f64))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
