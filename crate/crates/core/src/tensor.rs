//! Dense row-major tensors and their pointwise and reduction kernels.
//!
//! Every layer in the crate works on `[batch, channel, height, width]`
//! (or `[batch, time, channel, height, width]`) tensors stored with the
//! innermost dimension last. Training runs in `f32`; gradient checks use
//! `f64` through the same generic code.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

/// Floating point element type of a [`Tensor`].
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Logistic function kept strictly inside (0, 1).
///
/// In `f32` the exact value rounds to 1.0 for inputs above ~17, so saturated
/// results are pinned to the nearest representable interior value.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    y.max(T::min_positive_value()).min(below_one::<T>())
}

/// Hyperbolic tangent kept strictly inside (-1, 1).
#[inline]
pub fn tanh<T: Scalar>(x: T) -> T {
    let lim = below_one::<T>();
    x.tanh().max(-lim).min(lim)
}

#[inline]
pub fn leaky_relu<T: Scalar>(x: T, alpha: T) -> T {
    if x >= T::zero() {
        x
    } else {
        alpha * x
    }
}

#[inline]
fn below_one<T: Scalar>() -> T {
    T::one() - T::epsilon() / T::lit(2.0)
}

/// Pointwise unary functions accepted by [`elementwise_map`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pointwise<T> {
    Sigmoid,
    Tanh,
    LeakyRelu(T),
    Scale(T),
}

/// Pointwise binary functions accepted by [`elementwise_zip`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Biased (population) variance.
    Variance,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}...", &self.data[..PREVIEW])
        }
    }
}

fn validate_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != len {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from row-major data, rejecting inconsistent shapes and
    /// non-finite values.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernels whose output shape is correct by
    /// construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert!(validate_shape(&shape, data.len()).is_ok(), "{shape:?}");
        Tensor { shape, data }
    }

    /// # Panics
    /// If any dimension is zero or the shape is empty.
    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        validate_shape(shape, len).expect("tensor dimensions must be >= 1");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Uniform samples in `[lo, hi)`, drawn in `f64` so that the same seed
    /// yields the same values in either precision (up to rounding).
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Overwrites a single element. Used by finite-difference probes.
    pub fn set(&mut self, index: usize, value: T) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("tensor element {index}")));
        }
        match self.data.get_mut(index) {
            Some(v) => {
                *v = value;
                Ok(())
            }
            None => Err(Error::OutOfRange(format!(
                "index {index} for tensor of {} elements",
                self.data.len()
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape, self.data.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub(crate) fn into_shape(self, shape: Vec<usize>) -> Self {
        Tensor::from_parts(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Copies `[n, t, ...]` into a `[n, ...]` tensor for one time index.
    pub(crate) fn time_slice(&self, t: usize) -> Self {
        let (n, steps) = (self.shape[0], self.shape[1]);
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(n * inner);
        for b in 0..n {
            let start = (b * steps + t) * inner;
            data.extend_from_slice(&self.data[start..start + inner]);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.shape[2..]);
        Tensor::from_parts(shape, data)
    }

    /// Inverse of [`Tensor::time_slice`]: stacks `[n, ...]` steps along a new
    /// axis 1.
    pub(crate) fn stack_time(steps: &[Self]) -> Self {
        let n = steps[0].shape[0];
        let inner: usize = steps[0].shape[1..].iter().product();
        let mut data = Vec::with_capacity(n * steps.len() * inner);
        for b in 0..n {
            for s in steps {
                data.extend_from_slice(&s.data[b * inner..(b + 1) * inner]);
            }
        }
        let mut shape = vec![n, steps.len()];
        shape.extend_from_slice(&steps[0].shape[1..]);
        Tensor::from_parts(shape, data)
    }
}

/// Applies a pointwise unary function to every element.
pub fn elementwise_map<T: Scalar>(t: &Tensor<T>, op: Pointwise<T>) -> Tensor<T> {
    match op {
        Pointwise::Sigmoid => t.map(sigmoid),
        Pointwise::Tanh => t.map(tanh),
        Pointwise::LeakyRelu(alpha) => t.map(|v| leaky_relu(v, alpha)),
        Pointwise::Scale(s) => t.map(|v| v * s),
    }
}

/// Combines two equally shaped tensors element by element.
pub fn elementwise_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: Binary) -> Result<Tensor<T>> {
    match op {
        Binary::Add => a.zip_map(b, "add", |x, y| x + y),
        Binary::Sub => a.zip_map(b, "sub", |x, y| x - y),
        Binary::Mul => a.zip_map(b, "mul", |x, y| x * y),
    }
}

/// Reduces over `axes`, removing them from the shape. Reducing every axis
/// leaves a single-element tensor of shape `[1]`; an empty axis set returns
/// the input unchanged.
pub fn reduce<T: Scalar>(t: &Tensor<T>, axes: &[usize], kind: ReduceKind) -> Result<Tensor<T>> {
    let rank = t.rank();
    if let Some(&axis) = axes.iter().find(|&&a| a >= rank) {
        return Err(Error::AxisOutOfRange { axis, rank });
    }
    if axes.is_empty() {
        return Ok(t.clone());
    }
    let reduced: Vec<bool> = (0..rank).map(|a| axes.contains(&a)).collect();
    let kept: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).collect();
    let out_shape: Vec<usize> = if kept.is_empty() {
        vec![1]
    } else {
        kept.iter().map(|&a| t.shape[a]).collect()
    };
    let out_len: usize = out_shape.iter().product();
    let count = (t.len() / out_len) as f64;

    // Output flat index for every input element.
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for &a in kept.iter().rev() {
        strides[a] = acc;
        acc *= t.shape[a];
    }
    let mut targets = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..t.len() {
        targets.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>());
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < t.shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }

    let mut sums = vec![0.0f64; out_len];
    for (&v, &o) in t.data.iter().zip(&targets) {
        sums[o] += v.as_f64();
    }
    let out: Vec<f64> = match kind {
        ReduceKind::Sum => sums,
        ReduceKind::Mean => sums.iter().map(|s| s / count).collect(),
        ReduceKind::Variance => {
            let means: Vec<f64> = sums.iter().map(|s| s / count).collect();
            let mut sq = vec![0.0f64; out_len];
            for (&v, &o) in t.data.iter().zip(&targets) {
                let d = v.as_f64() - means[o];
                sq[o] += d * d;
            }
            sq.iter().map(|s| s / count).collect()
        }
    };
    Ok(Tensor::from_parts(out_shape, out.into_iter().map(T::lit).collect()))
}
