//! Dense row-major tensors, the global flatten ordering, and weight
//! initializers.
//!
//! Images are stored channels-last (`[height, width, channel]`). One flatten
//! ordering — `(h * W + w) * C + c` — is used everywhere: by the Flatten
//! layer and by the dense-to-convolution weight reshape. Keeping these two in
//! lockstep is what makes the head surgery an exact equivalence.

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Element type for tensor math: `f32` for training state, `f64` for
/// gradient-check builds.
pub trait Real:
    num_traits::Float + Copy + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array, row-major, channels-last for images.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Reinterprets the flat data under a new shape of equal size.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Hard check that every element is finite; engine operations are
    /// expected to uphold this and callers treat a failure as fatal.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise absolute max difference against another tensor.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Real> std::ops::Index<usize> for Tensor<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

impl<T: Real> std::ops::IndexMut<usize> for Tensor<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.data[i]
    }
}

/// The single row-major channels-last flatten ordering used across the
/// engine. Out-of-range indices are a programming error.
#[inline]
pub fn flatten_index(h: usize, w: usize, c: usize, width: usize, channels: usize) -> usize {
    assert!(w < width && c < channels, "flatten_index out of range");
    (h * width + w) * channels + c
}

/// Inverse of [`flatten_index`].
#[inline]
pub fn unflatten_index(flat: usize, width: usize, channels: usize) -> (usize, usize, usize) {
    let c = flat % channels;
    let hw = flat / channels;
    (hw / width, hw % width, c)
}

/// He-normal initializer: zero-mean samples with stddev `sqrt(2 / fan_in)`,
/// truncated at two standard deviations by resampling.
pub fn he_normal_init<T: Real>(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::Config("he_normal_init requires fan_in > 0".into()));
    }
    let stddev = (2.0 / fan_in as f64).sqrt();
    let bound = T::from_f64(2.0 * stddev);
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        let z = loop {
            let z = rng.standard_normal();
            if z.abs() <= 2.0 {
                break z;
            }
        };
        // Clamp in target precision so the truncation bound survives rounding.
        let x = T::from_f64(z * stddev);
        data.push(num_traits::clamp(x, -bound, bound));
    }
    Tensor::from_vec(shape, data)
}

/// Bias initializer: always zeros.
pub fn zeros_init<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}
