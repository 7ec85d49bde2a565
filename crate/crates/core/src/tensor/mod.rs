//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Nothing here knows about trajectories or maps; it is plain numerics:
//! elementwise arithmetic, 2D cross-correlation with its backward passes,
//! Adam, and finite-difference gradient checking. Generic over `f32`/`f64`
//! so training runs single precision while tests verify in double.

mod adam;
mod conv;
mod gradcheck;

pub use adam::{adam_step, AdamParams, AdamState};
pub use conv::{
    conv2d, conv2d_backward_bias, conv2d_backward_input, conv2d_backward_kernels, conv_output_len,
};
pub(crate) use conv::{
    conv2d_acc, conv2d_backward_bias_acc, conv2d_backward_input_acc, conv2d_backward_kernels_acc,
};
pub use gradcheck::{finite_diff_grad, max_relative_error};

use crate::{Error, Result};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use num_traits::Float;

/// Element type for tensors: `f32` or `f64`.
pub trait Scalar: Float + fmt::Debug + Default + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an `f64` constant into the working precision.
#[inline]
pub(crate) fn cast<T: Scalar>(x: f64) -> T {
    T::from(x).expect("constant representable in target float type")
}

/// Dense row-major tensor. The last axis is contiguous.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from raw data; the data length must equal the shape
    /// product (axes of length zero are rejected).
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected = checked_numel(shape)?;
        if data.len() != expected {
            return Err(Error::Shape {
                context: "Tensor::from_vec",
                expected: vec![expected],
                got: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = checked_numel(shape).expect("tensor shape overflows usize");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
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

    pub fn dims1(&self, context: &'static str) -> Result<usize> {
        match self.shape[..] {
            [a] => Ok(a),
            _ => Err(self.rank_error(context, 1)),
        }
    }

    pub fn dims3(&self, context: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(self.rank_error(context, 3)),
        }
    }

    pub fn dims4(&self, context: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(self.rank_error(context, 4)),
        }
    }

    fn rank_error(&self, context: &'static str, want: usize) -> Error {
        Error::Shape {
            context,
            expected: vec![want],
            got: self.shape.clone(),
        }
    }

    /// Element at a multi-index. Intended for tests and small lookups; hot
    /// paths index `data()` directly.
    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let at = self.offset(index);
        self.data[at] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut at = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (len {dim})");
            at = at * dim + ix;
        }
        at
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }

    fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                context,
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, context: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, context)?;
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

    /// Elementwise sum.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "Tensor::add", |a, b| a + b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "Tensor::hadamard", |a, b| a * b)
    }

    /// Logistic function of every element.
    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid_scalar)
    }

    /// Hyperbolic tangent of every element.
    pub fn tanh(&self) -> Self {
        self.map(Float::tanh)
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "Tensor::accumulate")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// `self += factor * other`.
    pub fn accumulate_scaled(&mut self, other: &Self, factor: T) -> Result<()> {
        self.check_same_shape(other, "Tensor::accumulate_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + factor * b;
        }
        Ok(())
    }

    /// `self += a ∘ b` (elementwise product accumulated in place).
    pub fn accumulate_hadamard(&mut self, a: &Self, b: &Self) -> Result<()> {
        self.check_same_shape(a, "Tensor::accumulate_hadamard")?;
        self.check_same_shape(b, "Tensor::accumulate_hadamard")?;
        for ((dst, &x), &y) in self.data.iter_mut().zip(&a.data).zip(&b.data) {
            *dst = *dst + x * y;
        }
        Ok(())
    }

    pub fn scale_inplace(&mut self, factor: T) {
        for x in &mut self.data {
            *x = *x * factor;
        }
    }

    pub fn fill(&mut self, value: T) {
        for x in &mut self.data {
            *x = value;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    /// Sum of squared elements.
    pub fn sq_sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x)
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// For a `C×H×W` tensor, the sum over each channel plane (rank-1 result).
    /// This is the bias gradient of a convolution.
    pub fn channel_sums(&self) -> Result<Self> {
        let (c, h, w) = self.dims3("Tensor::channel_sums")?;
        let plane = h * w;
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            out.push(
                self.data[ch * plane..(ch + 1) * plane]
                    .iter()
                    .fold(T::zero(), |acc, &x| acc + x),
            );
        }
        Self::from_vec(&[c], out)
    }

    /// For a `C×H×W` tensor, adds `bias[c]` to every element of channel `c`.
    pub fn add_channel_bias(&mut self, bias: &Self) -> Result<()> {
        let (c, h, w) = self.dims3("Tensor::add_channel_bias")?;
        let blen = bias.dims1("Tensor::add_channel_bias bias")?;
        if blen != c {
            return Err(Error::Shape {
                context: "Tensor::add_channel_bias",
                expected: vec![c],
                got: vec![blen],
            });
        }
        let plane = h * w;
        for ch in 0..c {
            let b = bias.data[ch];
            for x in &mut self.data[ch * plane..(ch + 1) * plane] {
                *x = *x + b;
            }
        }
        Ok(())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    let mut numel = 1usize;
    for &dim in shape {
        if dim == 0 {
            return Err(Error::Argument {
                context: "tensor shape",
                message: alloc::format!("zero-length axis in {shape:?}"),
            });
        }
        numel = numel.checked_mul(dim).ok_or(Error::Argument {
            context: "tensor shape",
            message: alloc::format!("shape {shape:?} overflows usize"),
        })?;
    }
    Ok(numel)
}

/// Numerically stable logistic function; satisfies `σ(-x) = 1 - σ(x)`
/// to within rounding for all finite inputs.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
