//! Dense tensors and the reverse-mode differentiation tape.

mod check;
mod composite;
mod kernels;
mod tape;

#[cfg(test)]
mod tests;

pub use check::{grad_check, GradCheckReport};
pub use composite::one_hot;
pub use kernels::norm_coord;
pub use tape::{GradMap, Op, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Storage precision of a tensor payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn flag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn from_flag(flag: u8) -> Option<Self> {
        match flag {
            4 => Some(Precision::F32),
            8 => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Element type of the engine: `f32` for training, `f64` for verification.
pub trait Real:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// A dense n-dimensional array in row-major order with an optional gradient
/// buffer. Tensors are plain values; differentiation happens on a [`Tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{shape:?} (numel {numel})"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    /// Accumulation across multiple backward extractions is additive.
    pub fn accumulate_grad(&mut self, delta: &[F]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![F::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Uniform samples in `[lo, hi)`. Sampling happens in f64 so the stream
    /// is identical across precisions.
    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::of(rng.gen_range(lo..hi)))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Zero-mean normal samples with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::of(z * std)
            })
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }
}
