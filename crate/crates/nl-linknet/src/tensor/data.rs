//! The dense value type shared by the whole crate.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::scalar::Scalar;
use super::shape::Shape;
use crate::error::{Error, Result};

static FINITE_CHECKS: AtomicBool = AtomicBool::new(false);

/// Toggle NaN/Inf scanning of every op output on the tape. Off by default;
/// a debugging aid, not part of the hot path.
pub fn set_finite_checks(enabled: bool) {
    FINITE_CHECKS.store(enabled, Ordering::Relaxed);
}

pub fn finite_checks_enabled() -> bool {
    FINITE_CHECKS.load(Ordering::Relaxed)
}

/// Contiguous rank-4 array of scalars, row-major NCHW.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![E::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: E) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    /// Kaiming-style fan-in init: `N(0, sqrt(2 / fan_in))`. Samples are
    /// drawn in f64 so f32 and f64 models see the same stream.
    pub fn kaiming<R: Rng>(shape: Shape, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..shape.numel())
            .map(|_| E::from_f64_lossy(normal.sample(rng)))
            .collect();
        Tensor { shape, data }
    }

    /// I.i.d. standard normal entries, drawn in f64.
    pub fn randn<R: Rng>(shape: Shape, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let data = (0..shape.numel())
            .map(|_| E::from_f64_lossy(normal.sample(rng)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.data[self.shape.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: E) {
        let i = self.shape.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on non-scalar tensor of shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn map<F: Fn(E) -> E>(&self, f: F) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{context}: element {i} of shape {} is {v}",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Stack single-batch tensors along the batch axis.
    pub fn stack(items: &[&Tensor<E>]) -> Result<Tensor<E>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Usage("stack of zero tensors".into()))?;
        let s = first.shape();
        let mut data = Vec::with_capacity(s.numel() * items.len() / s.batch().max(1));
        let mut batch = 0;
        for t in items {
            if t.shape().channels() != s.channels()
                || t.shape().height() != s.height()
                || t.shape().width() != s.width()
            {
                return Err(Error::Shape(format!(
                    "stack of mismatched shapes {} vs {}",
                    t.shape(),
                    s
                )));
            }
            batch += t.shape().batch();
            data.extend_from_slice(t.data());
        }
        Tensor::new(
            Shape::new(batch, s.channels(), s.height(), s.width()),
            data,
        )
    }
}
