//! Minimal dense rank-4 tensor engine.
//!
//! Tensors are stored row-major in batch/channel/height/width order. The
//! operation set is exactly what the detector needs: 2-D (grouped)
//! convolution, 1-D same-padded convolution over channel descriptors,
//! spatial and channel pooling, and a handful of elementwise ops. Every
//! operation has a reverse-mode derivative registered in [`graph::Graph`],
//! so any block built from them is gradient-checkable.

pub mod graph;
pub mod ops;

use crate::error::{Error, Result};

/// Element type of the engine: `f32` for inference and training, `f64` for
/// finite-difference gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE_CODE: u8;

    fn from_f64(x: f64) -> Self;
    fn to_f64_val(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 0;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_val(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 1;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_val(self) -> f64 {
        self
    }
}

/// Batch/channel/height/width extent of a tensor. All components are ≥ 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "shape",
                format!("all components must be >= 1, got {n}x{c}x{h}x{w}"),
            ));
        }
        n.checked_mul(c)
            .and_then(|x| x.checked_mul(h))
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| Error::shape("shape", "element count overflows usize"))?;
        Ok(Shape { n, c, h, w })
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Linear index of element (n, c, h, w).
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Number of elements in one channel plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 array in n,c,h,w row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "data length {} does not match shape {} ({} elements)",
                    data.len(),
                    shape,
                    shape.numel()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Scalar tensor of shape 1x1x1x1.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape {
                n: 1,
                c: 1,
                h: 1,
                w: 1,
            },
            data: vec![value],
        }
    }

    /// Length-`len` vector laid out along the channel axis (1, len, 1, 1).
    pub fn channel_vector(values: Vec<T>) -> Result<Self> {
        let shape = Shape::new(1, values.len(), 1, 1)?;
        Tensor::from_vec(shape, values)
    }

    /// Length-`len` vector laid out along the width axis (1, 1, 1, len).
    pub fn row_vector(values: Vec<T>) -> Result<Self> {
        let shape = Shape::new(1, 1, 1, values.len())?;
        Tensor::from_vec(shape, values)
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        &mut self.data[self.shape.index(n, c, h, w)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Convert elementwise between precisions (exact when widening).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64_val())).collect(),
        }
    }
}
