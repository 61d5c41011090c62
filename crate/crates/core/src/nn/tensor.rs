use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. Training runs in `f32`; gradient checks in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major tensor. Feature maps use `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                context: "tensor element count",
                expected: vec![expected],
                actual: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(n, c, h, w)` of a rank-4 feature map.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape {
                context: "expected rank-4 NCHW tensor",
                expected: vec![0, 0, 0, 0],
                actual: self.shape.clone(),
            }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape {
                context: "reshape",
                expected: shape.to_vec(),
                actual: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor<T>, scale: T) -> Result<()> {
        self.expect_shape("add_scaled", other.shape())?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().fold(T::zero(), |a, b| a + b)
    }

    pub(crate) fn expect_shape(&self, context: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape {
                context,
                expected: shape.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Rearranges `[N, C, H, W]` into `[N, C·r², H/r, W/r]`, moving each `r×r` block into channels.
pub fn space_to_depth<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape {
            context: "space_to_depth needs extents divisible by the block size",
            expected: vec![n, c, r, r],
            actual: input.shape().to_vec(),
        });
    }
    let (oh, ow, oc) = (h / r, w / r, c * r * r);
    let mut out = Tensor::zeros(&[n, oc, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let och = (ch * r + y % r) * r + x % r;
                    dst[((b * oc + och) * oh + y / r) * ow + x / r] =
                        src[((b * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`space_to_depth`]; also its exact gradient.
pub fn depth_to_space<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, ic, ih, iw) = input.dims4()?;
    if r == 0 || ic % (r * r) != 0 {
        return Err(Error::Shape {
            context: "depth_to_space needs channels divisible by block area",
            expected: vec![n, r * r, ih, iw],
            actual: input.shape().to_vec(),
        });
    }
    let (c, h, w) = (ic / (r * r), ih * r, iw * r);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let src = input.data();
    let dst = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let och = (ch * r + y % r) * r + x % r;
                    dst[((b * c + ch) * h + y) * w + x] =
                        src[((b * ic + och) * ih + y / r) * iw + x / r];
                }
            }
        }
    }
    Ok(out)
}
