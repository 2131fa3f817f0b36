//! Dense NCHW tensors and the reverse-mode autodiff engine built on them.

mod conv;
mod graph;
pub mod gradcheck;
mod params;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use graph::{Activation, ConvRecord, Graph, Var};
pub use params::{read_checkpoint, write_checkpoint, ParamId, ParamStore};

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` (training and
/// inference) and `f64` (gradient checking).
///
/// Transcendental functions route through `libm` so results do not depend on
/// the platform's math library.
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn round_half_even(self) -> Self;
    fn is_finite(self) -> bool;

    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }

    fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
}

macro_rules! impl_real {
    ($t:ty, $exp:path, $tanh:path, $sqrt:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                $exp(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                $tanh(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                $sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn round_half_even(self) -> Self {
                <$t>::round_ties_even(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_real!(f32, libm::expf, libm::tanhf, libm::sqrtf);
impl_real!(f64, libm::exp, libm::tanh, libm::sqrt);

/// Four-dimensional shape `(batch, channels, height, width)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Size of one `H×W` plane.
    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape([self.n(), c, self.h(), self.w()])
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape([self.n(), self.c(), h, w])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}×{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Contiguous row-major NCHW buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![S::ZERO; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: S) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot hold shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> S) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n() {
            for c in 0..shape.c() {
                for h in 0..shape.h() {
                    for w in 0..shape.w() {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c() + c) * s.h() + h) * s.w() + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: S) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> S {
        let mut acc = S::ZERO;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_f64(self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise conversion to another precision.
    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Copy of one batch item as a `1×C×H×W` tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let s = self.shape;
        let len = s.c() * s.plane();
        Tensor {
            shape: Shape::new(1, s.c(), s.h(), s.w()),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stack `1×C×H×W` tensors along the batch axis.
    pub fn stack(items: &[Tensor<S>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        for t in items {
            if t.shape != s {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: s,
                    rhs: t.shape,
                });
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(items.len() * s.n(), s.c(), s.h(), s.w()),
            data,
        })
    }

    /// Spatial crop keeping the top-left `h×w` window.
    pub fn crop(&self, h: usize, w: usize) -> Self {
        let s = self.shape;
        let out = s.with_hw(h, w);
        let mut data = Vec::with_capacity(out.numel());
        for n in 0..s.n() {
            for c in 0..s.c() {
                for y in 0..h {
                    let row = self.index(n, c, y, 0);
                    data.extend_from_slice(&self.data[row..row + w]);
                }
            }
        }
        Tensor { shape: out, data }
    }

    /// Per-channel variance across batch and spatial positions, averaged
    /// over channels.
    pub fn mean_channel_variance(&self) -> f64 {
        let s = self.shape;
        let count = (s.n() * s.plane()) as f64;
        if s.c() == 0 || count == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        for c in 0..s.c() {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for n in 0..s.n() {
                let base = self.index(n, c, 0, 0);
                for &v in &self.data[base..base + s.plane()] {
                    let v = v.to_f64();
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / count;
            total += (sq / count - mean * mean).max(0.0);
        }
        total / s.c() as f64
    }
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor({}, {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, " …")?;
        }
        write!(f, ")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 4]).is_ok());
    }

    #[test]
    fn channel_variance_of_constant_is_zero() {
        let t = Tensor::<f32>::full(Shape::new(2, 3, 4, 4), 1.75);
        assert_eq!(t.mean_channel_variance(), 0.0);
    }

    #[test]
    fn channel_variance_known_values() {
        // one channel with values 0,2 → variance 1
        let t = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 2.0]).unwrap();
        assert!((t.mean_channel_variance() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn crop_and_stack() {
        let t = Tensor::<f32>::from_fn(Shape::new(1, 1, 3, 3), |[_, _, h, w]| (h * 3 + w) as f32);
        let c = t.crop(2, 2);
        assert_eq!(c.data(), &[0.0, 1.0, 3.0, 4.0]);
        let s = Tensor::stack(&[c.clone(), c]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 1, 2, 2));
    }
}
