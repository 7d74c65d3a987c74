//! Dense 4-D tensors in batch, channel, height, width layout.
//!
//! Storage is reference counted so that cloning a tensor (for example to
//! capture it in a backward closure) never copies the data. Tensors are
//! immutable once shared; [`Tensor::make_mut`] copies on write.

use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Scalar element type. Implemented for `f32` (storage for training and
/// inference) and `f64` (used by gradient checks).
pub trait Float:
    num_traits::Float
    + Default
    + fmt::Debug
    + fmt::Display
    + AddAssign
    + SubAssign
    + MulAssign
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with arbitrary element strides.
    ///
    /// # Safety
    /// All pointers must be valid for the index ranges implied by the
    /// dimensions and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Float for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Extents of a 4-D tensor. All dimensions are at least 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape::new(1, 1, 1, 1);

    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn is_scalar(&self) -> bool {
        *self == Shape::SCALAR
    }

    /// Row-major strides; broadcast (size-1) axes get stride 0 when
    /// `broadcast` is set.
    pub(crate) fn strides(&self, broadcast: bool) -> [usize; 4] {
        let d = self.dims();
        let mut s = [0; 4];
        let mut acc = 1;
        for i in (0..4).rev() {
            s[i] = if broadcast && d[i] == 1 { 0 } else { acc };
            acc *= d[i];
        }
        s
    }

    /// True when `other` can be broadcast over `self` along singleton axes.
    pub fn accepts_broadcast(&self, other: &Shape) -> bool {
        self.dims()
            .iter()
            .zip(other.dims().iter())
            .all(|(&a, &b)| a == b || b == 1)
    }

    pub fn with_channels(&self, channels: usize) -> Shape {
        Shape { channels, ..*self }
    }

    pub fn with_spatial(&self, height: usize, width: usize) -> Shape {
        Shape {
            height,
            width,
            ..*self
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

#[derive(Clone)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.dims().contains(&0) {
            return Err(Error::contract(format!("zero-sized dimension in {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::contract(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Constructor for internal kernels whose output length is known to be right.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self::from_parts(shape, vec![value; shape.numel()])
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for h in 0..shape.height {
                    for w in 0..shape.width {
                        data.push(f(b, c, h, w));
                    }
                }
            }
        }
        Self::from_parts(shape, data)
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::lit(v)
            })
            .collect();
        Self::from_parts(shape, data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, low: f64, high: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::lit(rng.random_range(low..high)))
            .collect();
        Self::from_parts(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Mutable access, copying the buffer first if it is shared.
    pub fn make_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Identity of the underlying buffer; stable while any clone is alive.
    pub(crate) fn storage_id(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((b * s.channels + c) * s.height + h) * s.width + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(b, c, h, w)]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other, "zip_map")?;
        Ok(Self::from_parts(
            self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape,
            self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        )
    }

    pub fn expect_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        Ok(())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.len() as f64
    }

    pub fn max_abs_f64(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    }

    /// Largest elementwise absolute difference, computed in f64.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch item `b` as a 1×C×H×W tensor.
    pub fn batch_item(&self, b: usize) -> Tensor<T> {
        let s = self.shape;
        let n = s.channels * s.plane();
        Self::from_parts(
            Shape::new(1, s.channels, s.height, s.width),
            self.data[b * n..(b + 1) * n].to_vec(),
        )
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("cannot stack an empty list"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut batch = 0;
        for t in items {
            if t.shape.dims()[1..] != s.dims()[1..] {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: s,
                    rhs: t.shape,
                });
            }
            batch += t.shape.batch;
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_parts(
            Shape::new(batch, s.channels, s.height, s.width),
            data,
        ))
    }

    /// Spatial crop `[top, top+height) x [left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let s = self.shape;
        if height == 0 || width == 0 || top + height > s.height || left + width > s.width {
            return Err(Error::contract(format!(
                "crop {height}x{width}+{top}+{left} outside {s}"
            )));
        }
        let out = s.with_spatial(height, width);
        let mut data = Vec::with_capacity(out.numel());
        for b in 0..s.batch {
            for c in 0..s.channels {
                for h in top..top + height {
                    let base = self.offset(b, c, h, left);
                    data.extend_from_slice(&self.data[base..base + width]);
                }
            }
        }
        Ok(Self::from_parts(out, data))
    }
}

impl<T: Float> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor({}, {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, " ...")?;
        }
        write!(f, ")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 0, 2, 2), vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 4]).is_ok());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::<f32>::from_fn(Shape::new(2, 3, 4, 5), |b, c, h, w| {
            (b * 1000 + c * 100 + h * 10 + w) as f32
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.offset(1, 0, 1, 0)], 1010.0);
    }

    #[test]
    fn broadcast_strides() {
        let s = Shape::new(2, 1, 4, 4);
        assert_eq!(s.strides(true), [16, 0, 4, 1]);
        assert_eq!(s.strides(false), [16, 16, 4, 1]);
        assert!(Shape::new(2, 3, 4, 4).accepts_broadcast(&s));
        assert!(!s.accepts_broadcast(&Shape::new(2, 3, 4, 4)));
    }

    #[test]
    fn crop_and_stack() {
        let t = Tensor::<f32>::from_fn(Shape::new(1, 2, 4, 4), |_, c, h, w| {
            (c * 16 + h * 4 + w) as f32
        });
        let c = t.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0, 22.0, 23.0, 26.0, 27.0]);
        let s = Tensor::stack(&[c.clone(), c]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 2, 2));
        assert!(t.crop(3, 0, 2, 2).is_err());
    }

    #[test]
    fn make_mut_copies_shared_storage() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let mut b = a.clone();
        b.make_mut()[0] = 1.0;
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 1.0);
    }
}
