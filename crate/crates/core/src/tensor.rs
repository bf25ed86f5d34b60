//! Dense row-major tensors of rank 0 to 4.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

pub const MAX_RANK: usize = 4;

/// Extents of a tensor. Feature maps are `N×C×H×W`, matrices `rows×cols`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; MAX_RANK],
    rank: usize,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(shape_err!("rank {} exceeds {}", dims.len(), MAX_RANK));
        }
        let mut d = [1; MAX_RANK];
        d[..dims.len()].copy_from_slice(dims);
        Ok(Shape { dims: d, rank: dims.len() })
    }

    pub fn scalar() -> Self {
        Shape { dims: [1; MAX_RANK], rank: 0 }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank]
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// `[n, c, h, w]` of a rank-4 shape.
    pub fn nchw(&self) -> Result<[usize; 4]> {
        if self.rank != 4 {
            return Err(shape_err!("expected N×C×H×W, got {:?}", self));
        }
        Ok(self.dims)
    }

    /// `[rows, cols]` of a rank-2 shape.
    pub fn matrix(&self) -> Result<[usize; 2]> {
        if self.rank != 2 {
            return Err(shape_err!("expected a matrix, got {:?}", self));
        }
        Ok([self.dims[0], self.dims[1]])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.dims()).finish()
    }
}

/// A dense real-valued array with an optional gradient accumulator.
///
/// All values are finite; constructors reject NaN and infinities.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::from_shape(shape, data)
    }

    pub fn from_shape(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(shape_err!(
                "{:?} needs {} values, got {}",
                shape,
                shape.numel(),
                data.len()
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    /// Builds a tensor from values already known to be finite.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::from_shape(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::from_shape(Shape::scalar(), vec![value])
    }

    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::from_shape(shape, (0..shape.numel()).map(f).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the values. Callers must keep them finite; see
    /// [`Tensor::check_finite`].
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        let dims = self.shape.dims();
        assert_eq!(index.len(), dims.len(), "index rank mismatch");
        index.iter().zip(dims).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index out of bounds");
            acc * d + i
        })
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        Ok(Tensor { shape, data: self.data.clone(), requires_grad: false, grad: None })
    }

    /// Channel `c` of an `N×C×H×W` tensor as `N×1×H×W`.
    pub fn channel(&self, c: usize) -> Result<Self> {
        let [n, ch, h, w] = self.shape.nchw()?;
        if c >= ch {
            return Err(shape_err!("channel {c} of {ch}"));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * hw);
        for b in 0..n {
            data.extend_from_slice(&self.data[(b * ch + c) * hw..(b * ch + c + 1) * hw]);
        }
        Self::new(&[n, 1, h, w], data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as trainable and allocates a zeroed accumulator.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient accumulator, allocating it if needed.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(shape_err!(
                "gradient of length {} for {:?}",
                delta.len(),
                self.shape
            ));
        }
        let n = self.data.len();
        let g = self.grad.get_or_insert_with(|| vec![T::zero(); n]);
        for (a, &d) in g.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(matches!(
            Tensor::<f32>::new(&[2], alloc::vec![1.0, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Tensor::<f32>::new(&[2, 2], alloc::vec![1.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(Shape::new(&[1, 1, 1, 1, 1]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| i as f64).unwrap();
        assert_eq!(t.at(&[1, 2, 3, 4]), (((1 * 3 + 2) * 4 + 3) * 5 + 4) as f64);
        assert_eq!(t.shape().nchw().unwrap(), [2, 3, 4, 5]);
        assert!(t.shape().matrix().is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f32>::zeros(&[3]).unwrap().with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 3]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
