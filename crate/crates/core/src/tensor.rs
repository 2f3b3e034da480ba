//! Dense row-major n-dimensional arrays.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(invalid!("shape {shape:?} needs {len} elements, got {}", data.len()));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::cast(x.as_f64())).collect() }
    }

    /// Elementwise `self += other`; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(invalid!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Interprets the tensor as `[N, C, H, W]`, inserting a leading unit
    /// batch dimension for rank-3 input.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match *self.shape.as_slice() {
            [n, c, h, w] => (n, c, h, w),
            [c, h, w] => (1, c, h, w),
            _ => panic!("expected rank 3 or 4 tensor, got {:?}", self.shape),
        }
    }
}

impl<T: Clone> Tensor<T> {
    /// The `i`-th slab along the leading axis.
    pub fn index_axis0(&self, i: usize) -> Tensor<T> {
        let inner: usize = self.shape[1..].iter().product();
        Tensor { shape: self.shape[1..].to_vec(), data: self.data[i * inner..(i + 1) * inner].to_vec() }
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| invalid!("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(first.data.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(invalid!("stack shape mismatch: {:?} vs {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// Integer label map `[H, W]` (or `[D, H, W]` for stitched volumes).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: &[usize], data: Vec<u8>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(invalid!("label shape {shape:?} needs {len} elements, got {}", data.len()));
        }
        Ok(LabelMap { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        LabelMap { shape: shape.to_vec(), data: vec![0; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.index_axis0(1).data(), &[3.0, 4.0]);
    }

    #[test]
    fn stack_rejects_ragged() {
        let a = Tensor::<f64>::zeros(&[2]);
        let b = Tensor::<f64>::zeros(&[3]);
        assert!(Tensor::stack(&[a.clone(), b]).is_err());
        assert_eq!(Tensor::stack(&[a.clone(), a]).unwrap().shape(), &[2, 2]);
    }
}
