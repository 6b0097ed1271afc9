use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Like [`Tensor::from_vec`] for sizes the caller already guarantees.
    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::lit(v * std)
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn ndim(&self) -> usize {
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        self.clone().reshape(shape)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    /// Number of elements per leading-axis entry.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            numel(&self.shape[1..])
        }
    }

    /// Entries `lo..hi` along the leading axis.
    pub fn slice_batch(&self, lo: usize, hi: usize) -> Self {
        assert!(lo <= hi && hi <= self.shape[0], "slice_batch {lo}..{hi} of {:?}", self.shape);
        let r = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = hi - lo;
        Self { shape, data: self.data[lo * r..hi * r].to_vec() }
    }

    /// Gathers the given leading-axis entries in order.
    pub fn select_batch(&self, idx: &[usize]) -> Self {
        let r = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * r);
        for &i in idx {
            data.extend_from_slice(&self.data[i * r..(i + 1) * r]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    /// Concatenates along the leading axis.
    pub fn cat_batch(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Shape("cat_batch of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(TensorError::Shape(format!(
                    "cat_batch: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Shape("stack of nothing".into()))?;
        let mut data = Vec::with_capacity(parts.len() * first.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(TensorError::Shape(format!("stack: {:?} vs {:?}", p.shape, first.shape)));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Drops a leading axis of length one, or takes entry `i` of it.
    pub fn index_batch(&self, i: usize) -> Self {
        let r = self.row_len();
        Self { shape: self.shape[1..].to_vec(), data: self.data[i * r..(i + 1) * r].to_vec() }
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Self {
        assert_eq!(self.ndim(), 2, "transpose needs a matrix");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self { shape: vec![n, m], data: out }
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.ndim(), 2);
        assert_eq!(other.ndim(), 2);
        let (m, k) = (self.shape[0], self.shape[1]);
        assert_eq!(other.shape[0], k, "matmul inner dims");
        let n = other.shape[1];
        let mut out = vec![T::zero(); m * n];
        crate::scalar::gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Self { shape: vec![m, n], data: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_size() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_vec(&[3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn batch_slicing() {
        let t = Tensor::<f32>::from_vec(&[3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.slice_batch(1, 3).data(), &[2., 3., 4., 5.]);
        assert_eq!(t.select_batch(&[2, 0]).data(), &[4., 5., 0., 1.]);
        let c = Tensor::cat_batch(&[t.slice_batch(0, 1), t.slice_batch(1, 3)]).unwrap();
        assert_eq!(c, t);
    }
}
