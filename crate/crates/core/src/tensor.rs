//! Dense row-major n-dimensional arrays.

use std::fmt;

use crate::scalar::Scalar;

/// Dense row-major array with a dynamic shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
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

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Shape as `[n, c, h, w]`; panics for other ranks.
    pub fn dims4(&self) -> [usize; 4] {
        match self.shape.as_slice() {
            &[n, c, h, w] => [n, c, h, w],
            s => panic!("expected a 4-d tensor, got shape {s:?}"),
        }
    }

    pub fn dims2(&self) -> [usize; 2] {
        match self.shape.as_slice() {
            &[a, b] => [a, b],
            s => panic!("expected a 2-d tensor, got shape {s:?}"),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape to {shape:?}"
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "accumulate shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len().max(1) as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element `[n, c, h, w]` of a 4-d tensor.
    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cc, hh, ww] = self.dims4();
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// Sample `n` of a 4-d tensor as a `[1, c, h, w]` tensor.
    pub fn sample(&self, n: usize) -> Self {
        let [_, c, h, w] = self.dims4();
        let len = c * h * w;
        Self::from_vec(&[1, c, h, w], self.data[n * len..(n + 1) * len].to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a.f64() - b.f64()).abs()))
    }
}

/// Stacks equally-shaped `[1, c, h, w]` (or `[c, h, w]`) tensors along a new batch axis.
pub fn stack_batch<T: Scalar>(items: &[Tensor<T>]) -> Tensor<T> {
    assert!(!items.is_empty(), "cannot stack an empty batch");
    let inner: Vec<usize> = match items[0].shape() {
        [1, rest @ ..] if items[0].ndim() == 4 => rest.to_vec(),
        s => s.to_vec(),
    };
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        assert_eq!(t.len(), items[0].len(), "batch items differ in size");
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend(inner);
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn at4_indexes_row_major() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| i as f64);
        assert_eq!(t.at4(1, 2, 3, 4), 119.0);
        assert_eq!(t.at4(0, 1, 0, 2), 22.0);
        assert_eq!(t.sample(1).data()[0], 60.0);
    }

    #[test]
    fn stack_restores_batch_axis() {
        let a = Tensor::<f32>::ones(&[1, 2, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        let s = stack_batch(&[a, b]);
        assert_eq!(s.shape(), &[2, 2, 2, 2]);
        assert_eq!(s.sum(), 8.0);
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_bad_shape() {
        let _ = Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]);
    }
}
