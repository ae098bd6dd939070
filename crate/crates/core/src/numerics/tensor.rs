use std::fmt;

use super::error::{shape_err, NumericsError, Result};
use super::float::Float;

/// Dense row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Float = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(shape_err("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    /// Row vector of shape `[n]`.
    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of every axis but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            (&self.data, k as isize, 1),
            (&other.data, n as isize, 1),
            T::zero(),
            &mut out,
        );
        Tensor::new(vec![m, n], out)?.check_finite("matmul")
    }

    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} of {:?}", self.shape)));
        }
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..extent)
                    .map(|j| out[idx(j)])
                    .fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..extent {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..extent {
                    out[idx(j)] /= sum;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)?.check_finite("softmax")
    }

    /// Index of the largest value; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    /// The `k` largest entries as `(index, value)`, descending, lowest index first on ties.
    pub fn topk(&self, k: usize) -> Vec<(usize, T)> {
        topk(&self.data, k)
    }
}

pub fn argmax<T: Float>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn topk<T: Float>(xs: &[T], k: usize) -> Vec<(usize, T)> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| {
        xs[b]
            .partial_cmp(&xs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(xs.len()));
    idx.into_iter().map(|i| (i, xs[i])).collect()
}

/// Row-wise softmax of a contiguous `[rows, cols]` buffer, in place.
pub(crate) fn softmax_rows_inplace<T: Float>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = T::one() / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// `c = alpha * a @ b + beta * c`; `a` is `[m, k]`, `b` is `[k, n]`, `c` is
/// contiguous `[m, n]`. Each operand is given as `(buffer, row stride, col stride)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: (&[T], isize, isize),
    b: (&[T], isize, isize),
    beta: T,
    c: &mut [T],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose strides address only in-bounds
    // elements for the given extents; `c` is contiguous and large enough.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = t(&[2, 2], &[1., 0., 0., 1.]);
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(i.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_projector() {
        let p = t(&[2, 2], &[1., 0., 0., 0.]);
        let a = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(p.matmul(&a).unwrap().data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = t(&[3, 4], &a).matmul(&t(&[4, 2], &b)).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a[i * 4 + k] * b[k * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - s).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[2, 3], &[0.; 6]);
        assert!(matches!(a.matmul(&a), Err(NumericsError::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let s = t(&[3], &[0., 0., 0.]).softmax(0).unwrap();
        for &x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let a = t(&[3], &[0.5, -1.0, 2.0]).softmax(0).unwrap();
        let b = t(&[3], &[100.5, 99.0, 102.0]).softmax(0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_matches_scalar_exp() {
        let s = Tensor::<f32>::from_f64(vec![3], &[1., 2., 3.]).unwrap().softmax(0).unwrap();
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for i in 0..3 {
            let want = ((i + 1) as f64).exp() / z;
            assert!((s.data()[i] as f64 - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_inner_axis() {
        let x = t(&[2, 2], &[0., 0., 1., 1.]).softmax(0).unwrap();
        let e = 1.0f64.exp();
        assert!((x.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((x.data()[2] - e / (1.0 + e)).abs() < 1e-12);
        assert!(t(&[2], &[1., 2.]).softmax(1).is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn argmax_and_topk_tie_break() {
        let x = t(&[4], &[1., 3., 3., 0.]);
        assert_eq!(x.argmax(), 1);
        assert_eq!(x.topk(3), vec![(1, 3.), (2, 3.), (0, 1.)]);
        assert_eq!(t(&[3], &[0.; 3]).argmax(), 0);
    }
}
