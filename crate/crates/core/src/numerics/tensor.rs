use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.contains(&0) && !data.is_empty() {
            return Err(Error::shape(format!(
                "zero-sized dims {dims:?} with {} values",
                data.len()
            )));
        }
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        if self.dims.len() < 2 {
            1
        } else {
            self.dims[..self.dims.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.dims.len() != 2 {
            return Err(Error::shape(format!("transpose needs a matrix, got {:?}", self.dims)));
        }
        let (m, n) = (self.dims[0], self.dims[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    /// Matrix product. Both operands must be rank-2.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims.len() != 2 || other.dims.len() != 2 || self.dims[1] != other.dims[0] {
            return Err(Error::shape(format!(
                "matmul of left {:?} and right {:?}",
                self.dims, other.dims
            )));
        }
        let (m, k, n) = (self.dims[0], self.dims[1], other.dims[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::matrix(m, n, out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity on raw slices, rejecting near-zero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    for (what, n) in [("left operand", na), ("right operand", nb)] {
        if n < crate::numerics::DEGENERATE_NORM {
            return Err(Error::DegenerateVector {
                what: what.into(),
                norm: n,
            });
        }
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Numerically stable softmax on a slice.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// out[m×k] += g[m×n] · b[k×n]ᵀ
pub(crate) fn matmul_bt_into(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, n, k, g, (n, 1), b, (1, n), out);
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
pub(crate) fn matmul_at_into(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, a, (1, k), g, (n, 1), out);
}

/// `out[m×n] += A[m×k] · B[k×n]` with explicit (row, column) strides for A and B.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(out.len() >= m * n);
    assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
    assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let tt = t.transpose().unwrap();
        assert_eq!(tt.dims(), &[3, 2]);
        assert_eq!(tt.get2(2, 1), 6.0);
        assert_eq!(tt.transpose().unwrap(), t);
    }

    #[test]
    fn softmax_empty_is_shape_error() {
        assert!(matches!(softmax(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let a = Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 4., -1.]).unwrap();
        let g = Tensor::matrix(2, 2, vec![0.3, -0.7, 1.1, 2.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![2., 1., 0., -1., 3., 0.25]).unwrap();
        // dA = g · bᵀ
        let mut da = vec![0.0; 6];
        matmul_bt_into(g.data(), b.data(), &mut da, 2, 3, 2);
        let expect = g.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(da, expect.data());
        // dB = aᵀ · g
        let mut db = vec![0.0; 6];
        matmul_at_into(a.data(), g.data(), &mut db, 2, 3, 2);
        let expect = a.transpose().unwrap().matmul(&g).unwrap();
        assert_eq!(db, expect.data());
    }
}
