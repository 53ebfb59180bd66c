//! Small dense matrices and a Cholesky solver. Sizes here are the state,
//! noise and control dimensions or the regression basis length, so nothing
//! needs blocking or pivoting beyond what Cholesky gives.

use crate::scalar::Real;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer has wrong length");
        Self { rows, cols, data }
    }

    /// 1x1 matrix.
    pub fn scalar(v: T) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn from_rows(rows: &[&[T]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `out += self * x`.
    pub fn mul_vec_acc(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o = *o + crate::scalar::dot(row, x);
        }
    }

    /// `out += self^T * x`.
    pub fn tr_mul_vec_acc(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (i, &xi) in x.iter().enumerate() {
            if xi.is_zero() {
                continue;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, &a) in out.iter_mut().zip(row) {
                *o = *o + a * xi;
            }
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.mul_vec_acc(x, &mut out);
        out
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Frobenius pairing `<a, b> = sum_ij a_ij b_ij`. This is the `sigma . z`
/// convention used by the Hamiltonian throughout the crate.
#[inline]
pub fn frobenius<T: Real>(a: &[T], b: &[T]) -> T {
    crate::scalar::dot(a, b)
}

/// In-place Cholesky factorisation of a symmetric positive definite `n x n`
/// matrix (row-major, lower triangle used). Returns `false` when a pivot is
/// not safely positive relative to `tol * max diagonal`.
pub fn cholesky_in_place<T: Real>(a: &mut [T], n: usize, tol: T) -> bool {
    let scale = (0..n).fold(T::zero(), |m, i| m.max(a[i * n + i].abs()));
    let floor = tol * scale.max(T::min_positive_value());
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d = d - a[j * n + k] * a[j * n + k];
        }
        if !(d > floor) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s = s - a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves `L L^T X = B` in place for `nrhs` right-hand sides stored row-major
/// as an `n x nrhs` block, given the factor from [`cholesky_in_place`].
pub fn cholesky_solve<T: Real>(l: &[T], n: usize, b: &mut [T], nrhs: usize) {
    for c in 0..nrhs {
        for i in 0..n {
            let mut s = b[i * nrhs + c];
            for k in 0..i {
                s = s - l[i * n + k] * b[k * nrhs + c];
            }
            b[i * nrhs + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * nrhs + c];
            for k in (i + 1)..n {
                s = s - l[k * n + i] * b[k * nrhs + c];
            }
            b[i * nrhs + c] = s / l[i * n + i];
        }
    }
}

/// Solves the symmetric positive definite system `A x = b`, returning `None`
/// if `A` is numerically singular.
pub fn solve_spd<T: Real>(a: &Matrix<T>, b: &[T]) -> Option<Vec<T>> {
    let n = a.rows();
    let mut l = a.as_slice().to_vec();
    if !cholesky_in_place(&mut l, n, T::lit(1e-13)) {
        return None;
    }
    let mut x = b.to_vec();
    cholesky_solve(&l, n, &mut x, 1);
    Some(x)
}
