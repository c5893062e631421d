//! Dense symmetric positive-definite factorization and triangular solves.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            self.data[i * self.n + i] += v;
        }
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| dot(self.row(i), x)).collect()
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

/// Lower-triangular factor `L` with `L L^T = A`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    // row-major, only the lower triangle is meaningful
    l: Vec<f64>,
}

impl Cholesky {
    /// Factors a symmetric positive-definite matrix. Returns `None` when a
    /// pivot is non-positive or non-finite.
    pub fn factor(a: &SquareMatrix) -> Option<Self> {
        let n = a.n;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s = {
                    let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
                    a.get(i, j) - dot(ri, rj)
                };
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[i * n + i] = math::sqrt(s);
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Some(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.l[i * self.n + j]
        }
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n];
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            x[i] = (b[i] - dot(row, &x[..i])) / self.l[i * n + i];
        }
        x
    }

    /// Solves `L^T x = b`.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            x[i] /= self.l[i * n + i];
            let xi = x[i];
            let row = &self.l[i * n..i * n + i];
            for (xk, &lik) in x[..i].iter_mut().zip(row) {
                *xk -= lik * xi;
            }
        }
        x
    }

    /// Solves `A x = b` with two triangular solves.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `log det A = 2 sum log L_ii`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| math::ln(self.l[i * self.n + i])).sum::<f64>()
    }

    /// `L L^T`, used to check factorization accuracy.
    pub fn reconstruct(&self) -> SquareMatrix {
        let n = self.n;
        SquareMatrix::from_fn(n, |i, j| {
            let m = i.min(j);
            dot(&self.l[i * n..i * n + m + 1], &self.l[j * n..j * n + m + 1])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> SquareMatrix {
        // diagonally dominant symmetric matrix
        SquareMatrix::from_fn(n, |i, j| {
            if i == j {
                n as f64 + 1.0
            } else {
                1.0 / (1.0 + (i + j) as f64)
            }
        })
    }

    #[test]
    fn factor_reconstructs() {
        let a = spd(9);
        let c = Cholesky::factor(&a).unwrap();
        let r = c.reconstruct();
        for i in 0..9 {
            for j in 0..9 {
                assert!((r.get(i, j) - a.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn solve_has_small_residual() {
        let a = spd(12);
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let x = Cholesky::factor(&a).unwrap().solve(&b);
        let ax = a.mul_vec(&x);
        for (u, v) in ax.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn log_det_of_diagonal() {
        let a = SquareMatrix::from_fn(3, |i, j| if i == j { (i + 2) as f64 } else { 0.0 });
        let c = Cholesky::factor(&a).unwrap();
        assert!((c.log_det() - math::ln(24.0)).abs() < 1e-12);
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = SquareMatrix::from_fn(2, |i, j| if i == j { 1.0 } else { 2.0 });
        assert!(Cholesky::factor(&a).is_none());
    }
}
