//! Small dense linear algebra: symmetric positive-definite factorization
//! and triangular solves on row-major square matrices.

use alloc::vec::Vec;

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: alloc::vec![0.0; n * n] }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = f(i, j);
            }
        }
        m
    }

    pub fn size(&self) -> usize {
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

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            self.data[i * self.n + i] += v;
        }
    }
}

/// Lower Cholesky factor `L` with `A = L L^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    lower: SquareMatrix,
}

impl Cholesky {
    /// Factors `a`; `None` if a pivot is not strictly positive or not finite.
    pub fn factor(a: &SquareMatrix) -> Option<Self> {
        let n = a.n;
        let mut l = SquareMatrix::zeros(n);
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                let v = l.get(j, k);
                d -= v * v;
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let djj = libm::sqrt(d);
            l.set(j, j, djj);
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                let (ri, rj) = (l.row(i), l.row(j));
                for k in 0..j {
                    s -= ri[k] * rj[k];
                }
                l.set(i, j, s / djj);
            }
        }
        Some(Self { lower: l })
    }

    /// Retries with diagonal jitter `start, 10*start, ...` up to `max`.
    /// Returns the factor and the jitter that was added (0 when none was needed).
    pub fn factor_with_jitter(a: &SquareMatrix, start: f64, max: f64) -> Option<(Self, f64)> {
        if let Some(c) = Self::factor(a) {
            return Some((c, 0.0));
        }
        let mut jitter = start;
        while jitter <= max * (1.0 + 1e-12) {
            let mut b = a.clone();
            b.add_diagonal(jitter);
            if let Some(c) = Self::factor(&b) {
                return Some((c, jitter));
            }
            jitter *= 10.0;
        }
        None
    }

    pub(crate) fn from_lower(lower: SquareMatrix) -> Self {
        Self { lower }
    }

    pub fn lower(&self) -> &SquareMatrix {
        &self.lower
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lower.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let row = self.lower.row(i);
            let mut s = y[i];
            for k in 0..i {
                s -= row[k] * y[k];
            }
            y[i] = s / row[i];
        }
        y
    }

    /// Solves `L^T x = y`.
    pub fn solve_upper(&self, y: &[f64]) -> Vec<f64> {
        let n = self.lower.n;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let s = ((i + 1)..n).fold(x[i], |s, k| s - self.lower.get(k, i) * x[k]);
            x[i] = s / self.lower.get(i, i);
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `log det A = 2 * sum log L_ii`.
    pub fn log_det(&self) -> f64 {
        (0..self.lower.n).map(|i| 2.0 * libm::log(self.lower.get(i, i))).sum()
    }

    /// `y = L z`.
    pub fn mul_lower(&self, z: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.lower.row(i);
            *o = row[..=i].iter().zip(z).map(|(a, b)| a * b).sum();
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
