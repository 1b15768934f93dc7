//! Small dense linear-algebra helpers over row-major `Vec<f64>` matrices,
//! backed by `nalgebra`.

use nalgebra::DMatrix;

/// Row-major square or rectangular matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols} with {} entries", data.len());
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in d.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = vec![0.0; self.rows * other.cols];
        crate::tensor::gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            self.cols as isize,
            1,
            &other.data,
            other.cols as isize,
            1,
            &mut out,
            0.0,
        );
        Matrix::new(self.rows, other.cols, out)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|x| c * x).collect())
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix::new(self.rows, self.cols, self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect())
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        let mut out = Matrix::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.data[i * m.ncols() + j] = m[(i, j)];
            }
        }
        out
    }

    /// Singular values in non-increasing order.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut sv: Vec<f64> = self.to_nalgebra().singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    /// Lower Cholesky factor of a symmetric positive-definite matrix.
    pub fn cholesky(&self) -> Option<Matrix> {
        let c = nalgebra::Cholesky::new(self.to_nalgebra())?;
        Some(Matrix::from_nalgebra(&c.l()))
    }

    /// Solves `L x = b` for lower-triangular `L` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.rows;
        let mut x = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.get(i, j) * x[j]).sum();
            x[i] = (b[i] - s) / self.get(i, i);
        }
        x
    }

    /// Inverse of a lower-triangular matrix (itself lower triangular).
    pub fn inverse_lower(&self) -> Matrix {
        let n = self.rows;
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve_lower(&e);
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        inv
    }
}

/// Log-density of `N(mean, L Lᵀ)` at `x` for lower-triangular `L`.
pub fn gaussian_log_density_chol(x: &[f64], mean: &[f64], l: &Matrix) -> f64 {
    let n = x.len();
    let centred: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let z = l.solve_lower(&centred);
    let logdet: f64 = l.diag().iter().map(|d| d.abs().ln()).sum();
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Accumulates the sample covariance of row vectors streamed in chunks.
///
/// Sums are shifted by the first observed row to limit cancellation.
pub struct CovarianceAccumulator {
    dim: usize,
    count: usize,
    shift: Option<Vec<f64>>,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        CovarianceAccumulator { dim, count: 0, shift: None, sum: vec![0.0; dim], outer: vec![0.0; dim * dim] }
    }

    /// Adds `rows.len() / dim` observations stored row-major.
    pub fn push_rows(&mut self, rows: &[f64]) {
        let d = self.dim;
        assert_eq!(rows.len() % d, 0);
        let n = rows.len() / d;
        if n == 0 {
            return;
        }
        let shift = self.shift.get_or_insert_with(|| rows[..d].to_vec()).clone();
        let centred: Vec<f64> = rows.chunks(d).flat_map(|r| r.iter().zip(&shift).map(|(a, b)| a - b)).collect();
        for r in centred.chunks(d) {
            for (s, v) in self.sum.iter_mut().zip(r) {
                *s += v;
            }
        }
        crate::tensor::gemm(d, n, d, &centred, 1, d as isize, &centred, d as isize, 1, &mut self.outer, 1.0);
        self.count += n;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Vec<f64> {
        let shift = self.shift.clone().unwrap_or_else(|| vec![0.0; self.dim]);
        self.sum.iter().zip(&shift).map(|(s, c)| s / self.count as f64 + c).collect()
    }

    /// Maximum-likelihood (1/N) covariance.
    pub fn covariance(&self) -> Matrix {
        let d = self.dim;
        let n = self.count as f64;
        let mut c = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                c.data[i * d + j] = self.outer[i * d + j] / n - (self.sum[i] / n) * (self.sum[j] / n);
            }
        }
        c
    }
}
