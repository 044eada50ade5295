//! Row-major dense matrices and the sgemm wrapper every layer goes through.

use serde::{Deserialize, Serialize};

/// Row-major `rows × cols` matrix of `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "vstack width mismatch");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Matrix::from_vec(self.rows + other.rows, self.cols, data)
    }

    /// Row-wise concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "hcat height mismatch");
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Matrix::from_vec(self.rows, cols, data)
    }

    /// Splits columns at `at`, the inverse of [`Matrix::hcat`].
    pub fn hsplit(&self, at: usize) -> (Matrix, Matrix) {
        assert!(at <= self.cols);
        let mut left = Vec::with_capacity(self.rows * at);
        let mut right = Vec::with_capacity(self.rows * (self.cols - at));
        for r in 0..self.rows {
            let row = self.row(r);
            left.extend_from_slice(&row[..at]);
            right.extend_from_slice(&row[at..]);
        }
        (
            Matrix::from_vec(self.rows, at, left),
            Matrix::from_vec(self.rows, self.cols - at, right),
        )
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, data.iter().map(|&v| v as f32).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `a` is stored `a_rows × a_cols`; with `trans_a` the product uses its
/// transpose. Same for `b`. `c` must already have the result shape.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    alpha: f32,
    a: &[f32],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f32],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    let (m, k) = if trans_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (kb, n) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!(a.len(), a_rows * a_cols);
    assert_eq!(b.len(), b_rows * b_cols);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a_cols as isize)
    } else {
        (a_cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b_cols as isize)
    } else {
        (b_cols as isize, 1)
    };
    // SAFETY: the asserts above pin every operand length to the strides
    // handed to sgemm, so all accessed offsets are in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a · b` (or with transposes) as a fresh matrix.
pub fn matmul(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool) -> Matrix {
    let m = if trans_a { a.cols } else { a.rows };
    let n = if trans_b { b.rows } else { b.cols };
    let mut out = Matrix::zeros(m, n);
    gemm(
        1.0, &a.data, a.rows, a.cols, trans_a, &b.data, b.rows, b.cols, trans_b, 0.0,
        &mut out.data,
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.data[i * a.cols + k] * b.data[k * b.cols + j];
                }
                out.data[i * b.cols + j] = s;
            }
        }
        out
    }

    fn transpose(a: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.cols, a.rows);
        for i in 0..a.rows {
            for j in 0..a.cols {
                out.data[j * a.rows + i] = a.data[i * a.cols + j];
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_for_all_transposes() {
        let a = Matrix::from_vec(3, 4, (0..12).map(|v| v as f32 * 0.5 - 2.0).collect());
        let b = Matrix::from_vec(4, 2, (0..8).map(|v| (v as f32).sin()).collect());
        let expect = naive(&a, &b);
        let at = transpose(&a);
        let bt = transpose(&b);
        for (got, name) in [
            (matmul(&a, false, &b, false), "nn"),
            (matmul(&at, true, &b, false), "tn"),
            (matmul(&a, false, &bt, true), "nt"),
            (matmul(&at, true, &bt, true), "tt"),
        ] {
            for (g, e) in got.data.iter().zip(&expect.data) {
                assert!((g - e).abs() < 1e-5, "{name}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn hcat_hsplit_inverse() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Matrix::from_vec(2, 1, vec![5.0, 6.0]);
        let c = a.hcat(&b);
        assert_eq!(c.data, vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let (l, r) = c.hsplit(2);
        assert_eq!(l, a);
        assert_eq!(r, b);
    }
}
