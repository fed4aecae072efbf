//! Dense row-major f64 matrices with exactly the operations the network needs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense matrix, row-major. Elements are finite f64 by construction;
/// the fallible constructors reject NaN and infinities, composed arithmetic
/// preserves finiteness at the magnitudes this crate works at, and the
/// training loop re-checks the loss every step as a backstop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Build from row-major data. Rejects length mismatches and non-finite
    /// values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, column {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Convenience constructor for literal test fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Argument("ragged rows".into()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
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

    /// Reinterpret the row-major buffer under new dimensions.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows * cols != self.data.len() {
            return Err(Error::Argument(format!(
                "cannot reshape {}x{} into {}x{}",
                self.rows, self.cols, rows, cols
            )));
        }
        Ok(Matrix {
            rows,
            cols,
            data: self.data.clone(),
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.rows, "row slice out of range");
        Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Gather the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| c * v)
    }

    fn shape_err(&self, other: &Matrix, op: &'static str) -> Error {
        Error::Shape {
            op,
            left_rows: self.rows,
            left_cols: self.cols,
            right_rows: other.rows,
            right_cols: other.cols,
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(self.shape_err(other, "add"));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(self.shape_err(other, "sub"));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// In-place `self += c * other`; used by the optimizer and gradient
    /// accumulation where allocation churn would dominate.
    pub fn axpy(&mut self, c: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    /// Broadcast-add a 1xC row vector to every row.
    pub fn add_row_vector(&self, v: &Matrix) -> Result<Matrix> {
        if v.rows != 1 || v.cols != self.cols {
            return Err(self.shape_err(v, "add_row_vector"));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&v.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a 1xC row vector.
    pub fn column_sums(&self) -> Matrix {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        Matrix {
            rows: 1,
            cols: self.cols,
            data: sums,
        }
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j order keeps the inner loop streaming over contiguous rows.
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Elementwise max(0, x).
pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Row-wise softmax with max-subtraction for stability. Every output row is
/// a probability vector.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per-row layer normalization over the row's features: subtract the row
/// mean, divide by sqrt(biased variance + eps), then scale by `gamma` and
/// shift by `beta` (both 1xC).
pub fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix, eps: f64) -> Result<Matrix> {
    let d = x.cols();
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if p.rows() != 1 || p.cols() != d {
            return Err(Error::Shape {
                op: if name == "gamma" {
                    "layer_norm gamma"
                } else {
                    "layer_norm beta"
                },
                left_rows: x.rows(),
                left_cols: d,
                right_rows: p.rows(),
                right_cols: p.cols(),
            });
        }
    }
    if eps <= 0.0 {
        return Err(Error::Argument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (v, (g, b)) in row.iter_mut().zip(gamma.data().iter().zip(beta.data())) {
            *v = g * (*v - mean) * inv_std + b;
        }
    }
    Ok(out)
}

/// Mean squared difference over all elements of equally-shaped matrices.
pub fn mean_sq_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "mean_sq_diff",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_leaves_operand_unchanged() {
        let eye = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let m = Matrix::from_rows(&[&[3.5, -1.0], &[2.0, 0.25]]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[&[2.0], &[4.0]]).unwrap());
    }

    #[test]
    fn matmul_dimension_mismatch_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "message should name shapes: {msg}");
    }

    #[test]
    fn relu_sign_cases() {
        let x = Matrix::from_rows(&[&[-3.0, 0.0, 2.5]]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.5]);
        let neg = Matrix::filled(3, 2, -1.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_symmetry_and_degenerate_row() {
        let x = Matrix::from_rows(&[&[0.0, 0.0, 0.0]]).unwrap();
        let s = softmax_rows(&x);
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let single = Matrix::from_rows(&[&[42.0]]).unwrap();
        assert_eq!(softmax_rows(&single).data(), &[1.0]);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let x = Matrix::from_rows(&[&[1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&x);
        assert!(s.data()[0] > 1.0 - 1e-12);
        assert!(s.data()[1] < 1e-12);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_norm_constant_row_is_zeroed() {
        let x = Matrix::filled(1, 4, 5.0);
        let gamma = Matrix::filled(1, 4, 1.0);
        let beta = Matrix::zeros(1, 4);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_hand_example() {
        // row [1,3]: mean 2, biased variance 1.
        let x = Matrix::from_rows(&[&[1.0, 3.0]]).unwrap();
        let gamma = Matrix::filled(1, 2, 1.0);
        let beta = Matrix::zeros(1, 2);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        assert!((y.get(0, 0) + 1.0).abs() < 1e-4);
        assert!((y.get(0, 1) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_beta_dominates_when_gamma_zero() {
        let x = Matrix::from_rows(&[&[1.0, -2.0, 0.5], &[9.0, 9.0, 9.0]]).unwrap();
        let gamma = Matrix::zeros(1, 3);
        let beta = Matrix::filled(1, 3, 7.0);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn layer_norm_length_mismatch_is_shape_error() {
        let x = Matrix::zeros(2, 3);
        let gamma = Matrix::zeros(1, 2);
        let beta = Matrix::zeros(1, 3);
        assert!(matches!(
            layer_norm(&x, &gamma, &beta, 1e-5),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn mean_sq_diff_hand_values() {
        let a = Matrix::zeros(1, 2);
        let b = Matrix::filled(1, 2, 1.0);
        assert_eq!(mean_sq_diff(&a, &b).unwrap(), 1.0);
        assert_eq!(mean_sq_diff(&a, &a).unwrap(), 0.0);
    }
}
