//! Dense double-precision tensors (vectors and matrices, row-major).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let rows = data.len();
        Tensor {
            rows,
            cols: 1,
            data,
        }
    }

    pub fn zeros_vec(len: usize) -> Self {
        Self::zeros(len, 1)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_vector(&self) -> bool {
        self.cols == 1
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert!(i < self.rows);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert!(i < self.rows);
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// Numerically stable log(sum(exp(v))) with max shifting.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("logsumexp of empty vector".into()));
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

/// Stable log-softmax: z_i - logsumexp(z).
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn logsumexp_singleton() {
        assert_abs_diff_eq!(logsumexp(&[3.5]).unwrap(), 3.5);
    }

    #[test]
    fn logsumexp_pair_of_zeros() {
        assert_abs_diff_eq!(logsumexp(&[0.0, 0.0]).unwrap(), 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn logsumexp_large_values_no_overflow() {
        let out = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert_abs_diff_eq!(out, 1000.0 + 2.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn logsumexp_empty_is_error() {
        assert!(logsumexp(&[]).is_err());
    }

    #[test]
    fn log_softmax_uniform() {
        let out = log_softmax(&[0.0, 0.0]);
        assert_abs_diff_eq!(out[0], 0.5f64.ln(), epsilon = 1e-12);
        let out4 = log_softmax(&[7.0, 7.0, 7.0, 7.0]);
        for v in out4 {
            assert_abs_diff_eq!(v, -(4.0f64.ln()), epsilon = 1e-12);
        }
    }

    #[test]
    fn log_softmax_reference_values() {
        // Direct high-precision evaluation of [1,2,3]:
        // lse = 3 + ln(1 + e^-1 + e^-2) = 3.40760596444438...
        let out = log_softmax(&[1.0, 2.0, 3.0]);
        let lse = 3.407605964444380_f64;
        assert_abs_diff_eq!(out[0], 1.0 - lse, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 2.0 - lse, epsilon = 1e-12);
        assert_abs_diff_eq!(out[2], 3.0 - lse, epsilon = 1e-12);
    }
}
