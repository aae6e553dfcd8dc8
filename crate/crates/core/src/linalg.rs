//! Small dense helpers. Dimensions here are tiny (d <= 3 in practice), so
//! everything works on row-major slices without a linear algebra crate.

use serde::{Deserialize, Serialize};

/// Square `d x d` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    dim: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        let mut m = Self::identity(dim);
        m.data.iter_mut().for_each(|v| *v *= s);
        m
    }

    /// Panics if `data.len() != dim * dim`.
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), dim * dim, "matrix data length");
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        mat_vec_acc(&self.data, x, 1.0, &mut out);
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                let a = self.data[i * d + k];
                for j in 0..d {
                    out[i * d + j] += a * other.data[k * d + j];
                }
            }
        }
        Matrix { dim: d, data: out }
    }

    pub fn frobenius(&self) -> f64 {
        frobenius(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `out += s * A x` for a square row-major `A`.
#[inline]
pub(crate) fn mat_vec_acc(a: &[f64], x: &[f64], s: f64, out: &mut [f64]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &a[i * d..(i + 1) * d];
        *o += s * row.iter().zip(x).map(|(r, v)| r * v).sum::<f64>();
    }
}

/// `out += s * A^T x` for a square row-major `A`.
#[inline]
pub(crate) fn mat_t_vec_acc(a: &[f64], x: &[f64], s: f64, out: &mut [f64]) {
    let d = x.len();
    for (i, &xi) in x.iter().enumerate() {
        let row = &a[i * d..(i + 1) * d];
        for (o, r) in out.iter_mut().zip(row) {
            *o += s * r * xi;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products() {
        let a = Matrix::from_row_major(2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.mul_vec(&[1.0, -1.0]), vec![-1.0, -1.0]);
        let mut out = vec![0.0; 2];
        mat_t_vec_acc(a.as_slice(), &[1.0, -1.0], 1.0, &mut out);
        assert_eq!(out, vec![-2.0, -2.0]);
        assert_eq!(a.matmul(&Matrix::identity(2)), a);
        assert_eq!(a.matmul(&a).as_slice(), &[7.0, 10.0, 15.0, 22.0]);
    }
}
