//! Dense `f32` kernels shared by every other module.
//!
//! All kernels are pure functions. Reductions run in a fixed order so two
//! calls with the same inputs always produce bitwise-identical outputs.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Work (multiply-adds) below which a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Columns `indices` in the given order.
    pub fn select_columns(&self, indices: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = indices.iter().find(|&&c| c >= self.cols) {
            return Err(Error::Param(format!(
                "column index {bad} out of range for {} columns",
                self.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, indices.len());
        for r in 0..self.rows {
            let src = self.row(r);
            let dst = out.row_mut(r);
            for (d, &c) in dst.iter_mut().zip(indices) {
                *d = src[c];
            }
        }
        Ok(out)
    }

    /// Rows `indices` in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = indices.iter().find(|&&r| r >= self.rows) {
            return Err(Error::Param(format!(
                "row index {bad} out of range for {} rows",
                self.rows
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &r in indices {
            data.extend_from_slice(self.row(r));
        }
        Ok(Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// `a × b`. Each output entry sums over the shared dimension left to right.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return Ok(out);
    }
    let kernel = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * b.cols..(kk + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if a.rows * a.cols * b.cols >= PAR_THRESHOLD {
        out.data
            .par_chunks_mut(b.cols)
            .enumerate()
            .for_each(kernel);
    } else {
        out.data.chunks_mut(b.cols).enumerate().for_each(kernel);
    }
    Ok(out)
}

/// `a × bᵀ`.
pub fn matmul_transb(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_transb",
            format!("{}x{} times ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    matmul(a, &b.transpose())
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn swish_scalar(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Elementwise `x · sigmoid(x)`.
pub fn swish(x: &Matrix) -> Matrix {
    x.map(swish_scalar)
}

/// Max-subtracted softmax of one row.
pub fn softmax_row(x: &[f32]) -> Vec<f32> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

fn check_k(k: usize, len: usize, op: &str) -> Result<()> {
    if k == 0 || k > len {
        return Err(Error::Param(format!(
            "{op}: k={k} outside 1..={len}"
        )));
    }
    Ok(())
}

/// Orders by value descending, then index ascending.
#[inline]
fn rank_desc(a: (usize, f32), b: (usize, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Indices of the `k` largest values in descending-value order; ties go to
/// the lowest index.
pub fn topk_indices(v: &[f32], k: usize) -> Result<Vec<usize>> {
    check_k(k, v.len(), "topk_indices")?;
    let mut idx: Vec<(usize, f32)> = v.iter().copied().enumerate().collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_desc(a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_desc(a, b));
    Ok(idx.into_iter().map(|(i, _)| i).collect())
}

/// Keeps the `k` entries of largest magnitude and zeroes the rest.
pub fn abs_topk_mask(v: &[f32], k: usize) -> Result<Vec<f32>> {
    check_k(k, v.len(), "abs_topk_mask")?;
    if k == v.len() {
        return Ok(v.to_vec());
    }
    let mut idx: Vec<(usize, f32)> = v.iter().map(|x| x.abs()).enumerate().collect();
    idx.select_nth_unstable_by(k - 1, |&a, &b| rank_desc(a, b));
    let mut out = vec![0.0; v.len()];
    for &(i, _) in &idx[..k] {
        out[i] = v[i];
    }
    Ok(out)
}

/// Root-mean-square normalization of each row, scaled by `gain`.
pub fn rms_norm(x: &Matrix, gain: &[f32], eps: f32) -> Result<Matrix> {
    if gain.len() != x.cols {
        return Err(Error::shape(
            "rms_norm",
            format!("gain length {} vs width {}", gain.len(), x.cols),
        ));
    }
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f32>() / gain.len() as f32;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v = *v * inv * g;
        }
    }
    Ok(out)
}
