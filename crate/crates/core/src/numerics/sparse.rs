use std::collections::HashSet;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Entries must be in
    /// range and unique; their order does not matter.
    pub fn from_triplets(rows: usize, cols: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for &(r, c, v) in entries {
            if r >= rows || c >= cols {
                return Err(Error::shape(format!(
                    "entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite("sparse entry"));
            }
            if !seen.insert((r, c)) {
                return Err(Error::shape(format!("duplicate entry ({r}, {c})")));
            }
        }
        let mut sorted = entries.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));

        let mut row_ptr = vec![0usize; rows + 1];
        for &(r, _, _) in &sorted {
            row_ptr[r + 1] += 1;
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx: sorted.iter().map(|e| e.1).collect(),
            values: sorted.iter().map(|e| e.2).collect(),
        })
    }

    /// Binary adjacency with unit entries; duplicate pairs collapse.
    pub fn binary(rows: usize, cols: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let unique: HashSet<(usize, usize)> = pairs.into_iter().collect();
        let entries: Vec<_> = unique.into_iter().map(|(r, c)| (r, c, 1.0)).collect();
        Self::from_triplets(rows, cols, &entries)
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates `(row, col, value)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.col_idx[k], self.values[k]))
        })
    }

    /// Column indices stored in row `r`.
    pub fn row_cols(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn row_degree(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn col_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.cols];
        for &c in &self.col_idx {
            deg[c] += 1;
        }
        deg
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r < self.rows && self.row_cols(r).binary_search(&c).is_ok()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        for (r, c, v) in self.iter() {
            out.data_mut()[r * self.cols + c] = v;
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let entries: Vec<_> = self.iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.cols, self.rows, &entries).expect("transpose of a valid matrix")
    }

    /// Independently drops each entry with probability `p` and scales the
    /// survivors by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Self {
        if p <= 0.0 {
            return self.clone();
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mut row_ptr = vec![0usize; self.rows + 1];
        let mut col_idx = Vec::with_capacity(self.nnz());
        let mut values = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if rng.random::<f64>() >= p {
                    col_idx.push(self.col_idx[k]);
                    values.push(self.values[k] * keep_scale);
                }
            }
            row_ptr[r + 1] = col_idx.len();
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// `out += self · b` for a row-major `b` with `n` columns.
    pub(crate) fn spmm_into(&self, b: &[f64], n: usize, out: &mut [f64]) {
        for r in 0..self.rows {
            let out_row = &mut out[r * n..(r + 1) * n];
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let v = self.values[k];
                let b_row = &b[self.col_idx[k] * n..(self.col_idx[k] + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += v * bv;
                }
            }
        }
    }

    /// `out += selfᵀ · b` for a row-major `b` with `n` columns.
    pub(crate) fn spmm_t_into(&self, b: &[f64], n: usize, out: &mut [f64]) {
        for r in 0..self.rows {
            let b_row = &b[r * n..(r + 1) * n];
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let v = self.values[k];
                let c = self.col_idx[k];
                for (o, &bv) in out[c * n..(c + 1) * n].iter_mut().zip(b_row) {
                    *o += v * bv;
                }
            }
        }
    }
}

/// Exact sparse-dense product `a · b`.
pub fn spmm(a: &SparseMatrix, b: &Tensor) -> Result<Tensor> {
    if !b.is_matrix() || b.rows() != a.cols() {
        return Err(Error::shape(format!(
            "spmm {}x{} by {:?}",
            a.rows(),
            a.cols(),
            b.shape()
        )));
    }
    let n = b.cols();
    let mut out = vec![0.0; a.rows() * n];
    a.spmm_into(b.data(), n, &mut out);
    Tensor::matrix(a.rows(), n, out)
}
