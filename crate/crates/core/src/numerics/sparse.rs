use serde::{Deserialize, Serialize};

use super::Tensor2;
use crate::error::{Error, Result};

/// Square sparse matrix in compressed-row form. Entries of a row are stored
/// in the order they were given; products sum in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                if c >= n {
                    return Err(Error::Dimension(format!("column {c} in a {n}x{n} matrix")));
                }
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).filter(|&(c, _)| c == j).map(|(_, v)| v).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] += v;
            }
        }
        out
    }

    /// `self · x`.
    pub fn matmul(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.rows() != self.n {
            return Err(Error::Dimension(format!(
                "{n}x{n} sparse · {}x{}",
                x.rows(),
                x.cols(),
                n = self.n
            )));
        }
        let mut out = Tensor2::zeros(self.n, x.cols());
        for i in 0..self.n {
            let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let out_row = out.row_mut(i);
            for (&j, &a) in self.col_idx[lo..hi].iter().zip(&self.values[lo..hi]) {
                for (o, &b) in out_row.iter_mut().zip(x.row(j)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · x`.
    pub fn t_matmul(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.rows() != self.n {
            return Err(Error::Dimension(format!(
                "({n}x{n} sparse)ᵀ · {}x{}",
                x.rows(),
                x.cols(),
                n = self.n
            )));
        }
        let mut out = Tensor2::zeros(self.n, x.cols());
        for i in 0..self.n {
            let src = x.row(i);
            for (j, a) in self.row(i) {
                for (o, &b) in out.row_mut(j).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }
}
