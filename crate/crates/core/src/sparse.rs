//! Compressed sparse row matrices and sparse × dense products.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows below this count run the product serially.
const PAR_ROWS: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        SparseMatrix {
            rows,
            cols,
            row_offsets: vec![0; rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from (row, col, value) triplets in any order. Duplicate
    /// coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(u32, u32, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_offsets = vec![0usize; rows + 1];
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(u32, u32)> = None;
        for (r, c, v) in triplets {
            assert!((r as usize) < rows && (c as usize) < cols, "triplet out of range");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            row_offsets[r as usize + 1] += 1;
            col_indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        SparseMatrix {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// Assembles from raw CSR parts. Column indices must be sorted within rows.
    pub fn from_csr(
        rows: usize,
        cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != rows + 1
            || col_indices.len() != values.len()
            || row_offsets.last() != Some(&values.len())
        {
            return Err(Error::shape("from_csr", "inconsistent CSR buffers"));
        }
        for r in 0..rows {
            let cs = &col_indices[row_offsets[r]..row_offsets[r + 1]];
            if cs.windows(2).any(|w| w[0] >= w[1]) || cs.iter().any(|&c| c as usize >= cols) {
                return Err(Error::shape("from_csr", format!("row {r} has unsorted or out-of-range columns")));
            }
        }
        Ok(SparseMatrix {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        (&self.col_indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&(c as u32)) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c as usize, v))
        })
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for (r, c, v) in self.iter() {
            out.set(r, c, out.get(r, c) + v);
        }
        out
    }

    pub fn transpose(&self) -> SparseMatrix {
        let triplets = self.iter().map(|(r, c, v)| (c as u32, r as u32, v)).collect();
        SparseMatrix::from_triplets(self.cols, self.rows, triplets)
    }

    /// Scales every stored value in column `j` by `scale[j]`.
    pub fn scale_columns(&self, scale: &[f64]) -> Result<SparseMatrix> {
        if scale.len() != self.cols {
            return Err(Error::Dimension(format!(
                "column scale of length {} for {} columns",
                scale.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for (v, &c) in out.values.iter_mut().zip(&self.col_indices) {
            *v *= scale[c as usize];
        }
        Ok(out)
    }

    /// Scales every stored value in row `i` by `scale[i]`.
    pub fn scale_rows(&self, scale: &[f64]) -> Result<SparseMatrix> {
        if scale.len() != self.rows {
            return Err(Error::Dimension(format!(
                "row scale of length {} for {} rows",
                scale.len(),
                self.rows
            )));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for v in &mut out.values[self.row_offsets[r]..self.row_offsets[r + 1]] {
                *v *= scale[r];
            }
        }
        Ok(out)
    }

    /// `self · x`
    pub fn spmm(&self, x: &Tensor) -> Result<Tensor> {
        if self.cols != x.rows() {
            return Err(Error::shape(
                "spmm",
                format!("{:?} x {:?}", self.shape(), x.shape()),
            ));
        }
        let d = x.cols();
        let mut out = Tensor::zeros(self.rows, d);
        if d == 0 {
            return Ok(out);
        }
        let kernel = |(r, out_row): (usize, &mut [f64])| {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                for (o, &xv) in out_row.iter_mut().zip(x.row(c as usize)) {
                    *o += v * xv;
                }
            }
        };
        if self.rows >= PAR_ROWS {
            out.data_mut().par_chunks_mut(d).enumerate().for_each(kernel);
        } else {
            out.data_mut().chunks_mut(d).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    /// `selfᵀ · g`
    pub fn spmm_t(&self, g: &Tensor) -> Result<Tensor> {
        if self.rows != g.rows() {
            return Err(Error::shape(
                "spmm_t",
                format!("{:?}ᵀ x {:?}", self.shape(), g.shape()),
            ));
        }
        let d = g.cols();
        let mut out = Tensor::zeros(self.cols, d);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let g_row = g.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                for (o, &gv) in out.row_mut(c as usize).iter_mut().zip(g_row) {
                    *o += v * gv;
                }
            }
        }
        Ok(out)
    }

    /// Debug dump as `row col value` lines.
    pub fn to_triplet_text(&self) -> String {
        let mut s = String::new();
        for (r, c, v) in self.iter() {
            let _ = writeln!(s, "{r} {c} {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicates_are_summed() {
        let m = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.0), (1, 0, 4.0)]);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.to_triplet_text(), "0 1 3\n1 0 4\n");
    }

    #[test]
    fn from_csr_validates_sorting() {
        assert!(SparseMatrix::from_csr(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseMatrix::from_csr(1, 3, vec![0, 2], vec![1, 2], vec![1.0, 1.0]).is_ok());
    }

    fn sparse_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.zip_map(b, |p, q| (p - q).abs()).max_abs()
    }

    fn sparse_and_dense() -> impl Strategy<Value = (SparseMatrix, Tensor)> {
        (1usize..30, 1usize..30, 1usize..6).prop_flat_map(|(r, c, d)| {
            (
                proptest::collection::vec((0..r as u32, 0..c as u32, -2.0f64..2.0), 0..60),
                proptest::collection::vec(-3.0f64..3.0, c * d),
            )
                .prop_map(move |(trip, xs)| {
                    (
                        SparseMatrix::from_triplets(r, c, trip),
                        Tensor::from_vec(c, d, xs).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn spmm_equals_dense_matmul((s, x) in sparse_and_dense()) {
            // Same ordered sum in both routes, so equality is exact.
            let sparse = s.spmm(&x).unwrap();
            let dense = s.to_dense();
            let naive = Tensor::from_fn(s.rows(), x.cols(), |r, c| {
                (0..s.cols()).fold(0.0, |acc, k| acc + dense.get(r, k) * x.get(k, c))
            });
            prop_assert_eq!(sparse, naive);
            let blas = dense.matmul(&x).unwrap();
            let diff = sparse_diff(&s.spmm(&x).unwrap(), &blas);
            prop_assert!(diff <= 1e-12 * (1.0 + blas.max_abs()));
        }

        #[test]
        fn spmm_t_equals_transpose_product((s, x) in sparse_and_dense()) {
            let g = Tensor::from_fn(s.rows(), x.cols(), |r, c| (r as f64 - c as f64) * 0.3);
            let a = s.spmm_t(&g).unwrap();
            let b = s.transpose().spmm(&g).unwrap();
            prop_assert!(a.zip_map(&b, |p, q| (p - q).abs()).max_abs() < 1e-12);
        }
    }
}
