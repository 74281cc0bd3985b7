use crate::scalar::Real;

/// Constant row-sparse linear map applied to the leading axis of a feature
/// matrix: `out[r, :] = sum_j w_rj * x[c_j, :]`.
///
/// Bilinear sampling at fixed coordinates, splatting, inverse-distance
/// interpolation, neighbor gathering and average pooling all reduce to this.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Real> SparseRows<T> {
    pub fn builder(cols: usize) -> SparseRowsBuilder<T> {
        SparseRowsBuilder {
            cols,
            row_ptr: vec![0],
            col_idx: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn row_sum(&self, r: usize) -> T {
        self.row(r).map(|(_, w)| w).sum()
    }

    /// `x` is `cols x width`, row-major.
    pub fn apply(&self, x: &[T], width: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows * width];
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            for (c, w) in self.row(r) {
                let src = &x[c * width..(c + 1) * width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + w * s;
                }
            }
        }
        out
    }

    /// Transposed application, accumulating into `grad_x`.
    pub fn apply_transpose_into(&self, g: &[T], width: usize, grad_x: &mut [T]) {
        for r in 0..self.rows {
            let src = &g[r * width..(r + 1) * width];
            for (c, w) in self.row(r) {
                let dst = &mut grad_x[c * width..(c + 1) * width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + w * s;
                }
            }
        }
    }

    /// Rescales every non-empty row to unit weight sum; rows with zero total
    /// weight are left empty.
    pub fn normalize_rows(mut self) -> Self {
        for r in 0..self.rows {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            let total: T = self.vals[span.clone()].iter().copied().sum();
            if total > T::zero() {
                for v in &mut self.vals[span] {
                    *v = *v / total;
                }
            }
        }
        self
    }
}

pub struct SparseRowsBuilder<T> {
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Real> SparseRowsBuilder<T> {
    pub fn push(&mut self, col: usize, weight: T) {
        debug_assert!(col < self.cols);
        self.col_idx.push(col);
        self.vals.push(weight);
    }

    pub fn end_row(&mut self) {
        self.row_ptr.push(self.col_idx.len());
    }

    pub fn finish(self) -> SparseRows<T> {
        SparseRows {
            rows: self.row_ptr.len() - 1,
            cols: self.cols,
            row_ptr: self.row_ptr,
            col_idx: self.col_idx,
            vals: self.vals,
        }
    }
}

/// Builds a sparse map from per-row weighted entries (duplicates allowed).
pub fn from_rows<T: Real>(cols: usize, rows: &[Vec<(usize, T)>]) -> SparseRows<T> {
    let mut b = SparseRows::builder(cols);
    for row in rows {
        for &(c, w) in row {
            b.push(c, w);
        }
        b.end_row();
    }
    b.finish()
}
