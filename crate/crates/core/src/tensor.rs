//! Dense row-major containers.
//!
//! [`TensorBlock`] is the f32 storage type for keys, queries, values and
//! centroids. [`Matrix`] is the f64 type used for results of accumulation
//! (attention outputs, probability rows, targets).

use std::fmt;

use crate::error::{Result, SaapError};

/// Row-major block of `rows` vectors of dimension `dim`.
///
/// Entries are finite; every constructor checks this.
#[derive(Clone, PartialEq)]
pub struct TensorBlock {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl fmt::Debug for TensorBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TensorBlock[{}x{}]", self.rows, self.dim)
    }
}

impl TensorBlock {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(SaapError::shape(
                format!("{rows}x{dim}"),
                format!("data of length {}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(SaapError::NonFinite(format!("tensor entry {pos}")));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { rows, dim, data: vec![0.0; rows * dim] }
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(SaapError::shape(format!("row 0 of length {dim}"), format!("row {i} of length {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    /// Builds from f64 rows, rounding to f32.
    pub fn from_f64(rows: usize, dim: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, dim, data.iter().map(|&x| x as f32).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.dim)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| x as f64).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Gathers the given rows, in order.
    pub fn select_rows(&self, ids: &[usize]) -> TensorBlock {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        TensorBlock { rows: ids.len(), dim: self.dim, data }
    }

    /// Contiguous row range `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> TensorBlock {
        TensorBlock { rows: end - start, dim: self.dim, data: self.data[start * self.dim..end * self.dim].to_vec() }
    }

    /// Stacks blocks of equal dimension.
    pub fn concat(blocks: &[&TensorBlock]) -> Result<TensorBlock> {
        let dim = blocks.first().map_or(0, |b| b.dim);
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.dim != dim {
                return Err(SaapError::shape(format!("dim {dim}"), format!("dim {}", b.dim)));
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(TensorBlock { rows, dim, data })
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix { rows: self.rows, cols: self.dim, data: self.data.iter().map(|&x| x as f64).collect() }
    }
}

/// Row-major f64 matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SaapError::shape(format!("{rows}x{cols}"), format!("data of length {}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(SaapError::shape(format!("row of length {cols}"), format!("row of length {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn to_tensor(&self) -> Result<TensorBlock> {
        TensorBlock::from_f64(self.rows, self.cols, &self.data)
    }
}

/// `a · bᵀ · scale`, with `b` read as rows (keys). Accumulates in f64.
pub fn matmul_scaled(a: &TensorBlock, b: &TensorBlock, scale: f64) -> Result<TensorBlock> {
    if a.dim != b.dim {
        return Err(SaapError::shape(
            format!("a {}x{}", a.rows, a.dim),
            format!("b {}x{}", b.rows, b.dim),
        ));
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for ar in a.iter_rows() {
        for br in b.iter_rows() {
            out.push((scale * dot_f32(ar, br)) as f32);
        }
    }
    TensorBlock::new(a.rows, b.rows, out)
}

/// Inner product of f32 slices accumulated in f64.
#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Inner product of an f64 vector with an f32 row.
#[inline]
pub fn dot_mixed(a: &[f64], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i] as f64;
        acc[1] += a[i + 1] * b[i + 1] as f64;
        acc[2] += a[i + 2] * b[i + 2] as f64;
        acc[3] += a[i + 3] * b[i + 3] as f64;
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_f64(a: &[f64]) -> f64 {
    dot_f64(a, a).sqrt()
}


/// Transposition flag for [`gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c = op(a) · op(b) + beta · c` for row-major f64 buffers, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: Trans, b: &[f64], tb: Trans, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k, "gemm: a has the wrong length");
    assert_eq!(b.len(), k * n, "gemm: b has the wrong length");
    assert_eq!(c.len(), m * n, "gemm: c has the wrong length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    // SAFETY: lengths are checked above and the strides describe exactly the
    // row-major (or transposed) layout of those buffers.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}
