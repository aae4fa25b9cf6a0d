//! Dense row-major f64 kernels and permutation index arrays.
//!
//! Every kernel is deterministic: the dot product behind each output element
//! always accumulates in ascending inner index, so results are bitwise
//! reproducible across runs and thread counts. With the `parallel` feature
//! (on by default) large kernels fan rows out across a rayon pool; each row
//! is still filled by the same sequential inner loop, so enabling or
//! disabling the feature never changes a single bit of output.
//!
//! Kernels report their cost to a thread-local counter (see
//! [`crate::flops`]) using the fixed accounting policy: one
//! multiply-accumulate counts as two operations, elementwise maps as one per
//! element, a softmax row of width w as 5w, a normalization row of width w
//! as 6w, and pure index shuffles (transpose, permutation) as zero.

use crate::error::{CoreError, Result};
use std::cell::Cell;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of output elements before a kernel fans out to the
/// thread pool; below this the coordination overhead dominates.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 8 * 1024;

// ============================================================
// Operation counting
// ============================================================

thread_local! {
    static TALLY: Cell<u64> = const { Cell::new(0) };
    static TALLY_ENABLED: Cell<bool> = const { Cell::new(false) };
}

/// Every kernel calls this once, on its caller's thread, after doing its
/// work; a kernel that fans rows out to the pool still reports from the
/// caller. The counter is therefore thread-local, which keeps concurrent
/// measurements (and the test runner's thread pool) from bleeding into each
/// other.
#[inline]
pub(crate) fn tally(ops: u64) {
    TALLY_ENABLED.with(|on| {
        if on.get() {
            TALLY.with(|t| t.set(t.get() + ops));
        }
    });
}

/// Reset this thread's operation counter to zero and start recording.
pub(crate) fn tally_start() {
    TALLY.with(|t| t.set(0));
    TALLY_ENABLED.with(|on| on.set(true));
}

/// Stop recording and return this thread's accumulated operation count.
pub(crate) fn tally_stop() -> u64 {
    TALLY_ENABLED.with(|on| on.set(false));
    TALLY.with(|t| t.replace(0))
}

// ============================================================
// Matrix
// ============================================================

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
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

    /// Build from a flat row-major buffer. `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::ShapeMismatch {
                op: "from_vec",
                detail: format!("{} elements for {}x{}", data.len(), rows, cols),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CoreError::ShapeMismatch {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Keep only the first `n` rows.
    pub fn truncate_rows(&mut self, n: usize) {
        assert!(n <= self.rows, "truncate_rows: {} > {}", n, self.rows);
        self.rows = n;
        self.data.truncate(n * self.cols);
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(
            self.data.len(),
            other.data.len(),
            "max_abs_diff: size mismatch"
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest relative deviation, with |b| + 1e-300 as the denominator floor.
    pub fn max_rel_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(
            self.data.len(),
            other.data.len(),
            "max_rel_diff: size mismatch"
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() / (b.abs().max(a.abs()) + 1e-300))
            .fold(0.0, f64::max)
    }
}

// ============================================================
// Matrix multiplication
// ============================================================

#[inline]
fn matmul_row_into(out_row: &mut [f64], a_row: &[f64], b: &Matrix) {
    // i-k-j loop order: cache friendly, and each output element accumulates
    // its products in ascending k.
    out_row.fill(0.0);
    for (k, &aik) in a_row.iter().enumerate() {
        let b_row = b.row(k);
        for (o, &bkj) in out_row.iter_mut().zip(b_row) {
            *o += aik * bkj;
        }
    }
}

/// `a * b` without tapping the thread pool. Output is bitwise identical to
/// [`matmul`]; exposed so benchmarks can compare both paths.
pub fn matmul_seq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner(a, b)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    let cols = b.cols;
    for (i, chunk) in out.data.chunks_mut(cols).enumerate() {
        matmul_row_into(chunk, a.row(i), b);
    }
    tally(2 * a.rows as u64 * a.cols as u64 * b.cols as u64);
    Ok(out)
}

/// Matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    #[cfg(feature = "parallel")]
    {
        check_inner(a, b)?;
        if a.rows * b.cols >= PAR_THRESHOLD && a.rows > 1 {
            let mut out = Matrix::zeros(a.rows, b.cols);
            let cols = b.cols;
            out.data
                .par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, chunk)| matmul_row_into(chunk, a.row(i), b));
            tally(2 * a.rows as u64 * a.cols as u64 * b.cols as u64);
            return Ok(out);
        }
    }
    matmul_seq(a, b)
}

fn check_inner(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols != b.rows {
        return Err(CoreError::ShapeMismatch {
            op: "matmul",
            detail: format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    Ok(())
}

/// Transpose. Pure index shuffle, costs nothing under the accounting policy.
pub fn transpose(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            out.data[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    out
}

// ============================================================
// Elementwise kernels
// ============================================================

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(CoreError::ShapeMismatch {
            op,
            detail: format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    Ok(())
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_same("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    tally(a.data.len() as u64);
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

pub fn sub(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_same("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    tally(a.data.len() as u64);
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

/// Hadamard (elementwise) product.
pub fn mul_elem(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_same("mul_elem", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    tally(a.data.len() as u64);
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

pub fn scale(a: &Matrix, s: f64) -> Matrix {
    let data = a.data.iter().map(|x| x * s).collect();
    tally(a.data.len() as u64);
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    }
}

#[inline]
fn silu_scalar(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// SiLU activation `x * sigmoid(x)`, elementwise.
pub fn silu(a: &Matrix) -> Matrix {
    let data = a.data.iter().map(|&x| silu_scalar(x)).collect();
    tally(a.data.len() as u64);
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    }
}

// ============================================================
// Row-wise kernels: softmax and normalization
// ============================================================

/// Row-wise softmax with temperature: `softmax(row / temperature)`.
///
/// The row maximum is subtracted before exponentiation, so the result is
/// invariant under adding a constant to a row and never overflows for
/// finite inputs.
pub fn softmax_rows(a: &Matrix, temperature: f64) -> Matrix {
    assert!(temperature > 0.0, "softmax temperature must be positive");
    let mut out = a.clone();
    for r in 0..out.rows {
        softmax_row(out.row_mut(r), temperature);
    }
    tally(5 * a.rows as u64 * a.cols as u64);
    out
}

pub(crate) fn softmax_row(row: &mut [f64], temperature: f64) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - m) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise layer normalization with affine parameters:
/// `gamma * (x - mean) / sqrt(var + eps) + beta`, variance taken over the
/// row (population form, divisor = width).
pub fn layernorm(a: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Matrix> {
    if gamma.len() != a.cols || beta.len() != a.cols {
        return Err(CoreError::ShapeMismatch {
            op: "layernorm",
            detail: format!(
                "gamma {} beta {} for width {}",
                gamma.len(),
                beta.len(),
                a.cols
            ),
        });
    }
    let mut out = a.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (v, (&g, &b)) in row.iter_mut().zip(gamma.iter().zip(beta)) {
            *v = g * (*v - mean) * inv + b;
        }
    }
    tally(6 * a.rows as u64 * a.cols as u64);
    Ok(out)
}

/// Row-wise RMS normalization: `gamma * x / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm(a: &Matrix, gamma: &[f64], eps: f64) -> Result<Matrix> {
    if gamma.len() != a.cols {
        return Err(CoreError::ShapeMismatch {
            op: "rmsnorm",
            detail: format!("gamma {} for width {}", gamma.len(), a.cols),
        });
    }
    let mut out = a.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let n = row.len() as f64;
        let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(gamma) {
            *v = g * *v * inv;
        }
    }
    tally(6 * a.rows as u64 * a.cols as u64);
    Ok(out)
}

// ============================================================
// Permutations
// ============================================================

/// A permutation stored as an index array.
///
/// The array is the gather form: applying to columns reads
/// `out[i][j] = x[i][perm[j]]`, which equals right-multiplication by the
/// permutation matrix whose `(perm[j], j)` entries are one. Applying to rows
/// reads `out[i] = x[perm[i]]`, which equals left-multiplication by the
/// transpose of that same matrix. Composing the two therefore cancels:
/// `apply_cols(x, p)` times `apply_rows(w, p)` equals `x * w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermIndex {
    idx: Vec<u32>,
}

impl PermIndex {
    pub fn identity(n: usize) -> Self {
        PermIndex {
            idx: (0..n as u32).collect(),
        }
    }

    /// Validate that `idx` is a bijection on `0..idx.len()`.
    pub fn from_vec(idx: Vec<u32>) -> Result<Self> {
        let n = idx.len();
        let mut seen = vec![false; n];
        for &i in &idx {
            if (i as usize) >= n || seen[i as usize] {
                return Err(CoreError::InvalidPermutation(format!(
                    "index {} repeated or out of range for length {}",
                    i, n
                )));
            }
            seen[i as usize] = true;
        }
        Ok(PermIndex { idx })
    }

    /// Uniform random permutation via Fisher-Yates.
    pub fn random<R: rand::Rng>(n: usize, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let mut idx: Vec<u32> = (0..n as u32).collect();
        idx.shuffle(rng);
        PermIndex { idx }
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.idx
    }

    pub fn inverse(&self) -> PermIndex {
        let mut inv = vec![0u32; self.idx.len()];
        for (j, &i) in self.idx.iter().enumerate() {
            inv[i as usize] = j as u32;
        }
        PermIndex { idx: inv }
    }

    pub fn is_identity(&self) -> bool {
        self.idx.iter().enumerate().all(|(j, &i)| j as u32 == i)
    }
}

/// Permute columns: `out[i][j] = x[i][perm[j]]`.
pub fn apply_cols(x: &Matrix, perm: &PermIndex) -> Result<Matrix> {
    if perm.len() != x.cols {
        return Err(CoreError::ShapeMismatch {
            op: "apply_cols",
            detail: format!("perm {} for {} cols", perm.len(), x.cols),
        });
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let src = x.row(r);
        let dst = out.row_mut(r);
        for (j, &p) in perm.idx.iter().enumerate() {
            dst[j] = src[p as usize];
        }
    }
    Ok(out)
}

/// Permute rows: `out[i] = x[perm[i]]`.
pub fn apply_rows(x: &Matrix, perm: &PermIndex) -> Result<Matrix> {
    if perm.len() != x.rows {
        return Err(CoreError::ShapeMismatch {
            op: "apply_rows",
            detail: format!("perm {} for {} rows", perm.len(), x.rows),
        });
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for (i, &p) in perm.idx.iter().enumerate() {
        out.row_mut(i).copy_from_slice(x.row(p as usize));
    }
    Ok(out)
}

/// Permute a vector by the column rule: `out[j] = x[perm[j]]`.
pub fn apply_vec(x: &[f64], perm: &PermIndex) -> Result<Vec<f64>> {
    if perm.len() != x.len() {
        return Err(CoreError::ShapeMismatch {
            op: "apply_vec",
            detail: format!("perm {} for {} elements", perm.len(), x.len()),
        });
    }
    Ok(perm.idx.iter().map(|&p| x[p as usize]).collect())
}

// ============================================================
// Sparse rows
// ============================================================

/// A batch of sparse rows over a fixed column count; each row holds sorted,
/// strictly increasing `(index, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub width: u32,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl SparseRows {
    /// Construct and validate in one step.
    pub fn new(width: u32, rows: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        let s = SparseRows { width, rows };
        s.validate()?;
        Ok(s)
    }

    /// Check sortedness, uniqueness, index bounds and value finiteness.
    pub fn validate(&self) -> Result<()> {
        for (r, row) in self.rows.iter().enumerate() {
            let mut prev: Option<u32> = None;
            for &(i, v) in row {
                if i >= self.width {
                    return Err(CoreError::InvalidSparseRow(format!(
                        "row {}: index {} exceeds width {}",
                        r, i, self.width
                    )));
                }
                if let Some(p) = prev {
                    if i <= p {
                        return Err(CoreError::InvalidSparseRow(format!(
                            "row {}: indices not strictly increasing at {}",
                            r, i
                        )));
                    }
                }
                if !v.is_finite() {
                    return Err(CoreError::InvalidSparseRow(format!(
                        "row {}: non-finite value at index {}",
                        r, i
                    )));
                }
                prev = Some(i);
            }
        }
        Ok(())
    }

    /// Materialize as a dense matrix (mostly useful in tests and oracles).
    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows.len(), self.width as usize);
        for (r, row) in self.rows.iter().enumerate() {
            for &(i, v) in row {
                out.set(r, i as usize, v);
            }
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

/// Weighted gather-sum: `out[r] = sum over (i, v) in rows[r] of v * table[i]`.
///
/// Accumulates in ascending index order per row. Costs `nnz * table.cols()`
/// under the accounting policy (the additions of a sparse one-hot-like
/// product; the index work is free).
pub fn sparse_gather_sum(rows: &SparseRows, table: &Matrix) -> Result<Matrix> {
    if rows.width as usize != table.rows {
        return Err(CoreError::ShapeMismatch {
            op: "sparse_gather_sum",
            detail: format!("width {} vs table rows {}", rows.width, table.rows),
        });
    }
    let mut out = Matrix::zeros(rows.rows.len(), table.cols);
    for (r, row) in rows.rows.iter().enumerate() {
        let dst = out.row_mut(r);
        for &(i, v) in row {
            for (d, &t) in dst.iter_mut().zip(table.row(i as usize)) {
                *d += v * t;
            }
        }
    }
    tally(rows.nnz() as u64 * table.cols as u64);
    Ok(out)
}

// ============================================================
// Tests
// ============================================================
