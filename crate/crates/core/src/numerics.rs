//! Dense matrices and the handful of linear-algebra and random-number
//! primitives the solvers are built from.
//!
//! All arithmetic is `f64`. Matrices are row-major. Arithmetic helpers
//! (`matmul`, `sub`, ...) panic on shape mismatch the way slice indexing does;
//! the public solver entry points validate shapes and return [`Error`]s.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of the random stream used for every seeded draw in the crate.
///
/// Each draw seeds a fresh `ChaCha8Rng` through `SeedableRng::seed_from_u64`
/// and samples `rand_distr::StandardNormal` (ziggurat) once per entry in
/// row-major order. Sub-streams are derived with [`RngSeed::derive`].
pub const RNG_ALGORITHM: &str = "chacha8/seed_from_u64/standard-normal-ziggurat/row-major";

/// Columns with a norm at or below this are treated as zero.
pub const ZERO_COLUMN_TOL: f64 = 1e-12;

/// A 64-bit seed. Equal seeds and equal call sequences give equal streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Derives an independent sub-seed for stream `stream` (splitmix64 finalizer).
    pub fn derive(self, stream: u64) -> RngSeed {
        let mut z = self
            .0
            .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        RngSeed(z ^ (z >> 31))
    }
}

/// Standard-normal sampler over a seeded ChaCha8 stream.
pub struct GaussianStream {
    rng: ChaCha8Rng,
}

impl GaussianStream {
    pub fn new(seed: RngSeed) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed.0),
        }
    }

    pub fn sample(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

/// Dense row-major real matrix with finite entries.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major values, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidLength {
                rows,
                cols,
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    context: "from_rows",
                    left: (0, cols),
                    right: (i, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// Builds a matrix whose `j`-th column is `columns[j]`.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let mut data = vec![0.0; rows * cols];
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(Error::ShapeMismatch {
                    context: "from_columns",
                    left: (rows, cols),
                    right: (c.len(), 1),
                });
            }
            for (i, v) in c.iter().enumerate() {
                data[i * cols + j] = *v;
            }
        }
        Matrix::new(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix entry by entry. Entries must be finite.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { rows, cols, data }
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.rows && col < self.cols, "index out of bounds");
        self.data[row * self.cols + col]
    }

    pub(crate) fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub(crate) fn set_column(&mut self, c: usize, values: &[f64]) {
        for (r, v) in values.iter().enumerate() {
            self.data[r * self.cols + c] = *v;
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.data[c * self.cols + r])
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul: inner dimensions differ");
        gemm(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, self.cols as isize, 1),
            (&other.data, other.cols as isize, 1),
        )
    }

    /// `selfᵀ * other` without materializing the transpose.
    pub fn tr_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "tr_matmul: row counts differ");
        gemm(
            self.cols,
            self.rows,
            other.cols,
            (&self.data, 1, self.cols as isize),
            (&other.data, other.cols as isize, 1),
        )
    }

    /// `self * otherᵀ` without materializing the transpose.
    pub fn matmul_tr(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_tr: column counts differ");
        gemm(
            self.rows,
            self.cols,
            other.rows,
            (&self.data, self.cols as isize, 1),
            (&other.data, 1, other.cols as isize),
        )
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Matrix {
        Matrix::from_parts(self.rows, self.cols, self.data.iter().map(|v| f(*v)).collect())
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "elementwise op: shapes differ");
        Matrix::from_parts(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        )
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(blocks: &[&Matrix]) -> Matrix {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            assert_eq!(b.cols, cols, "vstack: column counts differ");
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Matrix::from_parts(rows, cols, data)
    }

    /// Places matrices with equal row counts side by side.
    pub fn hstack(blocks: &[&Matrix]) -> Matrix {
        let rows = blocks.first().map_or(0, |b| b.rows);
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                assert_eq!(b.rows, rows, "hstack: row counts differ");
                data.extend_from_slice(b.row(r));
            }
        }
        Matrix::from_parts(rows, cols, data)
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_parts(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Columns `start..end` as a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    /// The listed columns, in the given order.
    pub fn select_columns(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, indices.len(), |r, c| self.get(r, indices[c]))
    }

    /// Squared Euclidean norm of every column.
    pub fn column_sq_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, v) in out.iter_mut().zip(self.row(r)) {
                *acc += v * v;
            }
        }
        out
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().fold(f64::INFINITY, |m, v| m.min(*v))
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(pos) => Err(Error::NonFinite {
                row: pos / self.cols.max(1),
                col: pos % self.cols.max(1),
            }),
            None => Ok(()),
        }
    }
}

fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize)) -> Matrix {
    let mut c = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the strides describe in-bounds views of `a.0` (m×k) and
        // `b.0` (k×n); `c` is a dense m×n row-major buffer.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Matrix::from_parts(m, n, c)
}

/// Solves `(G + ridge·I) X = R` for symmetric positive semi-definite `G`
/// by Cholesky factorization.
///
/// With `ridge > 0` this never fails: every Cholesky pivot of `G + ridge·I`
/// is at least `ridge` in exact arithmetic, and rounding below that floor is
/// clamped back to it. With `ridge == 0` a pivot below
/// `k·ε·max(diag G)` reports [`Error::SolverSingular`].
pub fn solve_normal_equations(gram: &Matrix, rhs: &Matrix, ridge: f64) -> Result<Matrix> {
    let k = gram.rows();
    if gram.cols() != k || rhs.rows() != k {
        return Err(Error::ShapeMismatch {
            context: "solve_normal_equations",
            left: gram.shape(),
            right: rhs.shape(),
        });
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidSpec(alloc::format!(
            "ridge must be finite and >= 0, got {ridge}"
        )));
    }
    let max_diag = (0..k).fold(0.0f64, |m, i| m.max(gram.get(i, i)));
    let singular_tol = (k as f64) * f64::EPSILON * max_diag;

    // Lower-triangular factor, row-major.
    let mut l = vec![0.0; k * k];
    for j in 0..k {
        let mut pivot = gram.get(j, j) + ridge;
        for p in 0..j {
            pivot -= l[j * k + p] * l[j * k + p];
        }
        if ridge > 0.0 {
            pivot = pivot.max(ridge);
        } else if !(pivot > singular_tol) {
            return Err(Error::SolverSingular { dimension: j });
        }
        let diag = libm::sqrt(pivot);
        l[j * k + j] = diag;
        for i in j + 1..k {
            let mut s = gram.get(i, j);
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            l[i * k + j] = s / diag;
        }
    }

    let n = rhs.cols();
    let mut x = rhs.clone();
    // Forward substitution: L Y = R, row by row over all right-hand sides.
    for i in 0..k {
        for p in 0..i {
            let f = l[i * k + p];
            if f != 0.0 {
                let (head, tail) = x.data.split_at_mut(i * n);
                let src = &head[p * n..(p + 1) * n];
                for (t, s) in tail[..n].iter_mut().zip(src) {
                    *t -= f * s;
                }
            }
        }
        let d = l[i * k + i];
        for t in x.row_mut(i) {
            *t /= d;
        }
    }
    // Back substitution: Lᵀ X = Y.
    for i in (0..k).rev() {
        for p in i + 1..k {
            let f = l[p * k + i];
            if f != 0.0 {
                let (head, tail) = x.data.split_at_mut(p * n);
                let dst = &mut head[i * n..(i + 1) * n];
                for (t, s) in dst.iter_mut().zip(&tail[..n]) {
                    *t -= f * s;
                }
            }
        }
        let d = l[i * k + i];
        for t in x.row_mut(i) {
            *t /= d;
        }
    }
    x.check_finite()?;
    Ok(x)
}

/// `argmin_Z ‖B − A Z‖²_F + ridge·‖Z‖²_F` via the normal equations
/// `(AᵀA + ridge·I) Z = AᵀB`.
pub fn solve_least_squares(a: &Matrix, b: &Matrix, ridge: f64) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            context: "solve_least_squares",
            left: a.shape(),
            right: b.shape(),
        });
    }
    solve_normal_equations(&a.tr_matmul(a), &a.tr_matmul(b), ridge)
}

/// Scales every column to unit Euclidean norm and returns the original norms.
pub fn normalize_columns(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let scales: Vec<f64> = m.column_sq_norms().into_iter().map(libm::sqrt).collect();
    if let Some(column) = scales.iter().position(|s| *s <= ZERO_COLUMN_TOL) {
        return Err(Error::DegenerateAtom { column });
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        for (v, s) in out.row_mut(r).iter_mut().zip(&scales) {
            *v /= s;
        }
    }
    Ok((out, scales))
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    libm::sqrt(m.sum_sq())
}

/// A `rows × cols` matrix of i.i.d. standard normal draws.
pub fn seeded_gaussian(rows: usize, cols: usize, seed: RngSeed) -> Matrix {
    let mut stream = GaussianStream::new(seed);
    Matrix::from_parts(rows, cols, (0..rows * cols).map(|_| stream.sample()).collect())
}
