//! Dense linear algebra and statistics primitives.
//!
//! Storage is `f32`; every reduction accumulates in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{QlabError, Result};

/// Row-major dense matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix, rejecting wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(QlabError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(QlabError::NonFiniteInput("matrix data"));
        }
        Ok(Self { rows, cols, data })
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

    pub fn from_diag(diag: &[f32]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from `f64` values, rounding to `f32`.
    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&v| v as f32).collect())
    }

    /// Builds a `rows x n` matrix whose columns are the given vectors.
    pub fn from_columns(rows: usize, columns: &[Vec<f32>]) -> Result<Self> {
        let cols = columns.len();
        let mut m = Self::zeros(rows, cols);
        for (c, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(QlabError::DimMismatch {
                    context: "column length",
                    expected: rows,
                    got: col.len(),
                });
            }
            for (r, &v) in col.iter().enumerate() {
                m.data[r * cols + c] = v;
            }
        }
        Ok(m)
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

    pub fn into_data(self) -> Vec<f32> {
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
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn scaled(&self, factor: f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Matrix product with `f64` accumulation.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(QlabError::DimMismatch {
                context: "matmul inner dimension",
                expected: self.cols,
                got: other.rows,
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0f32; n * m];
        let mut acc = vec![0f64; m];
        for i in 0..n {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for p in 0..k {
                let a = self.data[i * k + p] as f64;
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (slot, &b) in acc.iter_mut().zip(brow) {
                    *slot += a * b as f64;
                }
            }
            for (o, a) in out[i * m..(i + 1) * m].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self · x` with `f64` accumulation.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(QlabError::DimMismatch {
                context: "matvec",
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x) as f32).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

/// Dot product with `f64` accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

/// Packed lower-triangular factor, row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    n: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    #[inline]
    fn idx(i: usize, j: usize) -> usize {
        i * (i + 1) / 2 + j
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Entry (i, j); zero above the diagonal.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.data[Self::idx(i, j)]
        }
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.data[Self::idx(i, i)]
    }

    /// Dense `L` as row-major `f64`.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                out[i * n + j] = self.get(i, j);
            }
        }
        out
    }

    /// `L·Lᵀ` as row-major `f64`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| self.get(i, k) * self.get(j, k)).sum();
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        out
    }

    /// Solves `L·Lᵀ x = b` in place.
    fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.data[Self::idx(i, k)] * b[k];
            }
            b[i] = s / self.diag(i);
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.data[Self::idx(k, i)] * b[k];
            }
            b[i] = s / self.diag(i);
        }
    }
}

fn check_symmetric(n: usize, a: &[f64]) -> Result<()> {
    let scale = a.iter().fold(0f64, |m, v| m.max(v.abs()));
    let tol = 1e-6 * scale;
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs() > tol {
                return Err(QlabError::NotSymmetric { i, j });
            }
        }
    }
    Ok(())
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Symmetry is checked to 1e-6 relative to the largest entry; only the lower
/// triangle is read.
pub fn cholesky(a: &Matrix) -> Result<LowerTriangular> {
    if !a.is_square() {
        return Err(QlabError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    cholesky_f64(a.rows, &a.to_f64())
}

pub(crate) fn cholesky_f64(n: usize, a: &[f64]) -> Result<LowerTriangular> {
    check_symmetric(n, a)?;
    let mut l = vec![0f64; n * (n + 1) / 2];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            let (ri, rj) = (LowerTriangular::idx(i, 0), LowerTriangular::idx(j, 0));
            for k in 0..j {
                s -= l[ri + k] * l[rj + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(QlabError::NotPositiveDefinite { index: i, pivot: s });
                }
                l[ri + i] = s.sqrt();
            } else {
                l[ri + j] = s / l[rj + j];
            }
        }
    }
    Ok(LowerTriangular { n, data: l })
}

/// Inverse of a symmetric positive-definite matrix via Cholesky and triangular solves.
pub fn invert_spd(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(QlabError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let inv = invert_spd_f64(a.rows, &a.to_f64())?;
    Matrix::from_f64(a.rows, a.cols, &inv)
}

pub(crate) fn invert_spd_f64(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    let l = cholesky_f64(n, a)?;
    let mut inv = vec![0f64; n * n];
    let mut col = vec![0f64; n];
    for c in 0..n {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[c] = 1.0;
        l.solve_in_place(&mut col);
        for r in 0..n {
            inv[r * n + c] = col[r];
        }
    }
    // exact symmetry
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = m;
            inv[j * n + i] = m;
        }
    }
    Ok(inv)
}

/// Result of a rank correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCorrelation {
    pub rho: f64,
    /// Set when either input is constant; `rho` is then defined as 0.
    pub degenerate: bool,
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<RankCorrelation> {
    if x.len() != y.len() {
        return Err(QlabError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(QlabError::EmptyInput("spearman_rho needs at least 2 points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(QlabError::NonFiniteInput("spearman_rho"));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        log::warn!("spearman_rho: constant input, returning 0");
        return Ok(RankCorrelation {
            rho: 0.0,
            degenerate: true,
        });
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Ok(RankCorrelation {
        rho,
        degenerate: false,
    })
}

/// Linear-interpolation quantiles between closest ranks (type 7).
pub fn quantiles(v: &[f64], qs: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(QlabError::EmptyInput("quantiles"));
    }
    if qs.iter().any(|q| !(0.0..=1.0).contains(q)) {
        return Err(QlabError::ShapeMismatch(
            "quantile probabilities must lie in [0, 1]".into(),
        ));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(qs.iter().map(|&q| quantile_sorted(&sorted, q)).collect())
}

pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median of a non-empty slice (mean of the two middle values for even lengths).
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
