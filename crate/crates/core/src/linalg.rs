//! Dense row-major matrices and the SPD kernels the calibrators are built on:
//! Cholesky factorization, dampening, inverse-Hessian factorization and
//! Gaussian elimination of a single index from an inverse Hessian.
//!
//! All kernels accumulate in a fixed order, so results are bit-reproducible
//! regardless of how many worker threads rayon is given.

use std::fmt;
use std::ops::{Index, IndexMut};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Pivots below this magnitude are treated as singular.
pub const PIVOT_EPS: f64 = 1e-12;

/// Column panel width for the blocked products.
pub(crate) const PANEL: usize = 64;

/// A dense, row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dims("DenseMatrix::new", "positive dims", format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dims("DenseMatrix::new", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and small fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data).expect("valid literal")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = f(r, c);
            }
        }
        m
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

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_col(&mut self, c: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (r, &v) in values.iter().enumerate() {
            self[(r, c)] = v;
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Matrix product `self · rhs`. Each output entry sums over the inner
    /// index in ascending order.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::dims(
                "matmul",
                format!("inner dim {}", self.cols),
                format!("{}", rhs.rows),
            ));
        }
        let n = rhs.cols;
        let mut out = DenseMatrix::zeros(self.rows, n);
        if n == 0 {
            return Ok(out);
        }
        // Column panels of `rhs` stay cache resident across output rows.
        for p0 in (0..n).step_by(PANEL) {
            let p1 = (p0 + PANEL).min(n);
            out.data
                .par_chunks_mut(n)
                .zip(self.data.par_chunks(self.cols.max(1)))
                .for_each(|(out_row, a_row)| {
                    let out_panel = &mut out_row[p0..p1];
                    for (l, &a) in a_row.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let b = &rhs.data[l * n + p0..l * n + p1];
                        for (o, &bv) in out_panel.iter_mut().zip(b) {
                            *o += a * bv;
                        }
                    }
                });
        }
        Ok(out)
    }

    /// `self · selfᵀ`, symmetric by construction.
    pub fn gram(&self) -> DenseMatrix {
        let k = self.rows;
        let mut out = DenseMatrix::zeros(k, k);
        out.data.par_chunks_mut(k).enumerate().for_each(|(i, out_row)| {
            let ri = self.row(i);
            for j in 0..=i {
                out_row[j] = dot(ri, self.row(j));
            }
        });
        for i in 0..k {
            for j in 0..i {
                out.data[j * k + i] = out.data[i * k + j];
            }
        }
        out
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn add(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    fn zip_with(
        &self,
        rhs: &DenseMatrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseMatrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::dims(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", rhs.shape()),
            ));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Result<DenseMatrix> {
        if !self.is_square() {
            return Err(Error::dims("symmetrize", "square", format!("{:?}", self.shape())));
        }
        let n = self.rows;
        Ok(DenseMatrix::from_fn(n, n, |i, j| {
            0.5 * (self.data[i * n + j] + self.data[j * n + i])
        }))
    }

    /// Column `c` of the result is column `perm[c]` of `self`.
    pub fn permute_cols(&self, perm: &[usize]) -> DenseMatrix {
        assert_eq!(perm.len(), self.cols);
        DenseMatrix::from_fn(self.rows, self.cols, |r, c| self[(r, perm[c])])
    }

    /// Row `r` of the result is row `perm[r]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> DenseMatrix {
        assert_eq!(perm.len(), self.rows);
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Symmetric permutation `P A Pᵀ`: entry `(i, j)` is `self[(perm[i], perm[j])]`.
    pub fn permute_sym(&self, perm: &[usize]) -> DenseMatrix {
        assert!(self.is_square() && perm.len() == self.rows);
        DenseMatrix::from_fn(self.rows, self.cols, |i, j| self[(perm[i], perm[j])])
    }

    /// Sub-matrix with the listed row/column indices removed.
    pub fn without_indices(&self, drop: &[usize]) -> DenseMatrix {
        let keep: Vec<usize> = (0..self.rows).filter(|i| !drop.contains(i)).collect();
        DenseMatrix::from_fn(keep.len(), keep.len(), |i, j| self[(keep[i], keep[j])])
    }

    /// Trailing square block starting at `(start, start)`.
    pub fn trailing(&self, start: usize) -> DenseMatrix {
        let n = self.rows - start;
        DenseMatrix::from_fn(n, n, |i, j| self[(start + i, start + j)])
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relative Frobenius distance `‖a − b‖_F / ‖b‖_F` (absolute when `b = 0`).
pub fn rel_frobenius(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let diff = a.sub(b).expect("same shape").frobenius();
    let scale = b.frobenius();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Lower-triangular Cholesky factor `G` with `G·Gᵀ = A`. Only the lower
/// triangle of `a` is read.
pub fn cholesky_lower(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::dims("cholesky_lower", "square", format!("{:?}", a.shape())));
    }
    let n = a.rows();
    let mut g = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = dot(&g.row(i)[..j], &g.row(j)[..j]);
            if i == j {
                let pivot = a[(i, i)] - s;
                if !(pivot > 0.0) || !pivot.is_finite() {
                    return Err(Error::NotPositiveDefinite {
                        index: i,
                        value: pivot,
                    });
                }
                g[(i, i)] = pivot.sqrt();
            } else {
                g[(i, j)] = (a[(i, j)] - s) / g[(j, j)];
            }
        }
    }
    Ok(g)
}

/// Adds `λ·I` with `λ = ratio · mean(diag(H))`, or `λ = ratio` when the
/// diagonal mean is zero. Returns the dampened matrix and `λ`.
pub fn dampen(h: &DenseMatrix, ratio: f64) -> (DenseMatrix, f64) {
    let diag = h.diag();
    let mean = diag.iter().sum::<f64>() / diag.len() as f64;
    let lambda = if mean == 0.0 { ratio } else { ratio * mean };
    let mut out = h.clone();
    for i in 0..h.rows().min(h.cols()) {
        out[(i, i)] += lambda;
    }
    (out, lambda)
}

/// Inverse of a lower-triangular matrix (lower-triangular result).
pub fn lower_triangular_inverse(g: &DenseMatrix) -> Result<DenseMatrix> {
    let n = g.rows();
    let mut inv = DenseMatrix::zeros(n, n);
    let mut acc = vec![0.0; n];
    for i in 0..n {
        let gii = g[(i, i)];
        if gii.abs() < PIVOT_EPS {
            return Err(Error::SingularPivot {
                index: i,
                value: gii.abs(),
            });
        }
        acc[..=i].iter_mut().for_each(|v| *v = 0.0);
        for l in 0..i {
            let gil = g[(i, l)];
            if gil == 0.0 {
                continue;
            }
            let inv_row = &inv.row(l)[..=l];
            for (a, &v) in acc[..=l].iter_mut().zip(inv_row) {
                *a += gil * v;
            }
        }
        let row = inv.row_mut(i);
        for j in 0..i {
            row[j] = -acc[j] / gii;
        }
        row[i] = 1.0 / gii;
    }
    Ok(inv)
}

/// Full inverse of an SPD matrix through its Cholesky factor,
/// `H⁻¹ = G⁻ᵀ·G⁻¹`. The result is exactly symmetric.
pub fn inverse_spd(h: &DenseMatrix) -> Result<DenseMatrix> {
    let g = cholesky_lower(h)?;
    let ginv = lower_triangular_inverse(&g)?;
    let n = h.rows();
    let mut out = DenseMatrix::zeros(n, n);
    // out[i, j] = Σ_{l ≥ max(i, j)} ginv[l, i]·ginv[l, j], lower half first.
    for l in 0..n {
        let grow = ginv.row(l)[..=l].to_vec();
        for i in 0..=l {
            let gli = grow[i];
            if gli == 0.0 {
                continue;
            }
            let orow = &mut out.row_mut(i)[..=i];
            for (o, &g) in orow.iter_mut().zip(&grow[..=i]) {
                *o += gli * g;
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            out[(j, i)] = out[(i, j)];
        }
    }
    Ok(out)
}

/// Lower Cholesky factor of an inverse Hessian, `H⁻¹ = L·Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyState {
    pub l: DenseMatrix,
    pub damping_lambda: f64,
    pub source_dim: usize,
}

impl CholeskyState {
    pub fn dim(&self) -> usize {
        self.source_dim
    }

    /// Reconstructs `H⁻¹ = L·Lᵀ`.
    pub fn hinv(&self) -> DenseMatrix {
        self.l.matmul(&self.l.transpose()).expect("square factor")
    }

    /// `Lᵀ`, cached by callers that walk rows of the upper factor.
    pub fn upper(&self) -> DenseMatrix {
        self.l.transpose()
    }
}

/// Factors an already dampened SPD Hessian into `L` with `L·Lᵀ = H⁻¹`.
pub fn invert_spd_via_cholesky(h: &DenseMatrix) -> Result<CholeskyState> {
    let hinv = inverse_spd(h)?;
    let l = cholesky_lower(&hinv)?;
    Ok(CholeskyState {
        l,
        damping_lambda: 0.0,
        source_dim: h.rows(),
    })
}

/// Symmetrizes and dampens a raw Hessian, then factors its inverse. When
/// the factorization hits a non-positive pivot the dampening ratio is
/// doubled, up to `max_retries` times.
pub fn factor_hessian(h: &DenseMatrix, ratio: f64, max_retries: u32) -> Result<CholeskyState> {
    let sym = h.symmetrized()?;
    let mut ratio = ratio;
    let mut attempt = 0;
    loop {
        let (damped, lambda) = dampen(&sym, ratio);
        match invert_spd_via_cholesky(&damped) {
            Ok(mut state) => {
                state.damping_lambda = lambda;
                return Ok(state);
            }
            Err(Error::NotPositiveDefinite { .. } | Error::SingularPivot { .. })
                if attempt < max_retries =>
            {
                attempt += 1;
                ratio = if ratio > 0.0 { ratio * 2.0 } else { 1e-6 };
            }
            Err(e) => return Err(e),
        }
    }
}

/// Removes index `p` from an inverse Hessian:
/// `H⁻¹ − H⁻¹[:, p]·H⁻¹[p, :] / H⁻¹[p, p]`, with row and column `p` set to
/// exact zeros.
pub fn gaussian_eliminate_inverse(hinv: &DenseMatrix, p: usize) -> Result<DenseMatrix> {
    if !hinv.is_square() || p >= hinv.rows() {
        return Err(Error::dims(
            "gaussian_eliminate_inverse",
            "square matrix and p < k",
            format!("{:?}, p = {p}", hinv.shape()),
        ));
    }
    let pivot = hinv[(p, p)];
    if pivot.abs() < PIVOT_EPS {
        return Err(Error::SingularPivot {
            index: p,
            value: pivot.abs(),
        });
    }
    let k = hinv.rows();
    let colp = hinv.col(p);
    let rowp = hinv.row(p).to_vec();
    let mut out = hinv.clone();
    for i in 0..k {
        let f = colp[i] / pivot;
        if f == 0.0 {
            continue;
        }
        for (o, &v) in out.row_mut(i).iter_mut().zip(&rowp) {
            *o -= f * v;
        }
    }
    for i in 0..k {
        out[(i, p)] = 0.0;
        out[(p, i)] = 0.0;
    }
    Ok(out)
}

/// Eliminates the indices in order.
pub fn eliminate_all(hinv: &DenseMatrix, indices: impl IntoIterator<Item = usize>) -> Result<DenseMatrix> {
    let mut out = hinv.clone();
    for p in indices {
        out = gaussian_eliminate_inverse(&out, p)?;
    }
    Ok(out)
}
