//! Blocked, activation-sparsity-aware layer calibrator.
//!
//! The inverse Hessian of the sparse calibration input is factored once as
//! `H⁻¹ = L·Lᵀ`. From `L`, the sparse input `X̂` and the input gap
//! `ΔX = X̃ − X̂` the solver precomputes
//!
//! * `Q = ΔX·X̂ᵀ·L` and `U = Q` with everything on or below the diagonal zeroed,
//! * `a = diag(ΔX·ΔXᵀ)`, `b = diag(U·Uᵀ)`, `c = diag(Q) ⊘ diag(L)`,
//! * `D = U·Lᵀ`, the residual-compensation operator.
//!
//! Columns are then visited in blocks of `B`. At each block entry every weight
//! gets the score `W[r,p]²·(1/L[p,p]² + a[p] − b[p] + 2c[p])`; each row drops
//! its `round(pw·B)` lowest-scoring entries of the block. Column `j` is then
//! fixed: its pruning error `E = (W[:,j] − P[:,j]) / L[j,j]` is pushed into the
//! later columns through row `j` of `Lᵀ`, and its share of the dense/sparse
//! output residual through row `j` of `D`. Updates to columns past the
//! current block are deferred to the block end.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{factor_hessian, CholeskyState, DenseMatrix, PANEL, PIVOT_EPS};
use crate::sparsity::{apply_weight_mask, pruned_count, BitMask};

/// Dampening retries before a layer is reported as numerically singular.
pub const MAX_DAMPING_RETRIES: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Residual-aware scores and compensation.
    DuoGpt,
    /// Hessian scores and compensation on the sparse input only.
    SparseGpt,
    /// `|W|·‖X̂[p,:]‖₂`, no compensation.
    Wanda,
    /// `|W|`, no compensation.
    Magnitude,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::DuoGpt,
        Method::SparseGpt,
        Method::Wanda,
        Method::Magnitude,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DuoGpt => "duogpt",
            Method::SparseGpt => "sparsegpt",
            Method::Wanda => "wanda",
            Method::Magnitude => "magnitude",
        }
    }

    fn uses_hessian(self) -> bool {
        matches!(self, Method::DuoGpt | Method::SparseGpt)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PruneConfig {
    pub pw: f64,
    pub px: f64,
    pub block_size: usize,
    pub damp_ratio: f64,
    pub act_order: bool,
    pub method: Method,
    pub seed: u64,
    /// Select the mask per row inside each block (`true`) or over the whole
    /// `n × B` block at once.
    pub row_wise: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            pw: 0.5,
            px: 0.5,
            block_size: 128,
            damp_ratio: 0.1,
            act_order: true,
            method: Method::DuoGpt,
            seed: 0,
            row_wise: true,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pw", self.pw), ("px", self.px)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block size must be positive".into()));
        }
        if !(self.damp_ratio >= 0.0 && self.damp_ratio.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "dampening ratio must be finite and non-negative, got {}",
                self.damp_ratio
            )));
        }
        Ok(())
    }
}

/// Residual-correction terms shared by scoring and compensation.
#[derive(Debug, Clone, PartialEq)]
pub struct Precomputed {
    pub q: DenseMatrix,
    pub u: DenseMatrix,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: DenseMatrix,
}

impl Precomputed {
    /// All-zero terms: scoring and compensation reduce to the plain
    /// Hessian-based solver.
    pub fn zeros(k: usize) -> Self {
        Self {
            q: DenseMatrix::zeros(k, k),
            u: DenseMatrix::zeros(k, k),
            a: vec![0.0; k],
            b: vec![0.0; k],
            c: vec![0.0; k],
            d: DenseMatrix::zeros(k, k),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }
}

/// Computes `Q, U, a, b, c, D` from the inverse-Hessian factor, the sparse
/// calibration input `X̂` and `ΔX = X̃ − X̂` (both k×m).
pub fn precompute(chol: &CholeskyState, xhat: &DenseMatrix, delta_x: &DenseMatrix) -> Result<Precomputed> {
    let l = &chol.l;
    let k = l.rows();
    if xhat.rows() != k || delta_x.shape() != xhat.shape() {
        return Err(Error::dims(
            "precompute",
            format!("X̂, ΔX of shape {k}×m"),
            format!("{:?}, {:?}", xhat.shape(), delta_x.shape()),
        ));
    }
    let ldiag = l.diag();
    if let Some((i, v)) = ldiag.iter().enumerate().find(|(_, v)| **v < PIVOT_EPS) {
        return Err(Error::SingularPivot { index: i, value: *v });
    }

    // Z = X̂ᵀ·L (m×k), walking only the lower triangle of L.
    let xt = xhat.transpose();
    let m = xhat.cols();
    let mut z = DenseMatrix::zeros(m, k);
    for p0 in (0..k).step_by(PANEL) {
        let p1 = (p0 + PANEL).min(k);
        z.data_mut()
            .par_chunks_mut(k)
            .zip(xt.data().par_chunks(k))
            .for_each(|(zrow, xrow)| {
                for (li, &x) in xrow.iter().enumerate().skip(p0) {
                    if x == 0.0 {
                        continue;
                    }
                    let hi = (li + 1).min(p1);
                    for (zv, &lv) in zrow[p0..hi].iter_mut().zip(&l.row(li)[p0..hi]) {
                        *zv += x * lv;
                    }
                }
            });
    }
    let q = delta_x.matmul(&z)?;

    let mut u = q.clone();
    for i in 0..k {
        u.row_mut(i)[..=i].iter_mut().for_each(|v| *v = 0.0);
    }

    let a: Vec<f64> = (0..k).map(|i| delta_x.row(i).iter().map(|v| v * v).sum()).collect();
    let b: Vec<f64> = (0..k).map(|i| u.row(i).iter().map(|v| v * v).sum()).collect();
    let c: Vec<f64> = (0..k).map(|i| q[(i, i)] / ldiag[i]).collect();

    // D = U·Lᵀ; row i only sees U[i, j] for j > i and Lᵀ[j, l] for l ≥ j.
    let lt = l.transpose();
    let mut d = DenseMatrix::zeros(k, k);
    for p0 in (0..k).step_by(PANEL) {
        let p1 = (p0 + PANEL).min(k);
        d.data_mut().par_chunks_mut(k).enumerate().for_each(|(i, drow)| {
            let urow = u.row(i);
            for j in i + 1..p1 {
                let uij = urow[j];
                if uij == 0.0 {
                    continue;
                }
                let lo = j.max(p0);
                for (dv, &lv) in drow[lo..p1].iter_mut().zip(&lt.row(j)[lo..p1]) {
                    *dv += uij * lv;
                }
            }
        });
    }

    Ok(Precomputed { q, u, a, b, c, d })
}

/// Per-column score multiplier `1/L[p,p]² + a[p] − b[p] + 2c[p]`.
pub fn score_factors(chol: &CholeskyState, pre: &Precomputed) -> Vec<f64> {
    chol.l
        .diag()
        .iter()
        .enumerate()
        .map(|(p, &lpp)| 1.0 / (lpp * lpp) + pre.a[p] - pre.b[p] + 2.0 * pre.c[p])
        .collect()
}

/// Scores for columns `j0..j0 + width` of the current weights.
pub fn score_block(
    w: &DenseMatrix,
    j0: usize,
    width: usize,
    chol: &CholeskyState,
    pre: &Precomputed,
) -> Result<DenseMatrix> {
    let k = w.cols();
    if chol.dim() != k || pre.dim() != k {
        return Err(Error::dims("score_block", k, format!("{} / {}", chol.dim(), pre.dim())));
    }
    if width == 0 || j0 + width > k {
        return Err(Error::dims("score_block", format!("block within {k} columns"), format!("{j0}+{width}")));
    }
    let factors = score_factors(chol, pre);
    let n = w.rows();
    Ok(DenseMatrix::from_fn(n, width, |r, c| {
        let v = w[(r, j0 + c)];
        v * v * factors[j0 + c]
    }))
}

/// Indices of the `count` lowest scores. On equal scores the higher index is
/// dropped first, so the lower index survives.
fn lowest_scores(scores: &[f64], count: usize) -> Vec<usize> {
    let n = scores.len();
    if count == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if count < n {
        idx.select_nth_unstable_by(count - 1, |&a, &b| {
            scores[a].total_cmp(&scores[b]).then(b.cmp(&a))
        });
        idx.truncate(count);
    }
    idx.sort_unstable();
    idx
}

/// Keep-mask for one row of block scores.
pub(crate) fn row_block_mask(scores: &[f64], pw: f64) -> Vec<bool> {
    let mut keep = vec![true; scores.len()];
    for i in lowest_scores(scores, pruned_count(scores.len(), pw)) {
        keep[i] = false;
    }
    keep
}

/// Keep-mask over a whole `n × width` block of scores (row-major).
fn global_block_mask(scores: &[f64], pw: f64) -> Vec<bool> {
    row_block_mask(scores, pw)
}

/// Row-level update kernel shared by the layer solver and the oracle diff.
pub(crate) struct RowKernel<'a> {
    /// `Lᵀ`, so that column `j` of `L` is a contiguous row.
    pub lt: &'a DenseMatrix,
    pub d: &'a DenseMatrix,
    pub ldiag: &'a [f64],
}

impl RowKernel<'_> {
    /// Fixes column `j` of `row` (kept or pruned) and updates columns
    /// `j..end`. Returns the scaled error `E` and the pre-update value.
    #[inline]
    pub fn column_step(&self, row: &mut [f64], j: usize, end: usize, keep: bool) -> (f64, f64) {
        let wj = row[j];
        let kept = if keep { wj } else { 0.0 };
        let e = (wj - kept) / self.ldiag[j];
        self.apply(row, j, j, end, e, wj);
        (e, wj)
    }

    /// `row[from..end] += −e·Lᵀ[j, from..end] + wj·D[j, from..end]`.
    #[inline]
    pub fn apply(&self, row: &mut [f64], j: usize, from: usize, end: usize, e: f64, wj: f64) {
        let lt = &self.lt.row(j)[from..end];
        let d = &self.d.row(j)[from..end];
        for ((w, &l), &dv) in row[from..end].iter_mut().zip(lt).zip(d) {
            *w = *w - e * l + wj * dv;
        }
    }

    /// Processes block `[i, i + keep.len())` of a row, then applies the
    /// deferred updates to the columns after the block.
    pub fn block(&self, row: &mut [f64], i: usize, keep: &[bool], errs: &mut [f64], vals: &mut [f64]) {
        let end = i + keep.len();
        for (jj, &kp) in keep.iter().enumerate() {
            let (e, wj) = self.column_step(row, i + jj, end, kp);
            errs[jj] = e;
            vals[jj] = wj;
        }
        let k = row.len();
        if end < k {
            for jj in 0..keep.len() {
                self.apply(row, i + jj, end, k, errs[jj], vals[jj]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScoreStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub negative_fraction: f64,
}

impl ScoreStats {
    fn from_scores(scores: &[f64]) -> Self {
        if scores.is_empty() {
            return Self::default();
        }
        let (mut min, mut max, mut sum, mut neg) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for &s in scores {
            min = min.min(s);
            max = max.max(s);
            sum += s;
            if s < 0.0 {
                neg += 1;
            }
        }
        Self {
            min,
            max,
            mean: sum / scores.len() as f64,
            negative_fraction: neg as f64 / scores.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub pruned_w: DenseMatrix,
    pub mask_w: BitMask,
    pub per_row_nnz: Vec<usize>,
    /// `‖Ŵ·X̂ − W·X̃‖²_F`.
    pub layer_error: f64,
    pub score_stats: ScoreStats,
    /// Dampening actually added to the Hessian diagonal (0 for methods that
    /// do not factor a Hessian).
    pub damping_lambda: f64,
    /// Processing order of the columns: `column_order[c]` is the original
    /// index handled in position `c`.
    pub column_order: Vec<usize>,
}

impl PruneOutcome {
    /// Block-sparsity check in processing order, where blocks are formed.
    pub fn has_exact_block_sparsity(&self, block_size: usize, pw: f64) -> bool {
        has_exact_block_sparsity(&self.mask_w.permute_cols(&self.column_order), block_size, pw)
    }
}

/// `‖W_pruned·X̂ − W_orig·X̃‖²_F`.
pub fn reconstruction_error(
    w_pruned: &DenseMatrix,
    w_orig: &DenseMatrix,
    xhat: &DenseMatrix,
    xtilde: &DenseMatrix,
) -> Result<f64> {
    if w_pruned.shape() != w_orig.shape() || xhat.shape() != xtilde.shape() || w_orig.cols() != xhat.rows() {
        return Err(Error::dims(
            "reconstruction_error",
            format!("W {:?} against X {:?}", w_orig.shape(), xhat.shape()),
            format!("Ŵ {:?}, X̃ {:?}", w_pruned.shape(), xtilde.shape()),
        ));
    }
    let sparse_out = w_pruned.matmul(xhat)?;
    let dense_out = w_orig.matmul(xtilde)?;
    Ok(sparse_out.sub(&dense_out)?.frobenius_sq())
}

/// Column order for act-order: descending Hessian diagonal, ties by the
/// lower original index.
pub fn act_order_permutation(hessian_diag: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..hessian_diag.len()).collect();
    perm.sort_by(|&a, &b| hessian_diag[b].total_cmp(&hessian_diag[a]).then(a.cmp(&b)));
    perm
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (c, &p) in perm.iter().enumerate() {
        inv[p] = c;
    }
    inv
}

/// Prunes one linear layer `W` (n×k) against the sparse input `X̂` and the
/// dense-model input `X̃` (both k×m).
pub fn prune_layer(w: &DenseMatrix, xhat: &DenseMatrix, xtilde: &DenseMatrix, cfg: &PruneConfig) -> Result<PruneOutcome> {
    cfg.validate()?;
    let (n, k) = w.shape();
    if xhat.rows() != k || xtilde.shape() != xhat.shape() {
        return Err(Error::dims(
            "prune_layer",
            format!("inputs of shape {k}×m"),
            format!("X̂ {:?}, X̃ {:?}", xhat.shape(), xtilde.shape()),
        ));
    }
    if pruned_count(cfg.block_size.min(k), cfg.pw) > cfg.block_size.min(k) {
        return Err(Error::InfeasibleSparsity {
            requested: pruned_count(cfg.block_size.min(k), cfg.pw),
            available: cfg.block_size.min(k),
        });
    }

    let perm: Vec<usize> = if cfg.act_order {
        let diag: Vec<f64> = (0..k).map(|i| xhat.row(i).iter().map(|v| v * v).sum()).collect();
        act_order_permutation(&diag)
    } else {
        (0..k).collect()
    };
    let wp = w.permute_cols(&perm);
    let xhat_p = xhat.permute_rows(&perm);

    let (w_out, mask, stats, lambda) = if cfg.method.uses_hessian() {
        let xtilde_p = xtilde.permute_rows(&perm);
        let chol = factor_hessian(&xhat_p.gram(), cfg.damp_ratio, MAX_DAMPING_RETRIES)?;
        let pre = if cfg.method == Method::DuoGpt {
            let delta_x = xtilde_p.sub(&xhat_p)?;
            precompute(&chol, &xhat_p, &delta_x)?
        } else {
            Precomputed::zeros(k)
        };
        let (out, mask, stats) = calibrate_blocked(&wp, &chol, &pre, cfg)?;
        (out, mask, stats, chol.damping_lambda)
    } else {
        let (out, mask, stats) = prune_static(&wp, &xhat_p, cfg)?;
        (out, mask, stats, 0.0)
    };

    let (w_out, mask) = if cfg.act_order {
        let inv = invert_permutation(&perm);
        (w_out.permute_cols(&inv), mask.permute_cols(&inv))
    } else {
        (w_out, mask)
    };
    finish(w, w_out, mask, stats, lambda, perm, xhat, xtilde, n)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    w: &DenseMatrix,
    pruned_w: DenseMatrix,
    mask_w: BitMask,
    score_stats: ScoreStats,
    damping_lambda: f64,
    column_order: Vec<usize>,
    xhat: &DenseMatrix,
    xtilde: &DenseMatrix,
    n: usize,
) -> Result<PruneOutcome> {
    let per_row_nnz = (0..n)
        .map(|r| pruned_w.row(r).iter().filter(|v| **v != 0.0).count())
        .collect();
    let layer_error = reconstruction_error(&pruned_w, w, xhat, xtilde)?;
    if !pruned_w.is_finite() {
        return Err(Error::NumericalBreakdown("non-finite pruned weights".into()));
    }
    Ok(PruneOutcome {
        pruned_w,
        mask_w,
        per_row_nnz,
        layer_error,
        score_stats,
        damping_lambda,
        column_order,
    })
}

fn blocks(k: usize, b: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..k).step_by(b).map(move |i| (i, b.min(k - i)))
}

/// Selects the block mask from block scores (n×width, row-major).
fn select_block(scores: &DenseMatrix, pw: f64, row_wise: bool) -> Vec<Vec<bool>> {
    let (n, width) = scores.shape();
    if row_wise {
        (0..n).into_par_iter().map(|r| row_block_mask(scores.row(r), pw)).collect()
    } else {
        let flat = global_block_mask(scores.data(), pw);
        flat.chunks(width).map(|c| c.to_vec()).collect()
    }
}

/// Column-ordered blocked calibration with lazy batch updates. `w` is
/// already in processing order.
fn calibrate_blocked(
    w: &DenseMatrix,
    chol: &CholeskyState,
    pre: &Precomputed,
    cfg: &PruneConfig,
) -> Result<(DenseMatrix, BitMask, ScoreStats)> {
    let (n, k) = w.shape();
    let lt = chol.upper();
    let ldiag = chol.l.diag();
    let kernel = RowKernel {
        lt: &lt,
        d: &pre.d,
        ldiag: &ldiag,
    };
    let mut out = w.clone();
    let mut mask = BitMask::ones(n, k);
    let mut all_scores = Vec::with_capacity(n * k);

    for (i, width) in blocks(k, cfg.block_size) {
        let scores = score_block(&out, i, width, chol, pre)?;
        all_scores.extend_from_slice(scores.data());
        let keep = select_block(&scores, cfg.pw, cfg.row_wise);
        for (r, kr) in keep.iter().enumerate() {
            mask.row_mut(r)[i..i + width].copy_from_slice(kr);
        }
        out.data_mut()
            .par_chunks_mut(k)
            .zip(keep.par_iter())
            .for_each_init(
                || (vec![0.0; width], vec![0.0; width]),
                |(errs, vals), (row, kr)| kernel.block(row, i, kr, errs, vals),
            );
    }

    let out = apply_weight_mask(&out, &mask)?;
    Ok((out, mask, ScoreStats::from_scores(&all_scores)))
}

/// Compensation-free pruning with static scores.
fn prune_static(w: &DenseMatrix, xhat: &DenseMatrix, cfg: &PruneConfig) -> Result<(DenseMatrix, BitMask, ScoreStats)> {
    let (n, k) = w.shape();
    let col_norm: Vec<f64> = match cfg.method {
        Method::Wanda => (0..k)
            .map(|p| xhat.row(p).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
        _ => vec![1.0; k],
    };
    let scores = DenseMatrix::from_fn(n, k, |r, p| w[(r, p)].abs() * col_norm[p]);
    let mut mask = BitMask::ones(n, k);
    for (i, width) in blocks(k, cfg.block_size) {
        let block = DenseMatrix::from_fn(n, width, |r, c| scores[(r, i + c)]);
        for (r, kr) in select_block(&block, cfg.pw, cfg.row_wise).iter().enumerate() {
            mask.row_mut(r)[i..i + width].copy_from_slice(kr);
        }
    }
    let out = apply_weight_mask(w, &mask)?;
    Ok((out, mask, ScoreStats::from_scores(scores.data())))
}

/// True when every `(row, block)` pair of `mask` has exactly
/// `round(pw·width)` zeros.
pub fn has_exact_block_sparsity(mask: &BitMask, block_size: usize, pw: f64) -> bool {
    block_zero_counts(mask, block_size)
        .iter()
        .all(|&(width, zeros)| zeros == pruned_count(width, pw))
}

/// `(block width, zeros)` for every `(row, block)` pair.
pub fn block_zero_counts(mask: &BitMask, block_size: usize) -> Vec<(usize, usize)> {
    let (n, k) = mask.shape();
    let mut out = Vec::new();
    for r in 0..n {
        let row = mask.row(r);
        for (i, width) in blocks(k, block_size) {
            out.push((width, row[i..i + width].iter().filter(|b| !**b).count()));
        }
    }
    out
}
