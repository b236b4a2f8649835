//! Exact, slow reference solver.
//!
//! Each row is pruned greedily in optimal order: every candidate's
//! closed-form loss is evaluated against an explicitly maintained inverse
//! Hessian and output residual, the cheapest weight is removed, the
//! survivors are compensated and the index is eliminated from `H⁻¹`.
//! Intended for `k ≤ 32`; cost is `O(k⁴ + k²m)` per row.

use serde::{Deserialize, Serialize};

use crate::duogpt::{self, precompute, row_block_mask, score_block, RowKernel};
use crate::error::{Error, Result};
use crate::linalg::{
    dot, factor_hessian, gaussian_eliminate_inverse, inverse_spd, CholeskyState, DenseMatrix, PIVOT_EPS,
};
use crate::sparsity::pruned_count;

/// Largest input dimension the oracle diff accepts.
pub const ORACLE_MAX_K: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    DuoGpt,
    /// Residual forced to zero: classic optimal-brain-surgeon updates.
    SparseGpt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowPruneTrace {
    pub pruned_indices: Vec<usize>,
    pub final_row: Vec<f64>,
    /// Realized `‖Δw·X̂ − r‖² + λ‖Δw‖²` after each removal.
    pub loss_history: Vec<f64>,
    /// Closed-form loss of the chosen candidate at each step.
    pub predicted_losses: Vec<f64>,
    /// Residual `w·(X̃ − X̂)` for the final row.
    pub residual: Vec<f64>,
}

/// `v·X̂ᵀ` for a length-m vector `v`.
fn times_xt(v: &[f64], xhat: &DenseMatrix) -> Vec<f64> {
    (0..xhat.rows()).map(|i| dot(xhat.row(i), v)).collect()
}

/// `g·A` for a row vector `g`.
fn vec_mat(g: &[f64], a: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; a.cols()];
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(a.row(i)) {
            *o += gi * v;
        }
    }
    out
}

/// `v·X` for a length-k vector `v` and `X` of shape k×m.
fn vec_times(v: &[f64], x: &DenseMatrix) -> Vec<f64> {
    vec_mat(v, x)
}

/// Loss of removing weight `p` and the optimal update of the whole row:
///
/// `L = w_p²/H⁻¹_pp + r·rᵀ − r·X̂ᵀ·H⁻¹₋p·X̂·rᵀ + (2w_p/H⁻¹_pp)·r·X̂ᵀ·H⁻¹[:,p]`
/// `Δw = −(w_p/H⁻¹_pp)·H⁻¹[p,:] + r·X̂ᵀ·H⁻¹₋p`
///
/// `Δw[p]` is set to exactly `−w[p]`.
pub fn duo_loss_and_update(
    w: &[f64],
    p: usize,
    hinv: &DenseMatrix,
    xhat: &DenseMatrix,
    r: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let k = w.len();
    if hinv.shape() != (k, k) || xhat.rows() != k || r.len() != xhat.cols() || p >= k {
        return Err(Error::dims(
            "duo_loss_and_update",
            format!("w: 1×{k}, H⁻¹: {k}×{k}, X̂: {k}×m, r: 1×m"),
            format!("H⁻¹ {:?}, X̂ {:?}, r {}, p {p}", hinv.shape(), xhat.shape(), r.len()),
        ));
    }
    let g = times_xt(r, xhat);
    loss_and_update_with(w, p, hinv, &g, dot(r, r))
}

fn loss_and_update_with(w: &[f64], p: usize, hinv: &DenseMatrix, g: &[f64], rr: f64) -> Result<(f64, Vec<f64>)> {
    let hpp = hinv[(p, p)];
    if hpp.abs() < PIVOT_EPS {
        return Err(Error::SingularPivot { index: p, value: hpp.abs() });
    }
    let wp = w[p];
    let hinv_mp = gaussian_eliminate_inverse(hinv, p)?;
    let g_hmp = vec_mat(g, &hinv_mp);
    let cross = dot(g, &hinv.col(p));
    let loss = wp * wp / hpp + rr - dot(&g_hmp, g) + 2.0 * wp / hpp * cross;
    let scale = wp / hpp;
    let mut delta: Vec<f64> = hinv.row(p).iter().zip(&g_hmp).map(|(&h, &c)| -scale * h + c).collect();
    delta[p] = -wp;
    Ok((loss, delta))
}

/// `‖ŵ·X̂ − w·X̃‖²` for a single row.
pub fn row_objective(w_hat: &[f64], w: &[f64], xhat: &DenseMatrix, xtilde: &DenseMatrix) -> f64 {
    let a = vec_times(w_hat, xhat);
    let b = vec_times(w, xtilde);
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Factor of the dampened inverse Hessian together with an independently
/// formed explicit inverse of the same dampened matrix.
pub fn damped_inverse(xhat: &DenseMatrix, damp: f64) -> Result<(CholeskyState, DenseMatrix)> {
    let h = xhat.gram().symmetrized()?;
    let chol = factor_hessian(&h, damp, duogpt::MAX_DAMPING_RETRIES)?;
    let mut damped = h;
    for i in 0..damped.rows() {
        damped[(i, i)] += chol.damping_lambda;
    }
    let hinv = inverse_spd(&damped)?;
    Ok((chol, hinv))
}

/// Greedy optimal-order pruning of a single row.
pub fn prune_row_exact(
    w: &[f64],
    xhat: &DenseMatrix,
    xtilde: &DenseMatrix,
    pw: f64,
    damp: f64,
    mode: OracleMode,
) -> Result<RowPruneTrace> {
    let k = w.len();
    if xhat.rows() != k || xtilde.shape() != xhat.shape() {
        return Err(Error::dims(
            "prune_row_exact",
            format!("X̂, X̃ of shape {k}×m"),
            format!("{:?}, {:?}", xhat.shape(), xtilde.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&pw) {
        return Err(Error::InvalidConfig(format!("pw must lie in [0, 1], got {pw}")));
    }
    let count = pruned_count(k, pw);
    if count > k {
        return Err(Error::InfeasibleSparsity { requested: count, available: k });
    }
    let (chol, hinv) = damped_inverse(xhat, damp)?;
    prune_row_with_hinv(w, xhat, xtilde, count, hinv, chol.damping_lambda, mode)
}

/// Greedy pruning of `count` weights given an explicit inverse of
/// `X̂X̂ᵀ + ridge·I`. The realized loss includes the `ridge·‖Δw‖²` term.
pub fn prune_row_with_hinv(
    w: &[f64],
    xhat: &DenseMatrix,
    xtilde: &DenseMatrix,
    count: usize,
    mut hinv: DenseMatrix,
    ridge: f64,
    mode: OracleMode,
) -> Result<RowPruneTrace> {
    let k = w.len();
    let m = xhat.cols();
    let delta_x = xtilde.sub(xhat)?;
    let mut row = w.to_vec();
    let mut r = match mode {
        OracleMode::DuoGpt => vec_times(&row, &delta_x),
        OracleMode::SparseGpt => vec![0.0; m],
    };
    let mut pruned = vec![false; k];
    let mut trace = RowPruneTrace {
        pruned_indices: Vec::with_capacity(count),
        final_row: Vec::new(),
        loss_history: Vec::with_capacity(count),
        predicted_losses: Vec::with_capacity(count),
        residual: Vec::new(),
    };

    for _ in 0..count {
        let g = times_xt(&r, xhat);
        let rr = dot(&r, &r);
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for p in (0..k).filter(|&p| !pruned[p]) {
            let (loss, delta) = loss_and_update_with(&row, p, &hinv, &g, rr)?;
            if best.as_ref().map_or(true, |(_, l, _)| loss < *l) {
                best = Some((p, loss, delta));
            }
        }
        let (p, loss, delta) = best.expect("at least one candidate while count ≤ k");

        let realized = {
            let out = vec_times(&delta, xhat);
            out.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() + ridge * dot(&delta, &delta)
        };
        for (i, d) in delta.iter().enumerate() {
            if !pruned[i] {
                row[i] += d;
            }
        }
        row[p] = 0.0;
        pruned[p] = true;
        if mode == OracleMode::DuoGpt {
            // r tracks w·(X̃ − X̂) for the current row.
            let shift = vec_times(&delta, &delta_x);
            for (ri, s) in r.iter_mut().zip(&shift) {
                *ri += s;
            }
        }
        hinv = gaussian_eliminate_inverse(&hinv, p)?;
        trace.pruned_indices.push(p);
        trace.loss_history.push(realized);
        trace.predicted_losses.push(loss);
    }
    trace.final_row = row;
    trace.residual = r;
    Ok(trace)
}

/// Exact score of column `p` for every row of `W`:
/// `W[:,p]²·(1/H⁻¹_pp + ΔX_p·ΔX_pᵀ − ΔX_p·X̂ᵀ·H⁻¹₋p·X̂·ΔX_pᵀ + (2/H⁻¹_pp)·ΔX_p·X̂ᵀ·H⁻¹[:,p])`.
///
/// `hinv` is the inverse Hessian at the moment column `p` is visited, i.e.
/// with all previously fixed columns eliminated.
pub fn exact_score_column(
    w: &DenseMatrix,
    p: usize,
    hinv: &DenseMatrix,
    xhat: &DenseMatrix,
    delta_x: &DenseMatrix,
) -> Result<Vec<f64>> {
    let k = w.cols();
    if hinv.shape() != (k, k) || xhat.rows() != k || delta_x.shape() != xhat.shape() || p >= k {
        return Err(Error::dims(
            "exact_score_column",
            format!("k = {k}"),
            format!("H⁻¹ {:?}, X̂ {:?}, ΔX {:?}", hinv.shape(), xhat.shape(), delta_x.shape()),
        ));
    }
    let hpp = hinv[(p, p)];
    if hpp.abs() < PIVOT_EPS {
        return Err(Error::SingularPivot { index: p, value: hpp.abs() });
    }
    let dxp = delta_x.row(p);
    let z = times_xt(dxp, xhat);
    let hinv_mp = gaussian_eliminate_inverse(hinv, p)?;
    let a = dot(dxp, dxp);
    let b = dot(&vec_mat(&z, &hinv_mp), &z);
    let c2 = 2.0 / hpp * dot(&z, &hinv.col(p));
    let factor = 1.0 / hpp + a - b + c2;
    Ok(w.col(p).iter().map(|v| v * v * factor).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OracleDiffReport {
    pub k: usize,
    pub m: usize,
    pub rows: usize,
    pub pw: f64,
    /// Largest per-entry relative gap between efficient and exact scores at
    /// block entry.
    pub max_score_rel_dev: f64,
    /// Largest relative gap between an efficient column step and the exact
    /// single-weight update, over all pruned columns.
    pub max_compensation_dev: f64,
    pub compared_steps: usize,
    pub score_tolerance: f64,
    pub compensation_tolerance: f64,
    pub within_tolerance: bool,
}

pub const SCORE_TOLERANCE: f64 = 1e-7;
pub const COMPENSATION_TOLERANCE: f64 = 1e-6;

/// Relative gap `|a − b| / max(|a|, |b|)`, 0 when both are 0.
pub fn rel_dev(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Cross-checks the efficient solver against the exact formulas on the first
/// `rows` rows of `W` (natural column order, a single block of width `k`).
pub fn oracle_diff(
    w: &DenseMatrix,
    xhat: &DenseMatrix,
    xtilde: &DenseMatrix,
    pw: f64,
    rows: usize,
    damp: f64,
) -> Result<OracleDiffReport> {
    let (n, k) = w.shape();
    if k > ORACLE_MAX_K {
        return Err(Error::TooLargeForOracle { k, limit: ORACLE_MAX_K });
    }
    if xhat.rows() != k || xtilde.shape() != xhat.shape() {
        return Err(Error::dims(
            "oracle_diff",
            format!("calibration inputs with {k} rows"),
            format!("{:?}, {:?}", xhat.shape(), xtilde.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&pw) {
        return Err(Error::InvalidConfig(format!("pw must lie in [0, 1], got {pw}")));
    }
    let rows = rows.clamp(1, n);
    let w = DenseMatrix::new(rows, k, w.data()[..rows * k].to_vec())?;
    let delta_x = xtilde.sub(xhat)?;

    let (chol, hinv) = damped_inverse(xhat, damp)?;
    let pre = precompute(&chol, xhat, &delta_x)?;

    // Scores at block entry against the exact expression with the columns
    // before p eliminated.
    let scores = score_block(&w, 0, k, &chol, &pre)?;
    let mut states = Vec::with_capacity(k);
    let mut state = hinv.clone();
    let mut max_score = 0.0f64;
    for p in 0..k {
        let exact = exact_score_column(&w, p, &state, xhat, &delta_x)?;
        for r in 0..rows {
            max_score = max_score.max(rel_dev(scores[(r, p)], exact[r]));
        }
        let next = gaussian_eliminate_inverse(&state, p)?;
        states.push(state);
        state = next;
    }

    // Column steps of the blocked solver against the exact update with the
    // residual restricted to the visited column.
    let lt = chol.upper();
    let ldiag = chol.l.diag();
    let kernel = RowKernel { lt: &lt, d: &pre.d, ldiag: &ldiag };
    let mut max_comp = 0.0f64;
    let mut steps = 0;
    for r in 0..rows {
        let keep = row_block_mask(scores.row(r), pw);
        let mut row = w.row(r).to_vec();
        for j in 0..k {
            let before = row.clone();
            kernel.column_step(&mut row, j, k, keep[j]);
            if keep[j] {
                continue;
            }
            let resid: Vec<f64> = delta_x.row(j).iter().map(|v| v * before[j]).collect();
            let (_, want) = duo_loss_and_update(&before, j, &states[j], xhat, &resid)?;
            let scale = want.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(PIVOT_EPS);
            for l in j..k {
                max_comp = max_comp.max(((row[l] - before[l]) - want[l]).abs() / scale);
            }
            steps += 1;
        }
    }

    Ok(OracleDiffReport {
        k,
        m: xhat.cols(),
        rows,
        pw,
        max_score_rel_dev: max_score,
        max_compensation_dev: max_comp,
        compared_steps: steps,
        score_tolerance: SCORE_TOLERANCE,
        compensation_tolerance: COMPENSATION_TOLERANCE,
        within_tolerance: max_score <= SCORE_TOLERANCE && max_comp <= COMPENSATION_TOLERANCE,
    })
}
