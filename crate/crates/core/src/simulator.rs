//! Dual-sparse GEMV cost model.
//!
//! Weights are compressed along the activation dimension: slab `i` holds
//! the nonzeros of column `i` of `W` (the weights multiplied by activation
//! `x_i`), so a zero activation skips its whole slab. In storage terms a
//! slab is a compressed "row"; in matrix terms it is a column of `W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::sparsity::{round_count, BitMask};

/// CSR storage with one compressed row per slab.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrWeights {
    /// Number of slabs, i.e. the input width `k`.
    pub n_rows: usize,
    /// Output width `n`.
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrWeights {
    /// Compresses an `n × k` weight matrix slab by slab.
    pub fn from_weights(w: &DenseMatrix) -> Self {
        let (n, k) = w.shape();
        let mut row_ptr = Vec::with_capacity(k + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..k {
            for r in 0..n {
                let v = w[(r, i)];
                if v != 0.0 {
                    col_idx.push(r);
                    vals.push(v);
                }
            }
            row_ptr.push(vals.len());
        }
        Self {
            n_rows: k,
            n_cols: n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    /// Back to the `n × k` weight layout.
    pub fn to_dense(&self) -> Result<DenseMatrix> {
        self.validate()?;
        let mut w = DenseMatrix::zeros(self.n_cols, self.n_rows);
        for i in 0..self.n_rows {
            for t in self.row_ptr[i]..self.row_ptr[i + 1] {
                w[(self.col_idx[t], i)] = self.vals[t];
            }
        }
        Ok(w)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn slab_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::MalformedCsr(msg));
        if self.row_ptr.len() != self.n_rows + 1 {
            return bad(format!("rowPtr has {} entries, expected {}", self.row_ptr.len(), self.n_rows + 1));
        }
        if self.row_ptr[0] != 0 {
            return bad(format!("rowPtr[0] = {}", self.row_ptr[0]));
        }
        if self.col_idx.len() != self.vals.len() || self.row_ptr[self.n_rows] != self.vals.len() {
            return bad(format!(
                "rowPtr ends at {}, colIdx has {}, vals has {}",
                self.row_ptr[self.n_rows],
                self.col_idx.len(),
                self.vals.len()
            ));
        }
        for i in 0..self.n_rows {
            let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
            if a > b {
                return bad(format!("rowPtr decreases at slab {i}"));
            }
            let cols = &self.col_idx[a..b];
            if cols.windows(2).any(|p| p[0] >= p[1]) {
                return bad(format!("colIdx not strictly increasing in slab {i}"));
            }
            if cols.last().is_some_and(|&c| c >= self.n_cols) {
                return bad(format!("colIdx out of range in slab {i}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExecCounters {
    pub weights_loaded: u64,
    pub macs: u64,
    pub slabs_touched: u64,
    pub total_weights: u64,
}

impl ExecCounters {
    pub fn fraction(&self) -> f64 {
        if self.total_weights == 0 {
            0.0
        } else {
            self.weights_loaded as f64 / self.total_weights as f64
        }
    }

    pub fn merge(&mut self, other: &ExecCounters) {
        self.weights_loaded += other.weights_loaded;
        self.macs += other.macs;
        self.slabs_touched += other.slabs_touched;
        self.total_weights += other.total_weights;
    }
}

/// `y = W·(x ⊙ m)`, visiting only slabs whose mask bit is set, in
/// ascending slab order.
pub fn spmspv(w: &CsrWeights, x: &[f64], mask: &BitMask) -> Result<(Vec<f64>, ExecCounters)> {
    w.validate()?;
    if x.len() != w.n_rows || mask.shape() != (1, w.n_rows) {
        return Err(Error::dims(
            "spmspv",
            format!("x of length {0} and a 1×{0} mask", w.n_rows),
            format!("x of length {}, mask {:?}", x.len(), mask.shape()),
        ));
    }
    let mut y = vec![0.0; w.n_cols];
    let mut counters = ExecCounters {
        total_weights: (w.n_rows * w.n_cols) as u64,
        ..ExecCounters::default()
    };
    for (i, &xi) in x.iter().enumerate() {
        if !mask.get(0, i) {
            continue;
        }
        let (a, b) = (w.row_ptr[i], w.row_ptr[i + 1]);
        for (&r, &v) in w.col_idx[a..b].iter().zip(&w.vals[a..b]) {
            y[r] += v * xi;
        }
        counters.slabs_touched += 1;
        counters.weights_loaded += (b - a) as u64;
    }
    counters.macs = counters.weights_loaded;
    Ok((y, counters))
}

/// Dense reference: `y[r] = Σᵢ W[r,i]·(xᵢ·mᵢ)` summed in ascending `i`.
pub fn dense_masked_gemv(w: &DenseMatrix, x: &[f64], mask: &BitMask) -> Result<Vec<f64>> {
    let (n, k) = w.shape();
    if x.len() != k || mask.shape() != (1, k) {
        return Err(Error::dims("dense_masked_gemv", k, x.len()));
    }
    let xm: Vec<f64> = x.iter().enumerate().map(|(i, &v)| if mask.get(0, i) { v } else { 0.0 }).collect();
    Ok((0..n)
        .map(|r| w.row(r).iter().zip(&xm).fold(0.0, |acc, (a, b)| acc + a * b))
        .collect())
}

/// Nonzeros per slab (per column of the weight mask).
pub fn slab_nnz(mask_w: &BitMask) -> Vec<usize> {
    (0..mask_w.cols()).map(|c| mask_w.col_count(c)).collect()
}

/// Fraction of all `n·k` weights moved to SRAM when a `1 − px` share of
/// the slabs is active. Worst case assumes the densest slabs are the
/// active ones; otherwise the expectation under uniform slab selection.
pub fn sram_load_fraction(mask_w: &BitMask, px: f64, worst_case: bool) -> f64 {
    let (n, k) = mask_w.shape();
    let total = (n * k) as f64;
    if total == 0.0 {
        return 0.0;
    }
    let px = px.clamp(0.0, 1.0);
    if !worst_case {
        return (1.0 - px) * mask_w.count_ones() as f64 / total;
    }
    let counts = slab_nnz(mask_w);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let active = round_count((1.0 - px) * k as f64).min(k);
    order[..active].iter().map(|&i| counts[i]).sum::<usize>() as f64 / total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SkewReport {
    pub slab_nnz: Vec<usize>,
    pub slab_height: usize,
    pub max_density: f64,
    pub min_density: f64,
    pub mean_density: f64,
}

/// Per-slab density summary of a weight mask.
pub fn skew_report(mask_w: &BitMask) -> SkewReport {
    let counts = slab_nnz(mask_w);
    let h = mask_w.rows();
    let density = |c: usize| if h == 0 { 0.0 } else { c as f64 / h as f64 };
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    let mean = if counts.is_empty() {
        0.0
    } else {
        counts.iter().map(|&c| density(c)).sum::<f64>() / counts.len() as f64
    };
    SkewReport {
        slab_height: h,
        max_density: density(max),
        min_density: density(min),
        mean_density: mean,
        slab_nnz: counts,
    }
}
