//! Activation and weight masks.
//!
//! Activation sparsity is imposed per column by absolute magnitude: each
//! column keeps its `round((1 − px)·k)` largest-magnitude entries. Rounding is
//! half-up and equal magnitudes are resolved in favour of the lower index.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Half-up rounding of a non-negative count. The small slack absorbs
/// representation error in products such as `0.35 · 20`.
pub fn round_count(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Entries kept per column of length `k` at activation sparsity `px`.
pub fn kept_count(k: usize, px: f64) -> usize {
    round_count((1.0 - px) * k as f64).min(k)
}

/// Entries pruned from a group of `width` weights at weight sparsity `pw`.
pub fn pruned_count(width: usize, pw: f64) -> usize {
    round_count(pw * width as f64)
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    /// Activation sparsity.
    pub px: f64,
    /// Weight sparsity.
    pub pw: f64,
}

impl SparsityConfig {
    pub fn new(px: f64, pw: f64) -> Result<Self> {
        check_fraction("px", px)?;
        check_fraction("pw", pw)?;
        Ok(Self { px, pw })
    }
}

/// A dense row-major 0/1 mask.
#[derive(Clone, PartialEq, Eq)]
pub struct BitMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BitMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BitMask {}x{} (sparsity {:.4})",
            self.rows,
            self.cols,
            self.sparsity()
        )
    }
}

impl BitMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::dims("BitMask::new", rows * cols, bits.len()));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    /// Mask of the nonzero entries of `m`.
    pub fn nonzeros_of(m: &DenseMatrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            bits: m.data().iter().map(|&v| v != 0.0).collect(),
        }
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [bool] {
        &mut self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn count_zeros(&self) -> usize {
        self.bits.len() - self.count_ones()
    }

    /// Fraction of zeros.
    pub fn sparsity(&self) -> f64 {
        self.count_zeros() as f64 / self.bits.len() as f64
    }

    /// Ones in column `c`.
    pub fn col_count(&self, c: usize) -> usize {
        (0..self.rows).filter(|&r| self.get(r, c)).count()
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix::new(
            self.rows,
            self.cols,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dims are positive")
    }

    /// Column `c` of the result is column `perm[c]` of `self`.
    pub fn permute_cols(&self, perm: &[usize]) -> BitMask {
        let mut out = BitMask::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, &p) in perm.iter().enumerate() {
                out.set(r, c, self.get(r, p));
            }
        }
        out
    }
}

/// Orders candidate indices so that "more worth keeping" comes first:
/// larger magnitude, then lower index.
fn keep_order(values: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Mask over `values` keeping the `keep` largest magnitudes.
pub(crate) fn top_magnitude_mask(values: &[f64], keep: usize) -> Vec<bool> {
    let k = values.len();
    let mut mask = vec![false; k];
    if keep >= k {
        mask.iter_mut().for_each(|m| *m = true);
        return mask;
    }
    if keep == 0 {
        return mask;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    idx.select_nth_unstable_by(keep - 1, keep_order(values));
    for &i in &idx[..keep] {
        mask[i] = true;
    }
    mask
}

/// Magnitude-prunes a single activation vector.
pub fn magnitude_prune_vector(x: &[f64], px: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    check_fraction("px", px)?;
    let mask = top_magnitude_mask(x, kept_count(x.len(), px));
    let xhat = x
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Ok((xhat, mask))
}

/// Magnitude-prunes every column of `x` (k×m) to activation sparsity `px`.
pub fn magnitude_prune_columns(x: &DenseMatrix, px: f64) -> Result<(DenseMatrix, BitMask)> {
    check_fraction("px", px)?;
    let (k, m) = x.shape();
    let keep = kept_count(k, px);
    let cols: Vec<Vec<bool>> = (0..m)
        .into_par_iter()
        .map(|c| top_magnitude_mask(&x.col(c), keep))
        .collect();
    let mut xhat = x.clone();
    let mut mask = BitMask::zeros(k, m);
    for (c, col_mask) in cols.iter().enumerate() {
        for (r, &keep_it) in col_mask.iter().enumerate() {
            mask.set(r, c, keep_it);
            if !keep_it {
                xhat[(r, c)] = 0.0;
            }
        }
    }
    Ok((xhat, mask))
}

/// `W ⊙ M`.
pub fn apply_weight_mask(w: &DenseMatrix, mask: &BitMask) -> Result<DenseMatrix> {
    if w.shape() != mask.shape() {
        return Err(Error::dims(
            "apply_weight_mask",
            format!("{:?}", w.shape()),
            format!("{:?}", mask.shape()),
        ));
    }
    let data = w
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    DenseMatrix::new(w.rows(), w.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::test_support::gaussian;
    use proptest::prelude::*;

    #[test]
    fn column_top_two() {
        let x = DenseMatrix::from_rows(&[[3.0], [-1.0], [0.5], [-4.0]]);
        let (xhat, mask) = magnitude_prune_columns(&x, 0.5).unwrap();
        assert_eq!(xhat.col(0), vec![3.0, 0.0, 0.0, -4.0]);
        assert_eq!(mask.bits(), &[true, false, false, true]);
    }

    #[test]
    fn zero_sparsity_is_identity() {
        let x = gaussian(6, 5, 1);
        let (xhat, mask) = magnitude_prune_columns(&x, 0.0).unwrap();
        assert_eq!(xhat, x);
        assert_eq!(mask.count_zeros(), 0);
    }

    #[test]
    fn column_sums_match_sort_oracle() {
        let x = gaussian(16, 8, 2);
        let (xhat, _) = magnitude_prune_columns(&x, 0.75).unwrap();
        for c in 0..8 {
            let col = xhat.col(c);
            assert_eq!(col.iter().filter(|v| **v != 0.0).count(), 4);
            let mut mags: Vec<f64> = x.col(c).iter().map(|v| v.abs()).collect();
            mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let want: f64 = mags[..4].iter().sum();
            let got: f64 = col.iter().map(|v| v.abs()).sum();
            assert!((want - got).abs() < 1e-12);
        }
    }

    #[test]
    fn vector_cases() {
        let (xhat, _) = magnitude_prune_vector(&[1.0, -2.0, 3.0], 1.0 / 3.0).unwrap();
        assert_eq!(xhat, vec![0.0, -2.0, 3.0]);

        let (xhat, mask) = magnitude_prune_vector(&[0.0; 4], 0.5).unwrap();
        assert_eq!(xhat, vec![0.0; 4]);
        assert_eq!(mask, vec![true, true, false, false]);
    }

    #[test]
    fn vector_mask_matches_sort_oracle() {
        let x = gaussian(1, 64, 3).into_data();
        let (_, mask) = magnitude_prune_vector(&x, 0.5).unwrap();
        let mut order: Vec<usize> = (0..64).collect();
        order.sort_by(|&a, &b| x[b].abs().partial_cmp(&x[a].abs()).unwrap().then(a.cmp(&b)));
        let mut want = vec![false; 64];
        for &i in &order[..32] {
            want[i] = true;
        }
        assert_eq!(mask, want);
    }

    #[test]
    fn weight_mask_cases() {
        let w = gaussian(4, 6, 4);
        assert_eq!(apply_weight_mask(&w, &BitMask::ones(4, 6)).unwrap(), w);
        assert_eq!(
            apply_weight_mask(&w, &BitMask::zeros(4, 6)).unwrap(),
            DenseMatrix::zeros(4, 6)
        );
        let bits: Vec<bool> = (0..24).map(|i| (i * 7) % 3 == 0).collect();
        let m = BitMask::new(4, 6, bits).unwrap();
        let out = apply_weight_mask(&w, &m).unwrap();
        let nnz = out.data().iter().filter(|v| **v != 0.0).count();
        assert!(nnz <= m.count_ones());
        assert!(matches!(
            apply_weight_mask(&w, &BitMask::ones(6, 4)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_out_of_range_sparsity() {
        assert!(magnitude_prune_vector(&[1.0], 1.5).is_err());
        assert!(SparsityConfig::new(-0.1, 0.5).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(kept_count(7, 0.5), 4);
        assert_eq!(pruned_count(7, 0.5), 4);
        assert_eq!(pruned_count(20, 0.65), 13);
        assert_eq!(kept_count(10, 0.65), 4);
        assert_eq!(pruned_count(10, 0.3), 3);
    }

    proptest! {
        #[test]
        fn column_invariants(
            k in 1usize..24,
            m in 1usize..6,
            seed in 0u64..1000,
            px_idx in 0usize..6,
        ) {
            let px = [0.0, 0.25, 0.3, 0.5, 0.65, 1.0][px_idx];
            let x = gaussian(k, m, seed);
            let (xhat, mask) = magnitude_prune_columns(&x, px).unwrap();
            let keep = kept_count(k, px);
            for c in 0..m {
                prop_assert_eq!(mask.col_count(c), keep);
                let kept_min = (0..k).filter(|&r| mask.get(r, c))
                    .map(|r| x[(r, c)].abs()).fold(f64::INFINITY, f64::min);
                let dropped_max = (0..k).filter(|&r| !mask.get(r, c))
                    .map(|r| x[(r, c)].abs()).fold(0.0, f64::max);
                prop_assert!(kept_min >= dropped_max);
            }
            // idempotent
            let (again, _) = magnitude_prune_columns(&xhat, px).unwrap();
            prop_assert_eq!(again, xhat);
        }
    }
}
