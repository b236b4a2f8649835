//! Seeded fixtures shared by the kernel benchmarks.

use duosparse_core::duogpt::precompute;
use duosparse_core::io::{gen_calibration, gen_weights, Distribution};
use duosparse_core::linalg::factor_hessian;
use duosparse_core::sparsity::magnitude_prune_columns;
use duosparse_core::{CholeskyState, DenseMatrix};

pub struct LayerFixture {
    pub w: DenseMatrix,
    pub xhat: DenseMatrix,
    pub xtilde: DenseMatrix,
    pub delta_x: DenseMatrix,
    pub chol: CholeskyState,
}

/// A `n × k` layer with `k × m` calibration streams at 50% activation
/// sparsity.
pub fn layer_fixture(n: usize, k: usize, m: usize, seed: u64) -> LayerFixture {
    let w = gen_weights(n, k, seed).expect("positive shape");
    let xtilde = gen_calibration(k, m, seed + 1, Distribution::Normal).expect("positive shape");
    let (xhat, _) = magnitude_prune_columns(&xtilde, 0.5).expect("valid px");
    let delta_x = xtilde.sub(&xhat).expect("same shape");
    let chol = factor_hessian(&xhat.gram(), 0.1, 5).expect("dampened Hessian is SPD");
    LayerFixture {
        w,
        xhat,
        xtilde,
        delta_x,
        chol,
    }
}

/// Runs precompute once to check the fixture is usable.
pub fn warm(f: &LayerFixture) -> usize {
    precompute(&f.chol, &f.xhat, &f.delta_x).map(|p| p.dim()).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shapes() {
        let f = layer_fixture(4, 16, 40, 1);
        assert_eq!(f.w.shape(), (4, 16));
        assert_eq!(f.xhat.shape(), (16, 40));
        assert_eq!(f.delta_x.add(&f.xhat).unwrap(), f.xtilde);
        assert_eq!(warm(&f), 16);
    }
}
