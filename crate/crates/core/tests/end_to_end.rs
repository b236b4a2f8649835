use duosparse_core::io::{self, Distribution, Dtype};
use duosparse_core::simulator::spmspv;
use duosparse_core::sparsity::{magnitude_prune_columns, magnitude_prune_vector};
use duosparse_core::{
    calibrate_stack, evaluate_dual_sparse, prune_layer, Activation, CsrWeights, Layer, LayerStack, Method, PruneConfig,
};
use proptest::prelude::*;

fn method_strategy() -> impl Strategy<Value = Method> {
    prop_oneof![
        Just(Method::DuoGpt),
        Just(Method::SparseGpt),
        Just(Method::Wanda),
        Just(Method::Magnitude),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // prune, pack, then run the sparse kernel: outputs equal the dense product
    #[test]
    fn pruned_layer_runs_through_the_sparse_kernel(
        n in 1usize..6,
        blocks in 1usize..4,
        seed in any::<u64>(),
        method in method_strategy(),
        act_order in any::<bool>(),
    ) {
        let block = 8;
        let k = blocks * block;
        let w = io::gen_weights(n, k, seed).unwrap();
        let x = io::gen_calibration(k, 3 * k, seed ^ 1, Distribution::Normal).unwrap();
        let (xhat, _) = magnitude_prune_columns(&x, 0.5).unwrap();
        let cfg = PruneConfig { block_size: block, act_order, method, ..PruneConfig::default() };
        let out = prune_layer(&w, &xhat, &x, &cfg).unwrap();

        prop_assert!(out.has_exact_block_sparsity(block, 0.5));
        for r in 0..n {
            prop_assert_eq!(out.mask_w.row(r).iter().filter(|b| **b).count(), out.per_row_nnz[r]);
            for c in 0..k {
                if !out.mask_w.get(r, c) {
                    prop_assert_eq!(out.pruned_w.row(r)[c], 0.0);
                }
            }
        }

        let csr = CsrWeights::from_weights(&out.pruned_w);
        csr.validate().unwrap();
        let probe = x.col(0);
        let (xs, keep) = magnitude_prune_vector(&probe, 0.5).unwrap();
        let mask = duosparse_core::BitMask::new(1, k, keep).unwrap();
        let (y, counters) = spmspv(&csr, &xs, &mask).unwrap();
        for (r, yr) in y.iter().enumerate() {
            let dense: f64 = out.pruned_w.row(r).iter().zip(&xs).map(|(a, b)| a * b).sum();
            prop_assert!((yr - dense).abs() <= 1e-12 * (1.0 + dense.abs()));
        }
        prop_assert!(counters.weights_loaded <= csr.nnz() as u64);
    }
}

#[test]
fn calibrated_stack_survives_a_disk_roundtrip() {
    let dims = [24, 16, 8];
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, d)| {
            let act = if i == 0 { Activation::Relu } else { Activation::None };
            Layer::new(io::gen_weights(d[1], d[0], 40 + i as u64).unwrap(), act)
        })
        .collect();
    let stack = LayerStack::new(layers).unwrap();
    let x0 = io::gen_calibration(24, 96, 7, Distribution::Normal).unwrap();
    let cfg = PruneConfig { block_size: 8, ..PruneConfig::default() };
    let cal = calibrate_stack(&stack, &x0, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("pruned.json");
    io::save_stack(&manifest, &cal.stack, Some(&cal.masks), &[Dtype::F64, Dtype::F64], None).unwrap();
    let loaded = io::load_stack(&manifest).unwrap();
    assert_eq!(loaded.stack, cal.stack);
    for (a, b) in loaded.masks.iter().zip(&cal.masks) {
        assert_eq!(a.as_ref(), Some(b));
    }

    let probe = io::gen_calibration(24, 5, 8, Distribution::Normal).unwrap();
    assert_eq!(
        evaluate_dual_sparse(&loaded.stack, &probe, 0.5).unwrap(),
        evaluate_dual_sparse(&cal.stack, &probe, 0.5).unwrap()
    );
}

#[test]
fn calibration_is_deterministic() {
    let w = io::gen_weights(12, 32, 5).unwrap();
    let stack = LayerStack::new(vec![Layer::new(w, Activation::None)]).unwrap();
    let x0 = io::gen_calibration(32, 64, 6, Distribution::ReluNormal).unwrap();
    let cfg = PruneConfig { block_size: 16, ..PruneConfig::default() };
    let a = calibrate_stack(&stack, &x0, &cfg).unwrap();
    let b = calibrate_stack(&stack, &x0, &cfg).unwrap();
    assert_eq!(a.stack, b.stack);
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.reports, b.reports);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn error_ordering_at_sixty_percent() {
    let (k, m, s) = (64, 256, 0.6);
    let mut errs = vec![Vec::new(); 3];
    for seed in 0..20u64 {
        let base = 500 + 10 * seed;
        let inputs = io::FactorModel::new(k, 8, 0.2, base).unwrap();
        let stack = LayerStack::new(vec![
            Layer::new(io::gen_weights(k, k, base + 1).unwrap(), Activation::Relu),
            Layer::new(io::gen_weights(k, k, base + 2).unwrap(), Activation::None),
        ])
        .unwrap();
        let calib = inputs.sample(m, base + 3).unwrap();
        let eval = inputs.sample(m, base + 4).unwrap();
        let dense = stack.forward(&eval).unwrap();
        for (i, method) in [Method::DuoGpt, Method::SparseGpt, Method::Wanda].into_iter().enumerate() {
            let cfg = PruneConfig { pw: s, px: s, block_size: 32, method, ..PruneConfig::default() };
            let out = calibrate_stack(&stack, &calib, &cfg).unwrap();
            let y = evaluate_dual_sparse(&out.stack, &eval, s).unwrap();
            errs[i].push(y.sub(&dense).unwrap().frobenius());
        }
    }
    let med: Vec<f64> = errs.into_iter().map(median).collect();
    assert!(med[0] < med[1] && med[1] < med[2], "{med:?}");
}
