use std::path::Path;
use std::time::Instant;

use duosparse_core::io::{
    self, gen_calibration, gen_weights, read_matrix, save_stack, write_json, write_matrix, Distribution, Dtype,
    REPORT_VERSION,
};
use duosparse_core::oracle::{oracle_diff, OracleDiffReport};
use duosparse_core::simulator::{skew_report, spmspv, sram_load_fraction, CsrWeights, ExecCounters};
use duosparse_core::sparsity::magnitude_prune_vector;
use duosparse_core::{
    calibrate_stack, Activation, BitMask, DenseMatrix, Error, Layer, LayerReport, LayerStack, PruneConfig, Result,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::Command;

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct Report<T: Serialize> {
    format_version: u32,
    command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    config: serde_json::Value,
    #[serde(flatten)]
    body: T,
    wall_time_seconds: f64,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct GenDataBody {
    out: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct GenStackBody {
    out: String,
    layers: usize,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct SparsityAudit {
    layer: usize,
    mask_path: String,
    weight_sparsity: f64,
    activation_sparsity: f64,
    block_sparsity_exact: bool,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct CalibrateBody {
    out: String,
    layers: Vec<LayerReport>,
    sparsity_audit: Vec<SparsityAudit>,
    total_reconstruction_error: f64,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct SimLayer {
    index: usize,
    #[serde(flatten)]
    counters: ExecCounters,
    /// Share of weights moved by the simulated forward pass.
    measured_fraction: f64,
    /// Load fraction from the weight mask alone.
    fraction: f64,
    max_slab_density: f64,
    min_slab_density: f64,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct SimulateBody {
    layers: Vec<SimLayer>,
    #[serde(flatten)]
    counters: ExecCounters,
    measured_fraction: f64,
    fraction: f64,
}

struct Emit {
    json: bool,
    start: Instant,
}

impl Emit {
    fn finish<T: Serialize>(
        &self,
        command: &'static str,
        seed: Option<u64>,
        config: serde_json::Value,
        body: T,
        report_path: Option<&Path>,
        summary: impl FnOnce(&T) -> String,
    ) -> Result<()> {
        let text = summary(&body);
        let report = Report {
            format_version: REPORT_VERSION,
            command,
            seed,
            config,
            body,
            wall_time_seconds: self.start.elapsed().as_secs_f64(),
        };
        if let Some(p) = report_path {
            write_json(&report, p)?;
        }
        if self.json {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        } else {
            println!("{text}");
        }
        Ok(())
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Runs one subcommand; the returned value is the process exit code.
pub(crate) fn run(command: Command, json: bool) -> Result<u8> {
    let emit = Emit {
        json,
        start: Instant::now(),
    };
    match command {
        Command::GenData {
            k,
            m,
            seed,
            dist,
            dtype,
            out,
        } => {
            let x = gen_calibration(k, m, seed, dist)?;
            write_matrix(&x, &out, dtype)?;
            let config = json!({"k": k, "m": m, "dist": dist, "dtype": dtype});
            let body = GenDataBody {
                out: display(&out),
                rows: k,
                cols: m,
            };
            emit.finish("gen-data", Some(seed), config, body, None, |b| {
                format!("wrote {}×{} matrix to {}", b.rows, b.cols, b.out)
            })?;
            Ok(0)
        }

        Command::GenStack {
            dims,
            seed,
            hidden_activation,
            random_sparsity,
            dtype,
            out,
        } => {
            gen_stack(&dims, seed, hidden_activation, random_sparsity, dtype, &out)?;
            let config = json!({
                "dims": dims,
                "hiddenActivation": hidden_activation,
                "randomSparsity": random_sparsity,
                "dtype": dtype,
            });
            let body = GenStackBody {
                out: display(&out),
                layers: dims.len() - 1,
            };
            emit.finish("gen-stack", Some(seed), config, body, None, |b| {
                format!("wrote {}-layer stack to {}", b.layers, b.out)
            })?;
            Ok(0)
        }

        Command::Calibrate {
            stack,
            calib,
            samples,
            method,
            pw,
            px,
            block_size,
            damp,
            act_order,
            global_selection,
            seed,
            out,
            report,
        } => {
            let cfg = PruneConfig {
                pw,
                px,
                block_size,
                damp_ratio: damp,
                act_order,
                method,
                seed,
                row_wise: !global_selection,
            };
            cfg.validate()?;
            let loaded = io::load_stack(&stack)?;
            let x0 = match &calib {
                Some(p) => read_matrix(p)?,
                None => gen_calibration(loaded.stack.input_dim(), samples, seed, Distribution::Normal)?,
            };
            let result = calibrate_stack(&loaded.stack, &x0, &cfg)?;
            let config = serde_json::to_value(&cfg).expect("config serializes");
            let manifest = save_stack(&out, &result.stack, Some(&result.masks), &loaded.dtypes, Some(config.clone()))?;

            let sparsity_audit = result
                .reports
                .iter()
                .zip(&result.masks)
                .zip(&manifest.layers)
                .map(|((r, mask), entry)| SparsityAudit {
                    layer: r.index,
                    mask_path: entry.mask_path.as_deref().map(display).unwrap_or_default(),
                    weight_sparsity: mask.sparsity(),
                    activation_sparsity: r.activation_sparsity,
                    block_sparsity_exact: r.block_sparsity_exact,
                })
                .collect();
            let body = CalibrateBody {
                out: display(&out),
                total_reconstruction_error: result.reports.iter().map(|r| r.reconstruction_error).sum(),
                layers: result.reports,
                sparsity_audit,
            };
            emit.finish("calibrate", Some(seed), config, body, report.as_deref(), |b| {
                let mut s = format!("{method} pw={pw} px={px}: wrote {}\n", b.out);
                for l in &b.layers {
                    s.push_str(&format!(
                        "  layer {}: error {:.6e}, weight sparsity {:.4}, activation sparsity {:.4}\n",
                        l.index, l.reconstruction_error, l.weight_sparsity, l.activation_sparsity
                    ));
                }
                s.trim_end().to_string()
            })?;
            Ok(0)
        }

        Command::OracleDiff {
            weights,
            calib_sparse,
            calib_dense,
            pw,
            rows,
            damp,
        } => {
            let w = read_matrix(&weights)?;
            let xhat = read_matrix(&calib_sparse)?;
            let xtilde = read_matrix(&calib_dense)?;
            let rep: OracleDiffReport = oracle_diff(&w, &xhat, &xtilde, pw, rows, damp)?;
            let ok = rep.within_tolerance;
            let config = json!({"pw": pw, "rows": rows, "damp": damp});
            emit.finish("oracle-diff", None, config, rep, None, |r| {
                format!(
                    "score deviation {:.3e} (tol {:.0e}), compensation deviation {:.3e} (tol {:.0e}) over {} steps: {}",
                    r.max_score_rel_dev,
                    r.score_tolerance,
                    r.max_compensation_dev,
                    r.compensation_tolerance,
                    r.compared_steps,
                    if r.within_tolerance { "ok" } else { "OUT OF TOLERANCE" }
                )
            })?;
            Ok(if ok { 0 } else { crate::EXIT_NUMERICAL })
        }

        Command::Simulate {
            stack,
            input,
            px,
            worst_case,
            report,
        } => {
            if !(0.0..=1.0).contains(&px) {
                return Err(Error::InvalidConfig(format!("px must lie in [0, 1], got {px}")));
            }
            let loaded = io::load_stack(&stack)?;
            let x = read_matrix(&input)?;
            let body = simulate(&loaded.stack, &loaded.masks, &x, px, worst_case)?;
            let config = json!({"px": px, "worstCase": worst_case});
            emit.finish("simulate", None, config, body, report.as_deref(), |b| {
                let mut s = String::new();
                for l in &b.layers {
                    s.push_str(&format!(
                        "layer {}: loaded {} of {} weights ({:.4}), SRAM fraction {:.4}\n",
                        l.index, l.counters.weights_loaded, l.counters.total_weights, l.measured_fraction, l.fraction
                    ));
                }
                s.push_str(&format!("overall SRAM fraction {:.4}", b.fraction));
                s
            })?;
            Ok(0)
        }
    }
}

fn gen_stack(
    dims: &[usize],
    seed: u64,
    hidden: Activation,
    random_sparsity: Option<f64>,
    dtype: Dtype,
    out: &Path,
) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidConfig("--dims needs at least two widths".into()));
    }
    if let Some(p) = random_sparsity {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("--random-sparsity must lie in [0, 1], got {p}")));
        }
    }
    let last = dims.len() - 2;
    let mut layers = Vec::with_capacity(dims.len() - 1);
    let mut masks = Vec::with_capacity(dims.len() - 1);
    for (i, pair) in dims.windows(2).enumerate() {
        let layer_seed = seed.wrapping_add(i as u64);
        let mut w = gen_weights(pair[1], pair[0], layer_seed)?;
        if let Some(p) = random_sparsity {
            let mut rng = io::Xoshiro::new(layer_seed ^ 0x5eed_5eed_5eed_5eed);
            let bits: Vec<bool> = (0..w.data().len()).map(|_| rng.uniform() >= p).collect();
            let mask = BitMask::new(w.rows(), w.cols(), bits)?;
            w = duosparse_core::sparsity::apply_weight_mask(&w, &mask)?;
            masks.push(mask);
        }
        let act = if i == last { Activation::None } else { hidden };
        layers.push(Layer::new(w, act));
    }
    let stack = LayerStack::new(layers)?;
    let dtypes = vec![dtype; stack.layers().len()];
    let masks = random_sparsity.map(|_| masks.as_slice());
    save_stack(out, &stack, masks, &dtypes, None)?;
    Ok(())
}

fn simulate(
    stack: &LayerStack,
    masks: &[Option<BitMask>],
    x: &DenseMatrix,
    px: f64,
    worst_case: bool,
) -> Result<SimulateBody> {
    if x.rows() != stack.input_dim() {
        return Err(Error::DimensionMismatch {
            op: "simulate",
            expected: format!("{} input rows", stack.input_dim()),
            got: x.rows().to_string(),
        });
    }
    let mut cur = x.clone();
    let mut layers = Vec::with_capacity(stack.layers().len());
    let mut total = ExecCounters::default();
    let mut weighted_fraction = 0.0;
    let mut weight_count = 0usize;

    for (index, layer) in stack.layers().iter().enumerate() {
        let mask_w = masks
            .get(index)
            .cloned()
            .flatten()
            .unwrap_or_else(|| BitMask::nonzeros_of(&layer.w));
        let csr = CsrWeights::from_weights(&layer.w);
        let cols: Vec<(Vec<f64>, ExecCounters)> = (0..cur.cols())
            .into_par_iter()
            .map(|t| {
                let (xs, keep) = magnitude_prune_vector(&cur.col(t), px)?;
                let act = BitMask::new(1, xs.len(), keep)?;
                spmspv(&csr, &xs, &act)
            })
            .collect::<Result<_>>()?;

        let mut next = DenseMatrix::zeros(layer.w.rows(), cur.cols());
        let mut counters = ExecCounters::default();
        for (t, (y, c)) in cols.iter().enumerate() {
            next.set_col(t, y);
            counters.merge(c);
        }
        layer.activation.apply(&mut next);
        cur = next;

        let fraction = sram_load_fraction(&mask_w, px, worst_case);
        let skew = skew_report(&mask_w);
        let size = layer.w.rows() * layer.w.cols();
        weighted_fraction += fraction * size as f64;
        weight_count += size;
        total.merge(&counters);
        layers.push(SimLayer {
            index,
            counters,
            measured_fraction: counters.fraction(),
            fraction,
            max_slab_density: skew.max_density,
            min_slab_density: skew.min_density,
        });
    }

    Ok(SimulateBody {
        layers,
        counters: total,
        measured_fraction: total.fraction(),
        fraction: weighted_fraction / weight_count as f64,
    })
}
