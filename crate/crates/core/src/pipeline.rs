//! Layerwise calibration of a chain of linear layers.
//!
//! Two streams run side by side: the dense stream passes calibration data
//! through the original weights, the sparse stream passes it through the
//! already-pruned layers with activation pruning in front of every layer.

use serde::{Deserialize, Serialize};

use crate::duogpt::{prune_layer, PruneConfig, ScoreStats};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::sparsity::{magnitude_prune_columns, BitMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

impl Activation {
    pub fn apply(self, m: &mut DenseMatrix) {
        if self == Activation::Relu {
            m.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `n × k`: maps `k` inputs to `n` outputs.
    pub w: DenseMatrix,
    pub activation: Activation,
}

impl Layer {
    pub fn new(w: DenseMatrix, activation: Activation) -> Self {
        Self { w, activation }
    }

    /// `act(W·x)` for a `k × m` input.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut y = self.w.matmul(x)?;
        self.activation.apply(&mut y);
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Vec<Layer>,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("a stack needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].w.rows() != pair[1].w.cols() {
                return Err(Error::dims(
                    "LayerStack::new",
                    format!("layer {} input width {}", i + 1, pair[0].w.rows()),
                    pair[1].w.cols(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].w.rows()
    }

    /// Plain dense forward pass.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }
}

/// Calibration inputs of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPair {
    pub xhat: DenseMatrix,
    pub xtilde: DenseMatrix,
    pub px: f64,
}

impl CalibrationPair {
    /// Prunes the sparse-stream input `sparse` to `px` per column.
    pub fn new(sparse: &DenseMatrix, dense: DenseMatrix, px: f64) -> Result<Self> {
        if sparse.shape() != dense.shape() {
            return Err(Error::dims("CalibrationPair::new", format!("{:?}", dense.shape()), format!("{:?}", sparse.shape())));
        }
        let (xhat, _) = magnitude_prune_columns(sparse, px)?;
        Ok(Self {
            xhat,
            xtilde: dense,
            px,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LayerReport {
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    pub reconstruction_error: f64,
    /// Achieved weight sparsity of the emitted mask.
    pub weight_sparsity: f64,
    /// Achieved zero fraction of the sparse-stream input.
    pub activation_sparsity: f64,
    pub block_sparsity_exact: bool,
    pub damping_lambda: f64,
    pub score_stats: ScoreStats,
}

#[derive(Debug, Clone)]
pub struct CalibratedStack {
    pub stack: LayerStack,
    pub masks: Vec<BitMask>,
    pub reports: Vec<LayerReport>,
}

/// Prunes every layer in order against its own pair of streams.
pub fn calibrate_stack(stack: &LayerStack, x0: &DenseMatrix, cfg: &PruneConfig) -> Result<CalibratedStack> {
    cfg.validate()?;
    if x0.rows() != stack.input_dim() {
        return Err(Error::dims("calibrate_stack", format!("{} input rows", stack.input_dim()), x0.rows()));
    }
    if !x0.is_finite() {
        return Err(Error::InvalidConfig("calibration input contains non-finite values".into()));
    }

    let mut dense = x0.clone();
    let mut sparse = x0.clone();
    let mut layers = Vec::with_capacity(stack.layers.len());
    let mut masks = Vec::with_capacity(stack.layers.len());
    let mut reports = Vec::with_capacity(stack.layers.len());

    for (index, layer) in stack.layers.iter().enumerate() {
        let pair = CalibrationPair::new(&sparse, dense, cfg.px)?;
        let out = prune_layer(&layer.w, &pair.xhat, &pair.xtilde, cfg)?;
        let zeros = pair.xhat.data().iter().filter(|v| **v == 0.0).count();
        reports.push(LayerReport {
            index,
            rows: layer.w.rows(),
            cols: layer.w.cols(),
            reconstruction_error: out.layer_error,
            weight_sparsity: out.mask_w.sparsity(),
            activation_sparsity: zeros as f64 / pair.xhat.data().len() as f64,
            block_sparsity_exact: out.has_exact_block_sparsity(cfg.block_size, cfg.pw),
            damping_lambda: out.damping_lambda,
            score_stats: out.score_stats,
        });

        let pruned = Layer::new(out.pruned_w, layer.activation);
        dense = layer.forward(&pair.xtilde)?;
        sparse = pruned.forward(&pair.xhat)?;
        layers.push(pruned);
        masks.push(out.mask_w);
    }

    Ok(CalibratedStack {
        stack: LayerStack::new(layers)?,
        masks,
        reports,
    })
}

/// Forward pass with per-column magnitude pruning at `px` in front of
/// every layer.
pub fn evaluate_dual_sparse(stack: &LayerStack, x: &DenseMatrix, px: f64) -> Result<DenseMatrix> {
    if x.rows() != stack.input_dim() {
        return Err(Error::dims("evaluate_dual_sparse", format!("{} input rows", stack.input_dim()), x.rows()));
    }
    let mut cur = x.clone();
    for layer in &stack.layers {
        let (xs, _) = magnitude_prune_columns(&cur, px)?;
        cur = layer.forward(&xs)?;
    }
    Ok(cur)
}
