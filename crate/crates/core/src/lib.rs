//! One-shot pruning calibration for networks that also run with sparse
//! activations.
//!
//! Weights are pruned layer by layer against a pair of calibration streams:
//! the activations of the dense model and the magnitude-pruned activations
//! of the partially pruned model. Compensation accounts for the gap between
//! the two, so the pruned layer reproduces the dense output from sparse
//! inputs.
//!
//! - [`linalg`]: dense matrices, Cholesky factors of the inverse Hessian.
//! - [`sparsity`]: activation masks and weight masks.
//! - [`duogpt`]: the blocked layer solver and its baselines.
//! - [`oracle`]: an exact, slow reference for small layers.
//! - [`pipeline`]: calibration of a layer chain.
//! - [`simulator`]: a dual-sparse GEMV cost model.
//! - [`io`]: file formats and seeded data.

pub mod duogpt;
pub mod error;
pub mod io;
pub mod linalg;
pub mod oracle;
pub mod pipeline;
pub mod simulator;
pub mod sparsity;

pub use duogpt::{prune_layer, Method, PruneConfig, PruneOutcome};
pub use error::{Error, Result};
pub use linalg::{CholeskyState, DenseMatrix};
pub use pipeline::{calibrate_stack, evaluate_dual_sparse, Activation, CalibratedStack, Layer, LayerReport, LayerStack};
pub use simulator::{CsrWeights, ExecCounters};
pub use sparsity::{BitMask, SparsityConfig};
