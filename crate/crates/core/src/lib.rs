//! Anchored-adaptive SVD compression of transformer blocks.
//!
//! The toolkit compresses a small self-contained transformer stack layer
//! by layer in closed form — whitened low-rank regression against four
//! selectable objectives — then refines each block end-to-end with
//! gradient descent, and reports exact error-evolution and parameter
//! accounting.
//!
//! Module map:
//! - [`matrix`]: dense row-major `f64` matrices.
//! - [`linalg`]: SPD factorization, symmetric eigen, truncated SVD.
//! - [`covariance`]: streaming `A B^T` / `B B^T` / `A A^T` statistics.
//! - [`layerwise`]: the closed-form rank-k solvers and rank arithmetic.
//! - [`toyformer`]: the transformer block, forward and backward.
//! - [`refine`]: AdamW block-level refinement.
//! - [`pipeline`]: sequential model compression and the model container.
//! - [`metrics`]: error evolution, accounting, report emission.

pub mod container;
pub mod covariance;
pub mod layerwise;
pub mod linalg;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod seed;
pub mod toyformer;

pub use container::{Container, ContainerError};
pub use covariance::{CovarianceAccumulator, CovarianceError, CovarianceSet};
pub use layerwise::{
    compress_layer, compress_layer_variant, objective_error, objective_error_cov,
    rank_from_ratio, theorem1_optimum, FactorizedLinear, LayerwiseError, Objective, RatioPolicy,
};
pub use linalg::{
    factor_spd, invert_factor, symmetric_eigen, tikhonov_factor, truncated_svd, FactorMethod,
    LinalgError, SvdTruncation,
};
pub use matrix::{DimensionMismatch, Matrix};
pub use metrics::{
    accounting, cosine_distance, error_evolution, mse, BlockRecord, CompressionReport,
    DominanceAudit, EvolutionRow, LayerRecord, Site, Totals,
};
pub use pipeline::{
    compress_model, generate_calibration, load_model, save_model, CalibrationSet, ModelConfig,
    PipelineError, RunConfig, ToyModel,
};
pub use refine::{adamw_step, lr_schedule, mse_block_loss, refine_block, OptimizerState, RefineConfig, RefineError};
pub use seed::derive_seed;
pub use toyformer::{
    block_backward, block_forward, init_block, replace_linear, BlockDims, BlockError, BlockGrads,
    BlockParams, ForwardCache, LayerId, LinearGrad, LinearLayer,
};
