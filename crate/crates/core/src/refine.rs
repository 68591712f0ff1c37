//! Block-level local refinement.
//!
//! After the linear layers of a block have been factorized, their factor
//! pairs and the two norm scales are jointly optimized to pull the
//! compressed block's outputs on shifted inputs back toward the original
//! block's outputs on original inputs. The reference outputs are computed
//! once and frozen; only the compressed block moves.

use crate::matrix::Matrix;
use crate::toyformer::{
    block_backward, block_forward, BlockError, BlockGrads, BlockParams, LayerId, LinearGrad,
    LinearLayer,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Optimizer and schedule settings for one refinement run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            base_lr: 1e-4,
            epochs: 25,
            batch_size: 32,
            warmup_fraction: 0.1,
            weight_decay: 0.0,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RefineError {
    NoFactorizedLayers,
    OriginalNotDense,
    NonFiniteLoss { epoch: usize },
    ShapeMismatch { context: &'static str },
    InvalidConfig(&'static str),
    Block(BlockError),
}

impl fmt::Display for RefineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefineError::NoFactorizedLayers => {
                write!(f, "compressed block has no factorized layers to refine")
            }
            RefineError::OriginalNotDense => {
                write!(f, "reference block must be fully dense")
            }
            RefineError::NonFiniteLoss { epoch } => {
                write!(f, "refinement diverged: non-finite loss in epoch {epoch}")
            }
            RefineError::ShapeMismatch { context } => write!(f, "shape mismatch in {context}"),
            RefineError::InvalidConfig(msg) => write!(f, "invalid refine config: {msg}"),
            RefineError::Block(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for RefineError {}

impl From<BlockError> for RefineError {
    fn from(e: BlockError) -> Self {
        RefineError::Block(e)
    }
}

/// Mean squared error over all entries, with the gradient wrt the second
/// argument: `d = 2 (y_comp - y_ref) / count`.
pub fn mse_block_loss(y_ref: &Matrix, y_comp: &Matrix) -> Result<(f64, Matrix), RefineError> {
    if y_ref.rows() != y_comp.rows() || y_ref.cols() != y_comp.cols() {
        return Err(RefineError::ShapeMismatch { context: "mse_block_loss" });
    }
    let count = (y_ref.rows() * y_ref.cols()) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(y_ref.rows(), y_ref.cols());
    for (i, (r, c)) in y_ref.data().iter().zip(y_comp.data()).enumerate() {
        let diff = c - r;
        loss += diff * diff;
        grad.data_mut()[i] = 2.0 * diff / count;
    }
    Ok((loss / count, grad))
}

/// Linear warmup to `base_lr` over `warmup_fraction * total_steps`, then
/// cosine decay to zero at `total_steps`. Continuous at the junction.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &RefineConfig) -> f64 {
    debug_assert!(total_steps >= 1);
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warmup = cfg.warmup_fraction * total;
    if step < warmup {
        cfg.base_lr * step / warmup
    } else if total > warmup {
        let progress = (step - warmup) / (total - warmup);
        cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    } else {
        cfg.base_lr
    }
}

/// First/second moment estimates for an aligned list of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(shapes: &[usize]) -> Self {
        OptimizerState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay Adam step over aligned parameter/gradient
/// tensors. Decay is applied multiplicatively before the moment step.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &RefineConfig,
) -> Result<(), RefineError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(RefineError::ShapeMismatch { context: "adamw_step tensor count" });
    }
    state.step += 1;
    let t = state.step as i32;
    let (beta1, beta2) = cfg.betas;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[idx].len() {
            return Err(RefineError::ShapeMismatch { context: "adamw_step tensor shape" });
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..p.len() {
            p[i] *= 1.0 - lr * cfg.weight_decay;
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Gathers the trainable tensors of a block in a fixed order: factor pairs
/// of factorized layers (U then V, layers in topological order), then the
/// two norm scales.
fn trainable_shapes(params: &BlockParams) -> Vec<usize> {
    let mut shapes = Vec::new();
    for id in LayerId::ALL {
        if let LinearLayer::Factorized(f) = params.layer(id) {
            shapes.push(f.u.rows() * f.u.cols());
            shapes.push(f.v.rows() * f.v.cols());
        }
    }
    shapes.push(params.norm1_scale.len());
    shapes.push(params.norm2_scale.len());
    shapes
}

fn gather_grads(params: &BlockParams, grads: &BlockGrads) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for id in LayerId::ALL {
        if params.layer(id).is_factorized() {
            match grads.layer(id) {
                LinearGrad::Factorized { du, dv } => {
                    out.push(du.data().to_vec());
                    out.push(dv.data().to_vec());
                }
                LinearGrad::Dense(_) => unreachable!("factorized layer produced dense grad"),
            }
        }
    }
    out.push(grads.norm1_scale.clone());
    out.push(grads.norm2_scale.clone());
    out
}

fn apply_update(
    params: &mut BlockParams,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &RefineConfig,
) -> Result<(), RefineError> {
    let BlockParams { wq, wk, wv, wo, wgate, wup, wdown, norm1_scale, norm2_scale, .. } = params;
    let layers = [wq, wk, wv, wo, wgate, wup, wdown];
    let mut slices: Vec<&mut [f64]> = Vec::new();
    for layer in layers {
        if let LinearLayer::Factorized(f) = layer {
            slices.push(f.u.data_mut());
            slices.push(f.v.data_mut());
        }
    }
    slices.push(norm1_scale.as_mut_slice());
    slices.push(norm2_scale.as_mut_slice());
    let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
    adamw_step(&mut slices, &grad_refs, state, lr, cfg)
}

/// Jointly optimizes the factor pairs and norm scales of `comp` so that
/// `comp(x_shifted)` approaches the frozen `orig(x)`.
///
/// Returns the refined parameters and the per-epoch mean loss. `orig` and
/// `comp` are left untouched; sequences are reshuffled each epoch from
/// `seed`.
pub fn refine_block(
    orig: &BlockParams,
    comp: &BlockParams,
    x: &Matrix,
    x_shifted: &Matrix,
    cfg: &RefineConfig,
    seed: u64,
) -> Result<(BlockParams, Vec<f64>), RefineError> {
    if orig.any_factorized() {
        return Err(RefineError::OriginalNotDense);
    }
    if !comp.any_factorized() {
        return Err(RefineError::NoFactorizedLayers);
    }
    if x.rows() != x_shifted.rows() || x.cols() != x_shifted.cols() {
        return Err(RefineError::ShapeMismatch { context: "calibration streams" });
    }
    let seq_len = orig.dims.seq_len;
    if x.cols() == 0 || x.cols() % seq_len != 0 {
        return Err(RefineError::ShapeMismatch { context: "columns vs seq_len" });
    }
    if cfg.base_lr < 0.0 {
        return Err(RefineError::InvalidConfig("base_lr must be non-negative"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(RefineError::InvalidConfig("epochs and batch_size must be >= 1"));
    }
    if !(0.0..1.0).contains(&cfg.warmup_fraction) {
        return Err(RefineError::InvalidConfig("warmup_fraction must be in [0, 1)"));
    }

    let (y_ref, _) = block_forward(orig, x)?;
    let n_seq = x.cols() / seq_len;
    let batches_per_epoch = n_seq.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;

    let mut refined = comp.clone();
    let mut state = OptimizerState::new(&trainable_shapes(&refined));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_seq).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut entry_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let cols: Vec<usize> = chunk
                .iter()
                .flat_map(|&s| s * seq_len..(s + 1) * seq_len)
                .collect();
            let xb = x_shifted.select_columns(&cols);
            let yb_ref = y_ref.select_columns(&cols);
            let (yb, cache) = block_forward(&refined, &xb)?;
            let (loss, d_y) = mse_block_loss(&yb_ref, &yb)?;
            if !loss.is_finite() {
                return Err(RefineError::NonFiniteLoss { epoch });
            }
            let entries = yb.rows() * yb.cols();
            loss_sum += loss * entries as f64;
            entry_count += entries;
            let grads = block_backward(&refined, &cache, &d_y)?;
            let gathered = gather_grads(&refined, &grads);
            let lr = lr_schedule(step, total_steps, cfg);
            apply_update(&mut refined, &gathered, &mut state, lr, cfg)?;
            step += 1;
        }
        trace.push(loss_sum / entry_count as f64);
    }
    Ok((refined, trace))
}
