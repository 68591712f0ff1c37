//! Closed-form layer compression.
//!
//! A weight `W` acting on original inputs `A` and shifted inputs `B` is
//! replaced by the rank-k matrix minimizing `||W A - W' B||_F^2`: whiten
//! `B` through a factor of `B B^T`, project the cross term into the
//! whitened space, truncate by SVD, and map back. The four objective
//! variants differ only in which streams play `A` and `B`.

use crate::covariance::{CovarianceAccumulator, CovarianceError, CovarianceSet};
use crate::linalg::{self, FactorMethod, LinalgError, NOISE_FLOOR};
use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Which discrepancy a layer solution minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `||W - W'||`: no activation data at all.
    InputAgnostic,
    /// `||W X - W' X||`: original inputs on both sides.
    InputAware,
    /// `||W X' - W' X'||`: shifted inputs on both sides.
    ShiftAware,
    /// `||W X - W' X'||`: original target, shifted conditioning.
    Anchored,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::InputAgnostic,
        Objective::InputAware,
        Objective::ShiftAware,
        Objective::Anchored,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Objective::InputAgnostic => "input_agnostic",
            Objective::InputAware => "input_aware",
            Objective::ShiftAware => "shift_aware",
            Objective::Anchored => "anchored",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Target retained-parameter fraction and the storage regime it assumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPolicy {
    /// Retained fraction, in (0, 1].
    pub target_ratio: f64,
    /// Mixed-precision remapping regime: rank is `ratio * min(m, n)`
    /// instead of the standard `ratio * mn / (m + n)`.
    #[serde(default)]
    pub remap: bool,
}

/// A compressed linear layer `W' = U V^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedLinear {
    /// m x k.
    pub u: Matrix,
    /// n x k.
    pub v: Matrix,
    pub rank: usize,
    pub objective_used: Objective,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl FactorizedLinear {
    pub fn new(u: Matrix, v: Matrix, objective_used: Objective) -> Self {
        assert_eq!(u.cols(), v.cols(), "factor ranks must agree");
        FactorizedLinear {
            rank: u.cols(),
            in_dim: v.rows(),
            out_dim: u.rows(),
            u,
            v,
            objective_used,
        }
    }

    /// `k * (m + n)`.
    pub fn parameter_count(&self) -> usize {
        self.rank * (self.out_dim + self.in_dim)
    }

    /// Materializes `U V^T`. Used by reports and tests, never by the
    /// forward path.
    pub fn to_dense(&self) -> Matrix {
        self.u.matmul_nt(&self.v).expect("factor shapes agree")
    }

    /// `U (V^T x)`: two thin products.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix, LayerwiseError> {
        let vtx = self.v.matmul_tn(x).map_err(|_| LayerwiseError::DimensionMismatch {
            context: "factorized apply",
        })?;
        Ok(self.u.matmul(&vtx).expect("rank agrees"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerwiseError {
    /// `B B^T` is not positive definite and no regularization was requested.
    SingularCovariance { detail: String },
    RankOutOfRange { k: usize, max: usize },
    DimensionMismatch { context: &'static str },
    Linalg(LinalgError),
    Covariance(CovarianceError),
}

impl fmt::Display for LayerwiseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerwiseError::SingularCovariance { detail } => {
                write!(f, "covariance S = B B^T is singular: {detail}")
            }
            LayerwiseError::RankOutOfRange { k, max } => {
                write!(f, "rank {k} outside valid range [1, {max}]")
            }
            LayerwiseError::DimensionMismatch { context } => {
                write!(f, "dimension mismatch in {context}")
            }
            LayerwiseError::Linalg(e) => write!(f, "{e}"),
            LayerwiseError::Covariance(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LayerwiseError {}

impl From<CovarianceError> for LayerwiseError {
    fn from(e: CovarianceError) -> Self {
        LayerwiseError::Covariance(e)
    }
}

/// Truncation rank implied by a ratio policy for an `m x n` layer.
///
/// Standard regime: `k = floor(ratio * m n / (m + n))`. Remap regime:
/// `k = floor(ratio * min(m, n))`. Both clamp to `[1, min(m, n)]`.
pub fn rank_from_ratio(m: usize, n: usize, policy: &RatioPolicy) -> usize {
    let min_dim = m.min(n);
    let raw = if policy.remap {
        policy.target_ratio * min_dim as f64
    } else {
        policy.target_ratio * (m as f64 * n as f64) / (m as f64 + n as f64)
    };
    (raw.floor() as usize).clamp(1, min_dim)
}

/// Default Tikhonov strength when `S` fails to be positive definite:
/// scale-relative to the mean diagonal mass.
pub fn default_tikhonov_eps(s: &Matrix) -> f64 {
    let n = s.rows().max(1) as f64;
    let scaled = 1e-6 * s.trace() / n;
    if scaled > 0.0 {
        scaled
    } else {
        1e-12
    }
}

/// Closed-form rank-k minimizer of `||W A - W' B||_F^2` from covariance
/// statistics alone.
///
/// Requires `cov.s` positive definite; callers facing a singular `S` must
/// pass a Tikhonov-regularized set explicitly.
pub fn compress_layer(
    w: &Matrix,
    cov: &CovarianceSet,
    k: usize,
    method: FactorMethod,
) -> Result<FactorizedLinear, LayerwiseError> {
    compress_layer_tagged(w, cov, k, method, Objective::Anchored)
}

fn compress_layer_tagged(
    w: &Matrix,
    cov: &CovarianceSet,
    k: usize,
    method: FactorMethod,
    tag: Objective,
) -> Result<FactorizedLinear, LayerwiseError> {
    let (m, n) = (w.rows(), w.cols());
    if cov.dim() != n {
        return Err(LayerwiseError::DimensionMismatch { context: "covariance dim vs layer input" });
    }
    let min_dim = m.min(n);
    if k == 0 || k > min_dim {
        return Err(LayerwiseError::RankOutOfRange { k, max: min_dim });
    }

    let r = match linalg::factor_spd(&cov.s, method) {
        Ok(r) => r,
        Err(LinalgError::NotPositiveDefinite { smallest }) => {
            return Err(LayerwiseError::SingularCovariance {
                detail: format!("smallest pivot/eigenvalue {smallest:e}"),
            })
        }
        Err(e) => return Err(LayerwiseError::Linalg(e)),
    };
    let r_inv = match linalg::invert_factor(&r) {
        Ok(inv) => inv,
        Err(LinalgError::SingularFactor { cond_estimate }) => {
            return Err(LayerwiseError::SingularCovariance {
                detail: format!("factor condition estimate {cond_estimate:e}"),
            })
        }
        Err(e) => return Err(LayerwiseError::Linalg(e)),
    };
    let r_inv_t = r_inv.transpose();

    // M = W C S^{-1} R = W C R^{-T}.
    let proj = cov.c.matmul(&r_inv_t).expect("square");
    let m_mat = w.matmul(&proj).map_err(|_| LayerwiseError::DimensionMismatch {
        context: "W * C",
    })?;
    let svd = linalg::truncated_svd(&m_mat, k).map_err(LayerwiseError::Linalg)?;

    // U = U_k diag(sigma), V = R^{-T} V_k, so W' = U V^T = SVD_k(M) R^{-1}.
    let mut u = svd.u_k;
    for i in 0..u.rows() {
        let row = u.row_mut(i);
        for (j, x) in row.iter_mut().enumerate() {
            *x *= svd.sigma_k[j];
        }
    }
    let v = r_inv_t.matmul(&svd.v_k).expect("square times n x k");
    Ok(FactorizedLinear::new(u, v, tag))
}

/// Whether the truncation sits on a (near-)degenerate singular value tie
/// `sigma_k == sigma_{k+1}`; uniqueness of the minimizer fails there.
pub fn truncation_is_degenerate(w: &Matrix, cov: &CovarianceSet, k: usize, method: FactorMethod) -> bool {
    let sigmas = match solution_spectrum(w, cov, method) {
        Ok(s) => s,
        Err(_) => return false,
    };
    spectrum_tie(&sigmas, k)
}

pub(crate) fn spectrum_tie(sigmas: &[f64], k: usize) -> bool {
    if k >= sigmas.len() {
        return false;
    }
    let scale = sigmas.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    (sigmas[k - 1] - sigmas[k]).abs() <= NOISE_FLOOR * scale
}

/// Full singular spectrum of the whitened projection `M`.
pub fn solution_spectrum(
    w: &Matrix,
    cov: &CovarianceSet,
    method: FactorMethod,
) -> Result<Vec<f64>, LayerwiseError> {
    let r = linalg::factor_spd(&cov.s, method).map_err(LayerwiseError::Linalg)?;
    let r_inv = linalg::invert_factor(&r).map_err(LayerwiseError::Linalg)?;
    let proj = cov.c.matmul(&r_inv.transpose()).expect("square");
    let m_mat = w.matmul(&proj).map_err(|_| LayerwiseError::DimensionMismatch {
        context: "W * C",
    })?;
    let full = m_mat.rows().min(m_mat.cols());
    let svd = linalg::truncated_svd(&m_mat, full).map_err(LayerwiseError::Linalg)?;
    Ok(svd.sigma_k)
}

/// Dispatches one of the four objectives on raw activation streams.
///
/// Covariances are accumulated internally; if `S` fails to be positive
/// definite the scale-relative Tikhonov default is applied.
pub fn compress_layer_variant(
    w: &Matrix,
    x: &Matrix,
    x_shifted: &Matrix,
    k: usize,
    objective: Objective,
    method: FactorMethod,
) -> Result<FactorizedLinear, LayerwiseError> {
    if x.rows() != w.cols() || x_shifted.rows() != w.cols() || x.cols() != x_shifted.cols() {
        return Err(LayerwiseError::DimensionMismatch { context: "activation streams" });
    }
    match objective {
        Objective::InputAgnostic => {
            let min_dim = w.rows().min(w.cols());
            if k == 0 || k > min_dim {
                return Err(LayerwiseError::RankOutOfRange { k, max: min_dim });
            }
            let svd = linalg::truncated_svd(w, k).map_err(LayerwiseError::Linalg)?;
            let mut u = svd.u_k;
            for i in 0..u.rows() {
                let row = u.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    *v *= svd.sigma_k[j];
                }
            }
            Ok(FactorizedLinear::new(u, svd.v_k, Objective::InputAgnostic))
        }
        Objective::InputAware => {
            let cov = streams_to_cov(x, x)?;
            compress_with_fallback(w, &cov, k, method, Objective::InputAware)
        }
        Objective::ShiftAware => {
            let cov = streams_to_cov(x_shifted, x_shifted)?;
            compress_with_fallback(w, &cov, k, method, Objective::ShiftAware)
        }
        Objective::Anchored => {
            let cov = streams_to_cov(x, x_shifted)?;
            compress_with_fallback(w, &cov, k, method, Objective::Anchored)
        }
    }
}

fn streams_to_cov(a: &Matrix, b: &Matrix) -> Result<CovarianceSet, LayerwiseError> {
    let mut acc = CovarianceAccumulator::new(a.rows());
    acc.accumulate(a, b)?;
    Ok(acc.finalize()?)
}

/// Strict solve, falling back to the default Tikhonov regularization when
/// `S` is singular.
pub fn compress_with_fallback(
    w: &Matrix,
    cov: &CovarianceSet,
    k: usize,
    method: FactorMethod,
    tag: Objective,
) -> Result<FactorizedLinear, LayerwiseError> {
    match compress_layer_tagged(w, cov, k, method, tag) {
        Err(LayerwiseError::SingularCovariance { .. }) => {
            let reg = cov.tikhonov_regularized(default_tikhonov_eps(&cov.s));
            compress_layer_tagged(w, &reg, k, method, tag)
        }
        other => other,
    }
}

/// `||W A - U V^T B||_F^2` from raw activation matrices.
pub fn objective_error(
    w: &Matrix,
    f: &FactorizedLinear,
    a: &Matrix,
    b: &Matrix,
) -> Result<f64, LayerwiseError> {
    if w.cols() != a.rows() || f.in_dim != b.rows() || a.cols() != b.cols() || w.rows() != f.out_dim {
        return Err(LayerwiseError::DimensionMismatch { context: "objective_error" });
    }
    let target = w.matmul(a).expect("checked");
    let approx = f.apply(b)?;
    Ok(target.sub(&approx).expect("same shape").frob_sq())
}

/// Same objective value computed from covariance statistics via the trace
/// expansion: `tr(W' S W'^T) - 2 tr(W C W'^T) + tr(W G W^T)`.
pub fn objective_error_cov(
    w: &Matrix,
    f: &FactorizedLinear,
    cov: &CovarianceSet,
) -> Result<f64, LayerwiseError> {
    if w.cols() != cov.dim() || f.in_dim != cov.dim() || w.rows() != f.out_dim {
        return Err(LayerwiseError::DimensionMismatch { context: "objective_error_cov" });
    }
    // tr(W' S W'^T) = tr((U^T U) (V^T S V)), all k x k.
    let utu = f.u.matmul_tn(&f.u).expect("k x k");
    let sv = cov.s.matmul(&f.v).expect("n x k");
    let vsv = f.v.matmul_tn(&sv).expect("k x k");
    let term_quad = trace_product(&utu, &vsv);
    // tr(W C W'^T) = tr(U^T W C V).
    let cv = cov.c.matmul(&f.v).expect("n x k");
    let wcv = w.matmul(&cv).expect("m x k");
    let term_cross = trace_product_tn(&f.u, &wcv);
    let term_ref = weighted_energy(w, &cov.g);
    Ok(term_quad - 2.0 * term_cross + term_ref)
}

/// `tr(A B)` for square same-size `A`, `B`.
fn trace_product(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += a.get(i, j) * b.get(j, i);
        }
    }
    acc
}

/// `tr(A^T B)` = elementwise dot.
fn trace_product_tn(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `tr(W G W^T) = ||W A||_F^2`.
fn weighted_energy(w: &Matrix, g: &Matrix) -> f64 {
    let wg = w.matmul(g).expect("m x n");
    trace_product_tn(&wg, w)
}

/// The attainable minimum of the rank-k objective:
/// `tr(W G W^T) - sum_{i<=k} sigma_i(M)^2`.
pub fn theorem1_optimum(
    w: &Matrix,
    cov: &CovarianceSet,
    k: usize,
    method: FactorMethod,
) -> Result<f64, LayerwiseError> {
    let min_dim = w.rows().min(w.cols());
    if k == 0 || k > min_dim {
        return Err(LayerwiseError::RankOutOfRange { k, max: min_dim });
    }
    let sigmas = match solution_spectrum(w, cov, method) {
        Ok(s) => s,
        Err(LayerwiseError::Linalg(LinalgError::NotPositiveDefinite { smallest })) => {
            return Err(LayerwiseError::SingularCovariance {
                detail: format!("smallest pivot/eigenvalue {smallest:e}"),
            })
        }
        Err(e) => return Err(e),
    };
    let kept: f64 = sigmas.iter().take(k).map(|s| s * s).sum();
    Ok(weighted_energy(w, &cov.g) - kept)
}
