//! Dense linear-algebra kernels: SPD factorization, symmetric
//! eigendecomposition, truncated SVD, and triangular/general inversion.
//!
//! Everything here is deterministic: fixed sweep orders, fixed sign
//! conventions, no randomized algorithms. Repeated calls on the same input
//! produce bit-identical results.

use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Singular values below `NOISE_FLOOR * sigma_1` are treated as zero for
/// rank decisions.
pub const NOISE_FLOOR: f64 = 1e-12;

/// Which decomposition produces the factor `R` with `S = R * R^T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorMethod {
    /// Lower-triangular Cholesky factor.
    Cholesky,
    /// `Q * Lambda^(1/2)` from the symmetric eigendecomposition.
    Evd,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinalgError {
    /// Input is not square or departs from symmetry beyond tolerance.
    NotSymmetric { asymmetry: f64 },
    /// Cholesky pivot or smallest eigenvalue was non-positive.
    NotPositiveDefinite { smallest: f64 },
    /// Requested truncation rank outside `[1, min(rows, cols)]`.
    RankOutOfRange { k: usize, max: usize },
    /// Factor is singular or too ill-conditioned to invert.
    SingularFactor { cond_estimate: f64 },
    InvalidArgument(&'static str),
}

impl fmt::Display for LinalgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinalgError::NotSymmetric { asymmetry } => {
                write!(f, "matrix is not symmetric (max |a_ij - a_ji| = {asymmetry:e})")
            }
            LinalgError::NotPositiveDefinite { smallest } => {
                write!(f, "matrix is not positive definite (smallest pivot/eigenvalue = {smallest:e})")
            }
            LinalgError::RankOutOfRange { k, max } => {
                write!(f, "rank {k} outside valid range [1, {max}]")
            }
            LinalgError::SingularFactor { cond_estimate } => {
                write!(f, "factor is numerically singular (condition estimate {cond_estimate:e})")
            }
            LinalgError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

impl std::error::Error for LinalgError {}

/// Rank-k truncation of a singular value decomposition.
///
/// `u_k` is m x k and `v_k` is n x k, both with orthonormal columns;
/// `sigma_k` is non-increasing and non-negative. `tail_energy` is the
/// squared Frobenius error of the rank-k reconstruction,
/// `sum_{i>k} sigma_i^2`.
#[derive(Debug, Clone)]
pub struct SvdTruncation {
    pub u_k: Matrix,
    pub sigma_k: Vec<f64>,
    pub v_k: Matrix,
    pub tail_energy: f64,
}

impl SvdTruncation {
    /// `U_k * diag(sigma_k) * V_k^T`.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.sigma_k.len();
        let mut us = self.u_k.clone();
        for i in 0..us.rows() {
            let row = us.row_mut(i);
            for (j, r) in row.iter_mut().enumerate().take(k) {
                *r *= self.sigma_k[j];
            }
        }
        us.matmul_nt(&self.v_k).expect("shape fixed by construction")
    }
}

fn require_square(s: &Matrix) -> Result<(), LinalgError> {
    if !s.is_square() {
        return Err(LinalgError::NotSymmetric { asymmetry: f64::INFINITY });
    }
    Ok(())
}

fn check_symmetry(s: &Matrix) -> Result<(), LinalgError> {
    require_square(s)?;
    let asym = s.asymmetry();
    if asym > 1e-10 * s.max_abs().max(1.0) {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in non-increasing order and the matching
/// orthonormal eigenvectors as columns of `Q`, so `S = Q * diag(l) * Q^T`.
/// Eigenvector signs are fixed so the largest-magnitude entry is positive.
pub fn symmetric_eigen(s: &Matrix) -> Result<(Vec<f64>, Matrix), LinalgError> {
    check_symmetry(s)?;
    let n = s.rows();
    let mut a = s.clone();
    a.symmetrize();
    let mut q = Matrix::identity(n);
    if n <= 1 {
        let vals = if n == 1 { vec![a.get(0, 0)] } else { vec![] };
        return Ok((vals, q));
    }

    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let tol = 1e-15 * scale;
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n - 1 {
            for r in p + 1..n {
                let apq = a.get(p, r);
                if apq.abs() <= tol {
                    continue;
                }
                rotated = true;
                let app = a.get(p, p);
                let aqq = a.get(r, r);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                // Rotate rows/columns p and r of A.
                for j in 0..n {
                    let ajp = a.get(j, p);
                    let ajq = a.get(j, r);
                    a.set(j, p, c * ajp - sn * ajq);
                    a.set(j, r, sn * ajp + c * ajq);
                }
                for j in 0..n {
                    let apj = a.get(p, j);
                    let aqj = a.get(r, j);
                    a.set(p, j, c * apj - sn * aqj);
                    a.set(r, j, sn * apj + c * aqj);
                }
                for j in 0..n {
                    let qjp = q.get(j, p);
                    let qjq = q.get(j, r);
                    q.set(j, p, c * qjp - sn * qjq);
                    q.set(j, r, sn * qjp + c * qjq);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(j, j).partial_cmp(&a.get(i, i)).expect("eigenvalues are finite")
    });
    let vals: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = q.col(src);
        fix_sign(&mut col);
        vecs.set_col(dst, &col);
    }
    Ok((vals, vecs))
}

/// Flips `v` so its largest-magnitude entry is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    let mut best_abs = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Factors a symmetric positive-definite `S` as `R * R^T`.
///
/// `Cholesky` yields the lower-triangular factor; `Evd` yields
/// `Q * Lambda^(1/2)`. Symmetry drift is averaged away before factoring;
/// definiteness failures are reported, never silently regularized.
pub fn factor_spd(s: &Matrix, method: FactorMethod) -> Result<Matrix, LinalgError> {
    check_symmetry(s)?;
    let mut sym = s.clone();
    sym.symmetrize();
    match method {
        FactorMethod::Cholesky => cholesky_lower(&sym),
        FactorMethod::Evd => {
            let (vals, q) = symmetric_eigen(&sym)?;
            let smallest = vals.last().copied().unwrap_or(0.0);
            if smallest <= 0.0 {
                return Err(LinalgError::NotPositiveDefinite { smallest });
            }
            let n = sym.rows();
            let mut r = q;
            for i in 0..n {
                let row = r.row_mut(i);
                for (j, x) in row.iter_mut().enumerate() {
                    *x *= vals[j].sqrt();
                }
            }
            Ok(r)
        }
    }
}

/// Factors `S + eps * I` as `R * R^T` for symmetric PSD `S`.
pub fn tikhonov_factor(s: &Matrix, eps: f64) -> Result<Matrix, LinalgError> {
    if !(eps > 0.0) {
        return Err(LinalgError::InvalidArgument("tikhonov eps must be positive"));
    }
    check_symmetry(s)?;
    let mut reg = s.clone();
    reg.symmetrize();
    reg.add_diag(eps);
    cholesky_lower(&reg)
}

fn cholesky_lower(s: &Matrix) -> Result<Matrix, LinalgError> {
    let n = s.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = s.get(j, j);
        for t in 0..j {
            d -= l.get(j, t) * l.get(j, t);
        }
        if d <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite { smallest: d });
        }
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut v = s.get(i, j);
            for t in 0..j {
                v -= l.get(i, t) * l.get(j, t);
            }
            l.set(i, j, v / ljj);
        }
    }
    Ok(l)
}

/// Gram-route SVD is used up to this dimension; one-sided Jacobi beyond.
const GRAM_DIM_LIMIT: usize = 64;

/// Best rank-k approximation by truncated SVD.
///
/// Dispatches on size: eigendecomposition of the Gram matrix when
/// `min(m, n) <= 64`, one-sided Jacobi otherwise.
pub fn truncated_svd(m: &Matrix, k: usize) -> Result<SvdTruncation, LinalgError> {
    let min_dim = m.rows().min(m.cols());
    if k == 0 || k > min_dim {
        return Err(LinalgError::RankOutOfRange { k, max: min_dim });
    }
    let (sigma, u_full, v_full) = if min_dim <= GRAM_DIM_LIMIT {
        svd_gram(m)
    } else {
        svd_one_sided_jacobi(m)
    };

    let frob_sq = m.frob_sq();
    let kept: f64 = sigma.iter().take(k).map(|s| s * s).sum();
    let tail_energy = (frob_sq - kept).max(0.0);

    let u_k = take_columns(&u_full, k);
    let v_k = take_columns(&v_full, k);
    let sigma_k = sigma[..k].to_vec();
    Ok(SvdTruncation { u_k, sigma_k, v_k, tail_energy })
}

fn take_columns(m: &Matrix, k: usize) -> Matrix {
    let idx: Vec<usize> = (0..k).collect();
    m.select_columns(&idx)
}

/// SVD via the Gram matrix: eigendecompose `M^T M` (or `M M^T` when the
/// matrix is wide) and recover the other factor by projection.
fn svd_gram(m: &Matrix) -> (Vec<f64>, Matrix, Matrix) {
    if m.rows() >= m.cols() {
        let gram = m.matmul_tn(m).expect("M^T M");
        let (vals, v) = symmetric_eigen(&gram).expect("gram matrix is symmetric");
        let sigma: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
        let u = left_vectors_from_right(m, &v, &sigma);
        (sigma, u, v)
    } else {
        let gram = m.matmul_nt(m).expect("M M^T");
        let (vals, u) = symmetric_eigen(&gram).expect("gram matrix is symmetric");
        let sigma: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
        let mt = m.transpose();
        let v = left_vectors_from_right(&mt, &u, &sigma);
        (sigma, u, v)
    }
}

/// Forms `u_i = M v_i / sigma_i` and re-orthonormalizes, completing
/// deficient directions from the canonical basis so the returned columns
/// are orthonormal even past the numerical rank.
fn left_vectors_from_right(m: &Matrix, v: &Matrix, sigma: &[f64]) -> Matrix {
    let rows = m.rows();
    let count = sigma.len().min(rows);
    let floor = sigma.first().copied().unwrap_or(0.0) * NOISE_FLOOR;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(count);
    for (i, &s) in sigma.iter().enumerate().take(count) {
        if s > floor && s > 0.0 {
            let vi = v.col(i);
            let mut ui = vec![0.0; rows];
            for r in 0..rows {
                let row = m.row(r);
                let mut acc = 0.0;
                for (a, b) in row.iter().zip(&vi) {
                    acc += a * b;
                }
                ui[r] = acc / s;
            }
            cols.push(ui);
        } else {
            cols.push(vec![0.0; rows]); // placeholder, filled by completion
        }
    }
    orthonormalize_with_completion(cols, rows)
}

/// Modified Gram-Schmidt (two passes) over the given columns; columns that
/// collapse are replaced by the first canonical basis vector with a
/// non-negligible residual against the accepted set.
fn orthonormalize_with_completion(cols: Vec<Vec<f64>>, rows: usize) -> Matrix {
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    for mut c in cols {
        let ok = mgs_normalize(&mut c, &accepted);
        if ok {
            accepted.push(c);
        } else {
            let mut done = false;
            for t in 0..rows {
                let mut e = vec![0.0; rows];
                e[t] = 1.0;
                if mgs_normalize(&mut e, &accepted) {
                    accepted.push(e);
                    done = true;
                    break;
                }
            }
            assert!(done, "orthonormal completion exhausted the canonical basis");
        }
    }
    let k = accepted.len();
    let mut out = Matrix::zeros(rows, k);
    for (j, c) in accepted.iter().enumerate() {
        out.set_col(j, c);
    }
    out
}

/// Projects out `basis` (twice), normalizes. Returns false when the
/// residual is too small to trust.
fn mgs_normalize(c: &mut [f64], basis: &[Vec<f64>]) -> bool {
    for _ in 0..2 {
        for b in basis {
            let dot: f64 = c.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in c.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
    }
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-6 {
        return false;
    }
    for x in c.iter_mut() {
        *x /= norm;
    }
    true
}

/// One-sided Jacobi SVD: orthogonalizes column pairs of the tall operand,
/// accumulating rotations into `V`. Fixed cyclic sweep order.
fn svd_one_sided_jacobi(m: &Matrix) -> (Vec<f64>, Matrix, Matrix) {
    let transposed = m.rows() < m.cols();
    let mut a = if transposed { m.transpose() } else { m.clone() };
    let rows = a.rows();
    let cols = a.cols();
    let mut v = Matrix::identity(cols);

    let tol = 1e-15;
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for r in 0..rows {
                    let ap = a.get(r, p);
                    let aq = a.get(r, q);
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let ap = a.get(r, p);
                    let aq = a.get(r, q);
                    a.set(r, p, c * ap - s * aq);
                    a.set(r, q, s * ap + c * aq);
                }
                for r in 0..cols {
                    let vp = v.get(r, p);
                    let vq = v.get(r, q);
                    v.set(r, p, c * vp - s * vq);
                    v.set(r, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|r| a.get(r, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("norms are finite"));
    norms = order.iter().map(|&i| norms[i]).collect();

    let floor = norms.first().copied().unwrap_or(0.0) * NOISE_FLOOR;
    let mut left_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut right = Matrix::zeros(cols, cols);
    for (dst, &src) in order.iter().enumerate() {
        let mut vcol = v.col(src);
        let mut acol = a.col(src);
        // Joint sign flip keeps U * diag(sigma) * V^T unchanged.
        let mut probe = vcol.clone();
        fix_sign(&mut probe);
        if probe.iter().zip(&vcol).any(|(a, b)| a != b) {
            for x in vcol.iter_mut() {
                *x = -*x;
            }
            for x in acol.iter_mut() {
                *x = -*x;
            }
        }
        right.set_col(dst, &vcol);
        if norms[dst] > floor && norms[dst] > 0.0 {
            for x in acol.iter_mut() {
                *x /= norms[dst];
            }
            left_cols.push(acol);
        } else {
            left_cols.push(vec![0.0; rows]);
        }
    }
    let left = orthonormalize_with_completion(left_cols, rows);

    if transposed {
        (norms, right, left)
    } else {
        (norms, left, right)
    }
}

/// Inverts an invertible factor `R`; triangular inputs use substitution,
/// general inputs Gauss-Jordan with partial pivoting.
pub fn invert_factor(r: &Matrix) -> Result<Matrix, LinalgError> {
    if !r.is_square() {
        return Err(LinalgError::InvalidArgument("invert_factor requires a square matrix"));
    }
    let n = r.rows();
    let inv = if is_lower_triangular(r) {
        invert_lower_triangular(r)?
    } else if is_upper_triangular(r) {
        invert_lower_triangular(&r.transpose())?.transpose()
    } else {
        gauss_jordan_inverse(r)?
    };
    let cond_estimate = if n == 0 { 1.0 } else { r.frob_norm() * inv.frob_norm() / n as f64 };
    if !cond_estimate.is_finite() || cond_estimate > 1e12 {
        return Err(LinalgError::SingularFactor { cond_estimate });
    }
    Ok(inv)
}

fn is_lower_triangular(r: &Matrix) -> bool {
    for i in 0..r.rows() {
        for j in i + 1..r.cols() {
            if r.get(i, j) != 0.0 {
                return false;
            }
        }
    }
    true
}

fn is_upper_triangular(r: &Matrix) -> bool {
    for i in 0..r.rows() {
        for j in 0..i {
            if r.get(i, j) != 0.0 {
                return false;
            }
        }
    }
    true
}

fn invert_lower_triangular(l: &Matrix) -> Result<Matrix, LinalgError> {
    let n = l.rows();
    let mut inv = Matrix::zeros(n, n);
    for j in 0..n {
        // Solve L x = e_j by forward substitution.
        for i in j..n {
            let mut v = if i == j { 1.0 } else { 0.0 };
            for t in j..i {
                v -= l.get(i, t) * inv.get(t, j);
            }
            let d = l.get(i, i);
            if d == 0.0 {
                return Err(LinalgError::SingularFactor { cond_estimate: f64::INFINITY });
            }
            inv.set(i, j, v / d);
        }
    }
    Ok(inv)
}

fn gauss_jordan_inverse(r: &Matrix) -> Result<Matrix, LinalgError> {
    let n = r.rows();
    let mut a = r.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let mut pivot = col;
        let mut best = a.get(col, col).abs();
        for i in col + 1..n {
            let v = a.get(i, col).abs();
            if v > best {
                best = v;
                pivot = i;
            }
        }
        if best == 0.0 {
            return Err(LinalgError::SingularFactor { cond_estimate: f64::INFINITY });
        }
        if pivot != col {
            for j in 0..n {
                let tmp = a.get(col, j);
                a.set(col, j, a.get(pivot, j));
                a.set(pivot, j, tmp);
                let tmp = inv.get(col, j);
                inv.set(col, j, inv.get(pivot, j));
                inv.set(pivot, j, tmp);
            }
        }
        let d = a.get(col, col);
        for j in 0..n {
            a.set(col, j, a.get(col, j) / d);
            inv.set(col, j, inv.get(col, j) / d);
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = a.get(i, col);
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a.set(i, j, a.get(i, j) - f * a.get(col, j));
                inv.set(i, j, inv.get(i, j) - f * inv.get(col, j));
            }
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn seeded_spd(n: usize, seed: u64) -> Matrix {
        let z = seeded_matrix(n, n, seed);
        let mut s = z.matmul_tn(&z).unwrap();
        s.add_diag(1.0);
        s
    }

    #[test]
    fn factor_spd_identity_cholesky() {
        let r = factor_spd(&Matrix::identity(3), FactorMethod::Cholesky).unwrap();
        assert_eq!(r, Matrix::identity(3));
    }

    #[test]
    fn factor_spd_diagonal_square_roots() {
        let s = Matrix::from_diag(&[4.0, 9.0]);
        let r = factor_spd(&s, FactorMethod::Cholesky).unwrap();
        assert_eq!(r, Matrix::from_diag(&[2.0, 3.0]));
    }

    #[test]
    fn factor_spd_reconstructs_both_methods() {
        let s = seeded_spd(5, 17);
        for method in [FactorMethod::Cholesky, FactorMethod::Evd] {
            let r = factor_spd(&s, method).unwrap();
            let rec = r.matmul_nt(&r).unwrap();
            let err = rec.sub(&s).unwrap().frob_norm();
            assert!(err <= 1e-10 * s.frob_norm(), "method {method:?} residual {err:e}");
        }
    }

    #[test]
    fn factor_spd_rejects_asymmetric() {
        let mut s = Matrix::identity(3);
        s.set(0, 1, 0.5);
        match factor_spd(&s, FactorMethod::Cholesky) {
            Err(LinalgError::NotSymmetric { .. }) => {}
            other => panic!("expected NotSymmetric, got {other:?}"),
        }
    }

    #[test]
    fn factor_spd_reports_indefinite() {
        let s = Matrix::from_diag(&[1.0, -2.0]);
        for method in [FactorMethod::Cholesky, FactorMethod::Evd] {
            match factor_spd(&s, method) {
                Err(LinalgError::NotPositiveDefinite { smallest }) => {
                    assert!(smallest <= -1.9, "reported {smallest}");
                }
                other => panic!("expected NotPositiveDefinite, got {other:?}"),
            }
        }
    }

    #[test]
    fn tikhonov_regularizer_only() {
        let r = tikhonov_factor(&Matrix::zeros(2, 2), 1.0).unwrap();
        assert_eq!(r, Matrix::identity(2));
    }

    #[test]
    fn tikhonov_scaled_identity() {
        let r = tikhonov_factor(&Matrix::identity(2), 3.0).unwrap();
        assert_eq!(r, Matrix::from_diag(&[2.0, 2.0]));
    }

    #[test]
    fn tikhonov_rank_deficient_exact() {
        let s = Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let eps = 1e-6;
        let r = tikhonov_factor(&s, eps).unwrap();
        let mut expected = s.clone();
        expected.add_diag(eps);
        let rec = r.matmul_nt(&r).unwrap();
        assert!(rec.sub(&expected).unwrap().max_abs() <= 1e-12);
        assert!(invert_factor(&r).is_ok());
    }

    #[test]
    fn tikhonov_converges_to_base_as_eps_shrinks() {
        let s = seeded_spd(4, 3);
        let mut prev = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-6, 1e-8] {
            let r = tikhonov_factor(&s, eps).unwrap();
            let err = r.matmul_nt(&r).unwrap().sub(&s).unwrap().frob_norm();
            assert!(err <= prev + 1e-12);
            prev = err;
        }
        assert!(prev <= 1e-7 * s.frob_norm());
    }

    #[test]
    fn truncated_svd_diagonal() {
        let m = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let t = truncated_svd(&m, 2).unwrap();
        assert!((t.sigma_k[0] - 3.0).abs() < 1e-12);
        assert!((t.sigma_k[1] - 2.0).abs() < 1e-12);
        assert!((t.tail_energy - 1.0).abs() < 1e-10);
    }

    #[test]
    fn truncated_svd_full_rank_exact() {
        let m = seeded_matrix(6, 4, 5);
        let t = truncated_svd(&m, 4).unwrap();
        assert!(t.tail_energy <= 1e-10 * m.frob_sq().max(1.0));
        let err = t.reconstruct().sub(&m).unwrap().frob_norm();
        assert!(err <= 1e-10 * m.frob_norm().max(1.0));
    }

    #[test]
    fn truncated_svd_orthonormal_factors() {
        for seed in [1u64, 2, 3] {
            let m = seeded_matrix(6, 4, seed);
            let t = truncated_svd(&m, 2).unwrap();
            let utu = t.u_k.matmul_tn(&t.u_k).unwrap();
            let vtv = t.v_k.matmul_tn(&t.v_k).unwrap();
            assert!(utu.sub(&Matrix::identity(2)).unwrap().max_abs() <= 1e-8);
            assert!(vtv.sub(&Matrix::identity(2)).unwrap().max_abs() <= 1e-8);
        }
    }

    #[test]
    fn truncated_svd_residual_matches_tail() {
        let m = seeded_matrix(7, 5, 11);
        for k in 1..=5 {
            let t = truncated_svd(&m, k).unwrap();
            let resid = t.reconstruct().sub(&m).unwrap().frob_sq();
            assert!(
                (resid - t.tail_energy).abs() <= 1e-8 * m.frob_sq(),
                "k={k} resid={resid} tail={}",
                t.tail_energy
            );
        }
    }

    #[test]
    fn truncated_svd_bit_stable() {
        let m = seeded_matrix(6, 6, 23);
        let a = truncated_svd(&m, 3).unwrap();
        let b = truncated_svd(&m, 3).unwrap();
        assert_eq!(a.u_k.data(), b.u_k.data());
        assert_eq!(a.v_k.data(), b.v_k.data());
        assert_eq!(a.sigma_k, b.sigma_k);
    }

    #[test]
    fn truncated_svd_rejects_bad_rank() {
        let m = seeded_matrix(4, 3, 1);
        assert!(matches!(truncated_svd(&m, 0), Err(LinalgError::RankOutOfRange { .. })));
        assert!(matches!(truncated_svd(&m, 4), Err(LinalgError::RankOutOfRange { .. })));
    }

    #[test]
    fn jacobi_path_matches_gram_path() {
        // 70 columns forces the one-sided Jacobi route; compare against the
        // Gram route applied to the same matrix through a thin disguise.
        let m = seeded_matrix(80, 70, 9);
        let t = truncated_svd(&m, 5).unwrap();
        let gram = m.matmul_tn(&m).unwrap();
        let (vals, _) = symmetric_eigen(&gram).unwrap();
        for i in 0..5 {
            let sigma_ref = vals[i].max(0.0).sqrt();
            assert!(
                (t.sigma_k[i] - sigma_ref).abs() <= 1e-8 * vals[0].sqrt().max(1.0),
                "sigma {i}: jacobi {} vs gram {}",
                t.sigma_k[i],
                sigma_ref
            );
        }
        let utu = t.u_k.matmul_tn(&t.u_k).unwrap();
        assert!(utu.sub(&Matrix::identity(5)).unwrap().max_abs() <= 1e-8);
    }

    #[test]
    fn eckart_young_beats_random_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let m = seeded_matrix(6, 5, 42);
        let k = 2;
        let t = truncated_svd(&m, k).unwrap();
        for _ in 0..100 {
            let left = Matrix::from_fn(6, k, |_, _| rng.gen_range(-1.0..1.0));
            let right = Matrix::from_fn(k, 5, |_, _| rng.gen_range(-1.0..1.0));
            let probe = left.matmul(&right).unwrap();
            let err = probe.sub(&m).unwrap().frob_sq();
            assert!(t.tail_energy < err, "probe beat the truncation: {err} < {}", t.tail_energy);
        }
    }

    #[test]
    fn invert_scaled_identity() {
        let r = Matrix::from_diag(&[2.0, 2.0, 2.0]);
        let inv = invert_factor(&r).unwrap();
        assert!(inv.sub(&Matrix::from_diag(&[0.5, 0.5, 0.5])).unwrap().max_abs() <= 1e-15);
    }

    #[test]
    fn invert_lower_triangular_by_hand() {
        let r = Matrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let inv = invert_factor(&r).unwrap();
        let expected = Matrix::from_vec(2, 2, vec![1.0, 0.0, -1.0, 1.0]).unwrap();
        assert!(inv.sub(&expected).unwrap().max_abs() <= 1e-15);
    }

    #[test]
    fn invert_general_residual() {
        let mut r = seeded_matrix(5, 5, 31);
        r.add_diag(3.0); // keep it comfortably nonsingular
        let inv = invert_factor(&r).unwrap();
        let resid = r.matmul(&inv).unwrap().sub(&Matrix::identity(5)).unwrap().frob_norm();
        assert!(resid <= 1e-8, "residual {resid:e}");
    }

    #[test]
    fn invert_rejects_singular() {
        let r = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(invert_factor(&r), Err(LinalgError::SingularFactor { .. })));
    }
}
