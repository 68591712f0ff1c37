//! Streaming accumulation of calibration sufficient statistics.
//!
//! Layer compression needs only `C = A B^T`, `S = B B^T`, and `G = A A^T`,
//! so calibration batches are folded into fixed-size accumulators and the
//! raw activations are never retained. Cost is independent of the number
//! of calibration columns.

use crate::matrix::Matrix;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CovarianceError {
    DimensionMismatch { context: &'static str, expected: usize, got: usize },
    EmptyAccumulator,
}

impl fmt::Display for CovarianceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovarianceError::DimensionMismatch { context, expected, got } => {
                write!(f, "dimension mismatch in {context}: expected {expected}, got {got}")
            }
            CovarianceError::EmptyAccumulator => write!(f, "accumulator has seen no columns"),
        }
    }
}

impl std::error::Error for CovarianceError {}

/// Running sums `C = A B^T`, `S = B B^T`, `G = A A^T` over column batches.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    dim: usize,
    c: Matrix,
    s: Matrix,
    g: Matrix,
    columns_seen: usize,
}

/// Finalized statistics handed to the compression solvers.
///
/// `s` and `g` are exactly symmetric (finalize averages rounding drift).
#[derive(Debug, Clone)]
pub struct CovarianceSet {
    pub c: Matrix,
    pub s: Matrix,
    pub g: Matrix,
    pub columns: usize,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        CovarianceAccumulator {
            dim,
            c: Matrix::zeros(dim, dim),
            s: Matrix::zeros(dim, dim),
            g: Matrix::zeros(dim, dim),
            columns_seen: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn columns_seen(&self) -> usize {
        self.columns_seen
    }

    /// Folds one aligned batch pair into the running sums. Column `i` of
    /// `a_batch` and of `b_batch` must come from the same calibration token.
    pub fn accumulate(&mut self, a_batch: &Matrix, b_batch: &Matrix) -> Result<(), CovarianceError> {
        if a_batch.rows() != self.dim {
            return Err(CovarianceError::DimensionMismatch {
                context: "accumulate A rows",
                expected: self.dim,
                got: a_batch.rows(),
            });
        }
        if b_batch.rows() != self.dim {
            return Err(CovarianceError::DimensionMismatch {
                context: "accumulate B rows",
                expected: self.dim,
                got: b_batch.rows(),
            });
        }
        if a_batch.cols() != b_batch.cols() || a_batch.cols() == 0 {
            return Err(CovarianceError::DimensionMismatch {
                context: "accumulate batch width",
                expected: a_batch.cols().max(1),
                got: b_batch.cols(),
            });
        }
        let c = a_batch.matmul_nt(b_batch).expect("checked dims");
        let s = b_batch.matmul_nt(b_batch).expect("checked dims");
        let g = a_batch.matmul_nt(a_batch).expect("checked dims");
        self.c.axpy(1.0, &c).expect("same dim");
        self.s.axpy(1.0, &s).expect("same dim");
        self.g.axpy(1.0, &g).expect("same dim");
        self.columns_seen += a_batch.cols();
        Ok(())
    }

    /// Elementwise sum of two accumulators; associative and commutative up
    /// to floating-point rounding.
    pub fn merge(mut a: CovarianceAccumulator, b: &CovarianceAccumulator) -> Result<CovarianceAccumulator, CovarianceError> {
        if a.dim != b.dim {
            return Err(CovarianceError::DimensionMismatch {
                context: "merge",
                expected: a.dim,
                got: b.dim,
            });
        }
        a.c.axpy(1.0, &b.c).expect("same dim");
        a.s.axpy(1.0, &b.s).expect("same dim");
        a.g.axpy(1.0, &b.g).expect("same dim");
        a.columns_seen += b.columns_seen;
        Ok(a)
    }

    /// Symmetrizes the Gram sums and returns the finished set.
    pub fn finalize(self) -> Result<CovarianceSet, CovarianceError> {
        if self.columns_seen == 0 {
            return Err(CovarianceError::EmptyAccumulator);
        }
        let mut s = self.s;
        let mut g = self.g;
        s.symmetrize();
        g.symmetrize();
        Ok(CovarianceSet { c: self.c, s, g, columns: self.columns_seen })
    }
}

impl CovarianceSet {
    /// Single-shot construction from full activation matrices.
    pub fn from_streams(a: &Matrix, b: &Matrix) -> Result<CovarianceSet, CovarianceError> {
        let mut acc = CovarianceAccumulator::new(a.rows());
        acc.accumulate(a, b)?;
        acc.finalize()
    }

    pub fn dim(&self) -> usize {
        self.s.rows()
    }

    /// Copy with `S + eps I` in place of `S`; used when `S` fails to be
    /// positive definite.
    pub fn tikhonov_regularized(&self, eps: f64) -> CovarianceSet {
        let mut s = self.s.clone();
        s.add_diag(eps);
        CovarianceSet { c: self.c.clone(), s, g: self.g.clone(), columns: self.columns }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn basis_column(dim: usize, idx: usize) -> Matrix {
        Matrix::from_fn(dim, 1, |i, _| if i == idx { 1.0 } else { 0.0 })
    }

    #[test]
    fn single_basis_column() {
        let e1 = basis_column(3, 0);
        let mut acc = CovarianceAccumulator::new(3);
        acc.accumulate(&e1, &e1).unwrap();
        let set = acc.finalize().unwrap();
        let expected = e1.matmul_nt(&e1).unwrap();
        assert_eq!(set.c, expected);
        assert_eq!(set.s, expected);
        assert_eq!(set.g, expected);
        assert_eq!(set.columns, 1);
    }

    #[test]
    fn two_batches_equal_concatenation() {
        let a = seeded(4, 10, 1);
        let b = seeded(4, 10, 2);
        let mut split = CovarianceAccumulator::new(4);
        split.accumulate(&a.col_block(0, 6), &b.col_block(0, 6)).unwrap();
        split.accumulate(&a.col_block(6, 4), &b.col_block(6, 4)).unwrap();
        let mut whole = CovarianceAccumulator::new(4);
        whole.accumulate(&a, &b).unwrap();
        let split = split.finalize().unwrap();
        let whole = whole.finalize().unwrap();
        assert!(split.c.sub(&whole.c).unwrap().max_abs() <= 1e-12);
        assert!(split.s.sub(&whole.s).unwrap().max_abs() <= 1e-12);
        assert!(split.g.sub(&whole.g).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn uneven_batches_match_single_shot() {
        let a = seeded(5, 33, 3);
        let b = seeded(5, 33, 4);
        let widths = [1usize, 7, 2, 11, 5, 4, 3];
        assert_eq!(widths.iter().sum::<usize>(), 33);
        let mut acc = CovarianceAccumulator::new(5);
        let mut start = 0;
        for &w in &widths {
            acc.accumulate(&a.col_block(start, w), &b.col_block(start, w)).unwrap();
            start += w;
        }
        let batched = acc.finalize().unwrap();
        let oracle = CovarianceSet::from_streams(&a, &b).unwrap();
        assert!(batched.c.sub(&oracle.c).unwrap().max_abs() <= 1e-10);
        assert!(batched.s.sub(&oracle.s).unwrap().max_abs() <= 1e-10);
        assert!(batched.g.sub(&oracle.g).unwrap().max_abs() <= 1e-10);
        assert_eq!(batched.columns, 33);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let a = seeded(3, 6, 5);
        let b = seeded(3, 6, 6);
        let mut acc = CovarianceAccumulator::new(3);
        acc.accumulate(&a, &b).unwrap();
        let merged = CovarianceAccumulator::merge(acc.clone(), &CovarianceAccumulator::new(3)).unwrap();
        assert_eq!(merged.c, acc.c);
        assert_eq!(merged.s, acc.s);
        assert_eq!(merged.g, acc.g);
        assert_eq!(merged.columns_seen, acc.columns_seen);
    }

    #[test]
    fn merge_commutes() {
        let mut one = CovarianceAccumulator::new(3);
        one.accumulate(&seeded(3, 4, 7), &seeded(3, 4, 8)).unwrap();
        let mut two = CovarianceAccumulator::new(3);
        two.accumulate(&seeded(3, 5, 9), &seeded(3, 5, 10)).unwrap();
        let ab = CovarianceAccumulator::merge(one.clone(), &two).unwrap();
        let ba = CovarianceAccumulator::merge(two, &one).unwrap();
        assert!(ab.c.sub(&ba.c).unwrap().max_abs() <= 1e-12);
        assert!(ab.s.sub(&ba.s).unwrap().max_abs() <= 1e-12);
        assert!(ab.g.sub(&ba.g).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn tree_merge_matches_sequential() {
        let a = seeded(4, 40, 11);
        let b = seeded(4, 40, 12);
        let mut parts = Vec::new();
        for i in 0..4 {
            let mut acc = CovarianceAccumulator::new(4);
            acc.accumulate(&a.col_block(i * 10, 10), &b.col_block(i * 10, 10)).unwrap();
            parts.push(acc);
        }
        let left = CovarianceAccumulator::merge(parts[0].clone(), &parts[1]).unwrap();
        let right = CovarianceAccumulator::merge(parts[2].clone(), &parts[3]).unwrap();
        let tree = CovarianceAccumulator::merge(left, &right).unwrap().finalize().unwrap();
        let seq = CovarianceSet::from_streams(&a, &b).unwrap();
        assert!(tree.c.sub(&seq.c).unwrap().max_abs() <= 1e-10);
        assert!(tree.s.sub(&seq.s).unwrap().max_abs() <= 1e-10);
        assert!(tree.g.sub(&seq.g).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn identical_streams_collapse() {
        let x = seeded(4, 12, 13);
        let set = CovarianceSet::from_streams(&x, &x).unwrap();
        assert!(set.c.sub(&set.s).unwrap().max_abs() <= 1e-12);
        assert!(set.c.sub(&set.g).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn finalize_symmetric_and_psd() {
        let a = seeded(5, 20, 14);
        let b = seeded(5, 20, 15);
        let set = CovarianceSet::from_streams(&a, &b).unwrap();
        assert_eq!(set.s.asymmetry(), 0.0);
        assert_eq!(set.g.asymmetry(), 0.0);
        let (vals_s, _) = crate::linalg::symmetric_eigen(&set.s).unwrap();
        let (vals_g, _) = crate::linalg::symmetric_eigen(&set.g).unwrap();
        let floor = -1e-10 * set.s.trace().abs().max(1.0);
        assert!(vals_s.iter().all(|&v| v >= floor));
        assert!(vals_g.iter().all(|&v| v >= floor));
    }

    #[test]
    fn empty_accumulator_rejected() {
        assert!(matches!(
            CovarianceAccumulator::new(3).finalize(),
            Err(CovarianceError::EmptyAccumulator)
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut acc = CovarianceAccumulator::new(3);
        let a = seeded(3, 4, 1);
        let b = seeded(4, 4, 2);
        assert!(acc.accumulate(&a, &b).is_err());
        let b = seeded(3, 5, 2);
        assert!(acc.accumulate(&a, &b).is_err());
    }
}
