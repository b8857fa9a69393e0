//! Band-structured Hessian with a zero-skipping Cholesky solver.
//!
//! Storage covers only the upper-triangle band envelope of the block pattern:
//! element row `r` keeps columns `r ..= band_end(r)`. Writes land exclusively
//! on in-pattern blocks; reads of the mirrored triangle transpose on the fly
//! and off-pattern reads return zeros, so the logical matrix is symmetric.
//!
//! The factorization is a left-looking Cholesky producing `U` (with
//! `H = U^T U`) in place. Fill-in of a banded matrix stays inside the band,
//! so the envelope is closed under factorization. Every inner-product
//! multiply-accumulate first tests its stored operands: a zero operand skips
//! the multiply and bumps the `skipped` counter instead of `performed`,
//! modeling a hardware solver that skips zero locations. Back-substitution
//! skips on zero factor entries the same way.

use nalgebra::{DVector, SMatrix};

use super::pattern::BlockPattern;
use crate::error::VioError;
use crate::geometry::STATE_DOF;

pub type StateBlock = SMatrix<f64, STATE_DOF, STATE_DOF>;

/// Multiply-accumulate tally of one solver pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SolveOps {
    pub performed: u64,
    pub skipped: u64,
}

impl SolveOps {
    pub fn total(&self) -> u64 {
        self.performed + self.skipped
    }

    pub fn merge(&self, other: &SolveOps) -> SolveOps {
        SolveOps {
            performed: self.performed + other.performed,
            skipped: self.skipped + other.skipped,
        }
    }
}

/// MACs a dense left-looking Cholesky of an `n x n` matrix performs.
pub fn dense_cholesky_macs(n: u64) -> u64 {
    n * (n * n - 1) / 6
}

/// MACs the two dense triangular solves perform.
pub fn dense_substitute_macs(n: u64) -> u64 {
    n * (n - 1)
}

#[derive(Debug, Clone)]
pub struct StructuredHessian {
    pattern: BlockPattern,
    row_start: Vec<usize>,
    values: Vec<f64>,
    pub rhs: DVector<f64>,
    factored: bool,
}

impl StructuredHessian {
    pub fn new(pattern: BlockPattern) -> Self {
        let dim = pattern.dim();
        let mut row_start = Vec::with_capacity(dim + 1);
        let mut offset = 0;
        for r in 0..dim {
            row_start.push(offset);
            offset += pattern.band_end(r) - r + 1;
        }
        row_start.push(offset);
        StructuredHessian {
            pattern,
            row_start,
            values: vec![0.0; offset],
            rhs: DVector::zeros(dim),
            factored: false,
        }
    }

    pub fn pattern(&self) -> &BlockPattern {
        &self.pattern
    }

    pub fn dim(&self) -> usize {
        self.pattern.dim()
    }

    /// Clears values, right-hand side, and factorization state.
    pub fn reset(&mut self) {
        self.values.fill(0.0);
        self.rhs.fill(0.0);
        self.factored = false;
    }

    #[inline]
    fn idx(&self, r: usize, c: usize) -> usize {
        debug_assert!(r <= c && c <= self.pattern.band_end(r));
        self.row_start[r] + (c - r)
    }

    /// Stored upper-envelope entry, 0 outside it. Symmetric access.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (r, c) = if r <= c { (r, c) } else { (c, r) };
        if c <= self.pattern.band_end(r) {
            self.values[self.idx(r, c)]
        } else {
            0.0
        }
    }

    /// Accumulates a 15x15 contribution onto block (i, j). A lower-triangle
    /// target is folded into its transpose; a diagonal target must receive a
    /// symmetric block (only its upper half is stored).
    pub fn accumulate_block(
        &mut self,
        i: usize,
        j: usize,
        m: &StateBlock,
    ) -> Result<(), VioError> {
        assert!(!self.factored, "accumulate on factored matrix");
        if !self.pattern.in_pattern(i, j) {
            return Err(VioError::MaskedWrite { i, j });
        }
        let d = STATE_DOF;
        if i == j {
            for r in 0..d {
                for c in r..d {
                    let v = m[(r, c)];
                    if v != 0.0 {
                        let at = self.idx(i * d + r, i * d + c);
                        self.values[at] += v;
                    }
                }
            }
        } else {
            let (bi, bj, transpose) = if i < j { (i, j, false) } else { (j, i, true) };
            for r in 0..d {
                for c in 0..d {
                    let v = if transpose { m[(c, r)] } else { m[(r, c)] };
                    if v != 0.0 {
                        let at = self.idx(bi * d + r, bj * d + c);
                        self.values[at] += v;
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads block (i, j): stored content, its transpose for the mirrored
    /// triangle, or zeros off-pattern.
    pub fn read_block(&self, i: usize, j: usize) -> StateBlock {
        let mut out = StateBlock::zeros();
        if !self.pattern.in_pattern(i, j) {
            return out;
        }
        let d = STATE_DOF;
        for r in 0..d {
            for c in 0..d {
                out[(r, c)] = self.get(i * d + r, j * d + c);
            }
        }
        out
    }

    /// Adds a 15-vector segment onto the right-hand side of state `i`.
    pub fn add_rhs(&mut self, i: usize, seg: &SMatrix<f64, STATE_DOF, 1>) {
        let mut view = self.rhs.fixed_rows_mut::<STATE_DOF>(i * STATE_DOF);
        view += seg;
    }

    /// Adds `lambda` to every diagonal element.
    pub fn add_diagonal(&mut self, lambda: f64) {
        assert!(!self.factored, "damping on factored matrix");
        for r in 0..self.dim() {
            let at = self.idx(r, r);
            self.values[at] += lambda;
        }
    }

    /// Full dense mirror, for oracles and reports.
    pub fn as_dense(&self) -> nalgebra::DMatrix<f64> {
        let dim = self.dim();
        nalgebra::DMatrix::from_fn(dim, dim, |r, c| self.get(r, c))
    }

    /// In-place factorization `H = U^T U` over the envelope.
    pub fn cholesky_sparse(&mut self) -> Result<SolveOps, VioError> {
        assert!(!self.factored, "double factorization");
        let dim = self.dim();
        let mut ops = SolveOps::default();
        for c in 0..dim {
            let rs = self.pattern.band_start_row(c);
            for r in rs..=c {
                let mut sum = self.values[self.idx(r, c)];
                for t in rs..r {
                    let a = self.values[self.idx(t, r)];
                    let b = self.values[self.idx(t, c)];
                    if a == 0.0 || b == 0.0 {
                        ops.skipped += 1;
                    } else {
                        sum -= a * b;
                        ops.performed += 1;
                    }
                }
                let at = self.idx(r, c);
                if r < c {
                    let pivot = self.values[self.idx(r, r)];
                    self.values[at] = if sum == 0.0 { 0.0 } else { sum / pivot };
                } else {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(VioError::NotPositiveDefinite { index: c });
                    }
                    self.values[at] = sum.sqrt();
                }
            }
        }
        self.factored = true;
        Ok(ops)
    }

    /// Solves `U^T U x = b` after [`Self::cholesky_sparse`].
    pub fn back_substitute(&self, b: &DVector<f64>) -> Result<(DVector<f64>, SolveOps), VioError> {
        assert!(self.factored, "back-substitution before factorization");
        let dim = self.dim();
        if b.len() != dim {
            return Err(VioError::Config(format!(
                "right-hand side length {} does not match dimension {dim}",
                b.len()
            )));
        }
        let mut ops = SolveOps::default();
        // Forward: U^T y = b, row c of U^T is column c of U.
        let mut y = DVector::zeros(dim);
        for c in 0..dim {
            let mut sum = b[c];
            for t in self.pattern.band_start_row(c)..c {
                let u = self.values[self.idx(t, c)];
                if u == 0.0 {
                    ops.skipped += 1;
                } else {
                    sum -= u * y[t];
                    ops.performed += 1;
                }
            }
            y[c] = sum / self.values[self.idx(c, c)];
        }
        // Backward: U x = y.
        let mut x = DVector::zeros(dim);
        for r in (0..dim).rev() {
            let mut sum = y[r];
            for c in r + 1..=self.pattern.band_end(r) {
                let u = self.values[self.idx(r, c)];
                if u == 0.0 {
                    ops.skipped += 1;
                } else {
                    sum -= u * x[c];
                    ops.performed += 1;
                }
            }
            x[r] = sum / self.values[self.idx(r, r)];
        }
        Ok((x, ops))
    }

    /// Factors and solves against the accumulated right-hand side.
    pub fn solve(&mut self) -> Result<(DVector<f64>, SolveOps), VioError> {
        let f = self.cholesky_sparse()?;
        let rhs = self.rhs.clone();
        let (x, s) = self.back_substitute(&rhs)?;
        Ok((x, f.merge(&s)))
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::pattern::build_pattern;
    use rand::{Rng, SeedableRng};

    fn small() -> StructuredHessian {
        StructuredHessian::new(build_pattern(4, 2).unwrap())
    }

    #[test]
    fn write_read_roundtrip() {
        let mut h = small();
        let mut m = StateBlock::zeros();
        m[(0, 1)] = 2.5;
        m[(14, 0)] = -1.0;
        h.accumulate_block(0, 1, &m).unwrap();
        assert_eq!(h.read_block(0, 1), m);
        assert_eq!(h.read_block(1, 0), m.transpose());
        // Accumulation adds.
        h.accumulate_block(0, 1, &m).unwrap();
        assert_eq!(h.read_block(0, 1), m * 2.0);
        // Writing through the transposed target folds into the same storage.
        h.accumulate_block(1, 0, &m).unwrap();
        assert_eq!(h.read_block(0, 1), m * 2.0 + m.transpose());
    }

    #[test]
    fn off_pattern_write_rejected_read_zero() {
        let mut h = small();
        let m = StateBlock::identity();
        assert!(matches!(
            h.accumulate_block(0, 3, &m),
            Err(VioError::MaskedWrite { i: 0, j: 3 })
        ));
        assert_eq!(h.read_block(0, 3), StateBlock::zeros());
        assert_eq!(h.read_block(3, 0), StateBlock::zeros());
    }

    #[test]
    fn mirror_matches_dense_shadow() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(51);
        let pattern = build_pattern(6, 3).unwrap();
        let mut h = StructuredHessian::new(pattern.clone());
        let dim = h.dim();
        let mut shadow = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for _ in 0..5000 {
            let i = rng.random_range(0..6);
            let j = rng.random_range(0..6);
            if !pattern.in_pattern(i, j) {
                continue;
            }
            let mut m = StateBlock::zeros();
            for r in 0..STATE_DOF {
                for c in 0..STATE_DOF {
                    m[(r, c)] = rng.random_range(-1.0..1.0);
                }
            }
            if i == j {
                m = (m + m.transpose()) * 0.5;
            }
            h.accumulate_block(i, j, &m).unwrap();
            for r in 0..STATE_DOF {
                for c in 0..STATE_DOF {
                    let v = m[(r, c)];
                    shadow[(i * STATE_DOF + r, j * STATE_DOF + c)] += v;
                    if i != j {
                        shadow[(j * STATE_DOF + c, i * STATE_DOF + r)] += v;
                    }
                }
            }
        }
        // Element-exact equality, not approximate.
        for r in 0..dim {
            for c in 0..dim {
                assert_eq!(h.get(r, c), shadow[(r, c)], "mismatch at ({r},{c})");
            }
        }
    }

    #[test]
    fn identity_factors_trivially() {
        let mut h = small();
        h.add_diagonal(1.0);
        let ops = h.cholesky_sparse().unwrap();
        assert_eq!(ops.performed, 0);
        for r in 0..h.dim() {
            for c in 0..h.dim() {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert_eq!(h.get(r, c), expect);
            }
        }
    }

    #[test]
    fn factor_reconstructs_matrix() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(52);
        let mut h = test_support::random_spd(8, 4, &mut rng);
        let dense = h.as_dense();
        h.cholesky_sparse().unwrap();
        let dim = h.dim();
        let u = nalgebra::DMatrix::from_fn(dim, dim, |r, c| if r <= c { h.get(r, c) } else { 0.0 });
        let rebuilt = u.transpose() * &u;
        let err = (&rebuilt - &dense).norm() / dense.norm();
        assert!(err < 1e-12, "reconstruction error {err}");
    }

    #[test]
    fn matches_dense_solver() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(53);
        for trial in 0..5 {
            let mut h = test_support::random_spd(20, 10, &mut rng);
            let dense = h.as_dense();
            let mut b = DVector::zeros(h.dim());
            for v in b.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            h.cholesky_sparse().unwrap();
            let (x, _) = h.back_substitute(&b).unwrap();
            let x_dense = nalgebra::Cholesky::new(dense.clone())
                .expect("spd")
                .solve(&b);
            let rel = (&x - &x_dense).norm() / x_dense.norm();
            assert!(rel < 1e-9, "trial {trial}: relative error {rel}");
            let resid = (&dense * &x - &b).norm() / b.norm();
            assert!(resid < 1e-9, "trial {trial}: residual {resid}");
        }
    }

    #[test]
    fn zero_rhs_zero_solution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(54);
        let mut h = test_support::random_spd(6, 3, &mut rng);
        h.cholesky_sparse().unwrap();
        let (x, _) = h.back_substitute(&DVector::zeros(h.dim())).unwrap();
        assert_eq!(x, DVector::zeros(h.dim()));
    }

    #[test]
    fn indefinite_matrix_reports_pivot() {
        let mut h = small();
        h.add_diagonal(1.0);
        let mut m = StateBlock::zeros();
        m[(3, 3)] = -5.0;
        h.accumulate_block(1, 1, &m).unwrap();
        match h.cholesky_sparse() {
            Err(VioError::NotPositiveDefinite { index }) => {
                assert_eq!(index, STATE_DOF + 3);
            }
            other => panic!("expected indefinite error, got {other:?}"),
        }
    }

    #[test]
    fn zero_skipping_reduces_performed_macs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        let mut painted = test_support::random_spd(20, 10, &mut rng);
        let mut structured = test_support::random_vio_structured(20, 10, &mut rng);
        let ops_painted = painted.cholesky_sparse().unwrap();
        let ops_structured = structured.cholesky_sparse().unwrap();
        // Same envelope traversal either way.
        assert_eq!(ops_painted.total(), ops_structured.total());
        assert!(ops_structured.performed < ops_painted.performed);
        let dense = dense_cholesky_macs(300);
        assert!(ops_painted.performed < dense);
        let ratio = dense as f64 / ops_structured.performed as f64;
        assert!(ratio > 2.0, "structured speedup only {ratio:.2}");
    }

    #[test]
    fn rhs_accumulation() {
        let mut h = small();
        let seg = SMatrix::<f64, STATE_DOF, 1>::repeat(2.0);
        h.add_rhs(2, &seg);
        h.add_rhs(2, &seg);
        assert_eq!(h.rhs[2 * STATE_DOF], 4.0);
        assert_eq!(h.rhs[0], 0.0);
    }

    #[test]
    fn wrong_rhs_dimension_rejected() {
        let mut h = small();
        h.add_diagonal(1.0);
        h.cholesky_sparse().unwrap();
        assert!(h.back_substitute(&DVector::zeros(3)).is_err());
    }
}
