//! Fixed block-sparsity pattern of the smoother Hessian.
//!
//! With N keyframe states of 15 DoF each, block (i, j) can be nonzero only if
//! some factor couples states i and j:
//!
//! * a feature track alive for at most A keyframes couples states up to
//!   A - 1 apart;
//! * a preintegrated IMU factor couples adjacent states;
//! * the marginalization prior densely couples the oldest boundary states
//!   (the up-to-A-1 states the departed keyframe was linked to).
//!
//! The boundary set lies inside the age band, so the block pattern is a band
//! of half-width max(A - 1, 1). Within a block, only IMU, prior, and diagonal
//! blocks are fully dense; a vision-only coupling touches just the 6x6
//! attitude-position corner, which is what [`structural_nonzeros_upper`]
//! counts and the hardware stores.

use crate::error::VioError;
use crate::geometry::STATE_DOF;

/// Rows 0..6 of a state block (attitude + position) are the only part vision
/// factors touch.
const POSE_DOF: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPattern {
    n: usize,
    age: usize,
    bandwidth: usize,
    boundary: usize,
}

/// Builds the pattern for `n` keyframes and feature age limit `age`.
pub fn build_pattern(n: usize, age: usize) -> Result<BlockPattern, VioError> {
    if n == 0 || age == 0 || age > n {
        return Err(VioError::Config(format!(
            "pattern needs 1 <= age <= horizon, got age {age}, horizon {n}"
        )));
    }
    Ok(BlockPattern {
        n,
        age,
        bandwidth: (age - 1).max(1),
        boundary: (age - 1).max(1),
    })
}

impl BlockPattern {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.n * STATE_DOF
    }

    /// Block half-bandwidth: largest in-pattern |i - j|.
    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn in_pattern(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && i.abs_diff(j) <= self.bandwidth
    }

    /// Whether states i and j are both coupled by the marginalization prior.
    pub fn in_boundary(&self, i: usize, j: usize) -> bool {
        i < self.boundary && j < self.boundary
    }

    /// In-pattern blocks of the upper triangle, diagonal included.
    pub fn upper_blocks(&self) -> usize {
        (0..self.n)
            .map(|i| (self.n - i).min(self.bandwidth + 1))
            .sum()
    }

    /// Structurally nonzero elements of the upper triangle, counting the
    /// within-block structure: diagonal blocks and |i-j| = 1 blocks are dense
    /// (IMU, damping), prior-boundary pairs are dense, and remaining in-band
    /// blocks hold only the 6x6 pose coupling.
    pub fn structural_nonzeros_upper(&self) -> usize {
        let full = STATE_DOF * STATE_DOF;
        let diag_upper = STATE_DOF * (STATE_DOF + 1) / 2;
        let pose = POSE_DOF * POSE_DOF;
        let mut count = 0;
        for i in 0..self.n {
            for j in i..self.n {
                if !self.in_pattern(i, j) {
                    continue;
                }
                count += if i == j {
                    diag_upper
                } else if j - i == 1 || self.in_boundary(i, j) {
                    full
                } else {
                    pose
                };
            }
        }
        count
    }

    /// Elements of a dense upper triangle at this dimension.
    pub fn dense_upper_elements(&self) -> usize {
        let d = self.dim();
        d * (d + 1) / 2
    }

    /// Fraction of the upper triangle that is structurally nonzero.
    pub fn density_upper(&self) -> f64 {
        self.structural_nonzeros_upper() as f64 / self.dense_upper_elements() as f64
    }

    /// Last column (inclusive) of the storage envelope for element row `r`.
    /// The envelope covers every in-pattern block column plus the fill-in a
    /// banded Cholesky produces, which stays inside the band.
    pub fn band_end(&self, r: usize) -> usize {
        let block = r / STATE_DOF;
        ((block + self.bandwidth + 1) * STATE_DOF - 1).min(self.dim() - 1)
    }

    /// First row whose envelope reaches column `c`.
    pub fn band_start_row(&self, c: usize) -> usize {
        let block = c / STATE_DOF;
        block.saturating_sub(self.bandwidth) * STATE_DOF
    }

    /// Elements in the upper-triangle storage envelope.
    pub fn envelope_elements(&self) -> usize {
        (0..self.dim()).map(|r| self.band_end(r) - r + 1).sum()
    }
}
