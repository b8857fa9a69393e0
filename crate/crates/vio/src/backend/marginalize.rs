//! Marginalization of states leaving the window.
//!
//! Folding the factors that touch the leaving state into a dense sub-system
//! and Schur-eliminating the leaving block
//!
//! ```text
//! H' = H_bb - H_b0 H_00^-1 H_0b
//! b' = b_b  - H_b0 H_00^-1 b_0
//! ```
//!
//! leaves a Gaussian prior on the boundary states. The prior stores its
//! linearization points: applied later at states `x`, its residual offset is
//! `rhs - info * (x [-] x_lin)`, which keeps the folded information consistent
//! while the window keeps moving.

use nalgebra::{DMatrix, DVector};

use super::hessian::StructuredHessian;
use super::linearize::{ImuFactor, VisionFactor, VisionConfig};
use crate::error::VioError;
use crate::geometry::{KFState, STATE_DOF};
use nalgebra::Vector3;

/// Dense Schur elimination of the first `k` rows/columns of `(h, b)`.
/// The eliminated block gets a relative jitter retry before giving up.
pub fn schur_marginalize(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    k: usize,
) -> Result<(DMatrix<f64>, DVector<f64>), VioError> {
    assert!(h.is_square() && h.nrows() == b.len() && k <= h.nrows());
    let m = h.nrows() - k;
    let h00 = h.view((0, 0), (k, k)).into_owned();
    let h0b = h.view((0, k), (k, m)).into_owned();
    let hb0 = h.view((k, 0), (m, k)).into_owned();
    let b0 = b.rows(0, k).into_owned();

    let scale = (h00.trace() / k as f64).abs().max(1e-12);
    let mut chol = None;
    for jitter in [0.0, 1e-12 * scale, 1e-8 * scale] {
        let mut try_h = h00.clone();
        for i in 0..k {
            try_h[(i, i)] += jitter;
        }
        if let Some(c) = try_h.cholesky() {
            chol = Some(c);
            break;
        }
    }
    let chol = chol.ok_or(VioError::NotPositiveDefinite { index: 0 })?;

    let mut info = h.view((k, k), (m, m)).into_owned() - &hb0 * chol.solve(&h0b);
    // Schur of a symmetric matrix is symmetric; enforce it to rounding.
    info = (&info + info.transpose()) * 0.5;
    let rhs = b.rows(k, m).into_owned() - hb0 * chol.solve(&b0);
    Ok((info, rhs))
}

/// Gaussian prior over retained states, produced by marginalization.
#[derive(Debug, Clone)]
pub struct MarginalPrior {
    /// Information matrix, one 15-dim tangent block per state.
    pub info: DMatrix<f64>,
    /// Information-weighted residual at the linearization points.
    pub rhs: DVector<f64>,
    /// Linearization-point states, in block order.
    pub lin: Vec<KFState>,
    /// Keyframe ids of the prior states, in block order.
    pub ids: Vec<u64>,
}

impl MarginalPrior {
    pub fn states(&self) -> usize {
        self.lin.len()
    }

    /// Stacked tangent offset of the current states from the linearization
    /// points, `slots[a]` giving the window slot of prior state `a`.
    fn offset(&self, states: &[KFState], slots: &[usize]) -> DVector<f64> {
        let mut d = DVector::zeros(self.info.nrows());
        for (a, &slot) in slots.iter().enumerate() {
            let da = states[slot].boxminus(&self.lin[a]);
            d.fixed_rows_mut::<STATE_DOF>(a * STATE_DOF).copy_from(&da);
        }
        d
    }

    /// Adds the prior into the structured system at the given window slots.
    pub fn accumulate(
        &self,
        h: &mut StructuredHessian,
        states: &[KFState],
        slots: &[usize],
    ) -> Result<f64, VioError> {
        assert_eq!(slots.len(), self.states());
        let d = self.offset(states, slots);
        let eps = &self.rhs - &self.info * &d;
        for a in 0..self.states() {
            for bx in a..self.states() {
                let block = self
                    .info
                    .fixed_view::<STATE_DOF, STATE_DOF>(a * STATE_DOF, bx * STATE_DOF)
                    .into_owned();
                h.accumulate_block(slots[a], slots[bx], &block)?;
            }
            let seg = eps.fixed_rows::<STATE_DOF>(a * STATE_DOF).into_owned();
            h.add_rhs(slots[a], &seg);
        }
        Ok(self.cost_of_offset(&d))
    }

    /// Quadratic prior energy up to a constant: `d^T info d - 2 d^T rhs`.
    pub fn cost(&self, states: &[KFState], slots: &[usize]) -> f64 {
        self.cost_of_offset(&self.offset(states, slots))
    }

    fn cost_of_offset(&self, d: &DVector<f64>) -> f64 {
        (d.transpose() * (&self.info * d))[(0, 0)] - 2.0 * d.dot(&self.rhs)
    }

    /// Scatters the prior into a dense sub-system via `map[slot] = sub index`.
    pub fn scatter_dense(
        &self,
        h: &mut DMatrix<f64>,
        b: &mut DVector<f64>,
        states: &[KFState],
        slots: &[usize],
        map: &dyn Fn(usize) -> usize,
    ) {
        let d = self.offset(states, slots);
        let eps = &self.rhs - &self.info * &d;
        for a in 0..self.states() {
            let ia = map(slots[a]) * STATE_DOF;
            for (bx, &slot_b) in slots.iter().enumerate() {
                let ib = map(slot_b) * STATE_DOF;
                let block = self
                    .info
                    .view((a * STATE_DOF, bx * STATE_DOF), (STATE_DOF, STATE_DOF));
                let mut view = h.view_mut((ia, ib), (STATE_DOF, STATE_DOF));
                view += block;
            }
            let mut seg = b.rows_mut(ia, STATE_DOF);
            seg += eps.rows(a * STATE_DOF, STATE_DOF);
        }
    }
}

/// Scatters an IMU factor into a dense sub-system.
pub fn scatter_imu_dense(
    factor: &ImuFactor,
    h: &mut DMatrix<f64>,
    b: &mut DVector<f64>,
    states: &[KFState],
    gravity: &Vector3<f64>,
    map: &dyn Fn(usize) -> usize,
) {
    let si = &states[factor.i];
    let sj = &states[factor.j];
    let r = factor.residual(si, sj, gravity);
    let (ji, jj) = factor.jacobians(si, sj, gravity);
    let w = factor.weight();
    let (wi, wj) = (w * ji, w * jj);
    let (ia, ib) = (map(factor.i) * STATE_DOF, map(factor.j) * STATE_DOF);
    let blocks = [
        (ia, ia, ji.transpose() * wi),
        (ia, ib, ji.transpose() * wj),
        (ib, ia, jj.transpose() * wi),
        (ib, ib, jj.transpose() * wj),
    ];
    for (r0, c0, m) in blocks {
        let mut view = h.view_mut((r0, c0), (STATE_DOF, STATE_DOF));
        view += m;
    }
    let mut seg = b.rows_mut(ia, STATE_DOF);
    seg += -(wi.transpose() * r);
    let mut seg = b.rows_mut(ib, STATE_DOF);
    seg += -(wj.transpose() * r);
}

/// Scatters a vision factor's Schur-reduced pose blocks into a dense
/// sub-system.
pub fn scatter_vision_dense(
    factor: &VisionFactor,
    h: &mut DMatrix<f64>,
    b: &mut DVector<f64>,
    states: &[KFState],
    cfg: &VisionConfig,
    map: &dyn Fn(usize) -> usize,
) {
    let Some(lin) = factor.linearize(states, cfg) else {
        return;
    };
    let Some((blocks, eps)) = lin.schur(cfg.landmark_damping) else {
        return;
    };
    for (a, bx, m) in &blocks {
        let (ia, ib) = (map(*a) * STATE_DOF, map(*bx) * STATE_DOF);
        {
            let mut view = h.view_mut((ia, ib), (6, 6));
            view += m;
        }
        if a != bx {
            let mut view = h.view_mut((ib, ia), (6, 6));
            view += m.transpose();
        }
    }
    for (a, e) in &eps {
        let mut seg = b.rows_mut(map(*a) * STATE_DOF, 6);
        seg += e;
    }
}
