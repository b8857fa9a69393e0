//! IMU frontend: on-manifold preintegration between keyframes.
//!
//! All gyroscope and accelerometer samples between two keyframes are folded
//! into one relative measurement (dR, dv, dp) with the Euler recursion
//!
//! ```text
//! dR <- dR * exp((w - bg) dt)
//! dv <- dv + dR (a - ba) dt
//! dp <- dp + dv dt + 1/2 dR (a - ba) dt^2
//! ```
//!
//! applied in double precision. Alongside the state the accumulator propagates
//! a 9x9 covariance over (d_theta, d_v, d_p) and first-order Jacobians of the
//! deltas with respect to the gyro and accel biases, so the backend can adjust
//! a finished preintegration when its bias estimate moves instead of
//! re-integrating raw samples.
//!
//! The accumulator is single-owner: the pipeline feeds it samples in timestamp
//! order and calls [`Preintegrator::finalize`] at each keyframe boundary, which
//! hands the measurement to the backend and resets the state.

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::error::VioError;
use crate::geometry::{so3_exp, so3_hat, so3_right_jacobian};

/// One IMU reading. Angular rate in rad/s, specific force in m/s^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t_ns: i64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Continuous-time noise densities and bias random-walk intensities.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImuNoise {
    /// rad / (s * sqrt(Hz))
    pub gyro_density: f64,
    /// m / (s^2 * sqrt(Hz))
    pub accel_density: f64,
    /// rad / (s^2 * sqrt(Hz))
    pub gyro_walk: f64,
    /// m / (s^3 * sqrt(Hz))
    pub accel_walk: f64,
}

impl ImuNoise {
    /// ADIS16448 values shipped with the reference dataset.
    pub fn euroc() -> Self {
        ImuNoise {
            gyro_density: 1.6968e-4,
            accel_density: 2.0e-3,
            gyro_walk: 1.9393e-5,
            accel_walk: 3.0e-3,
        }
    }
}

/// Finished preintegrated measurement between two keyframes.
///
/// Covariance row order is (d_theta, d_v, d_p). Bias Jacobians are taken at
/// the reference biases `bg_ref`, `ba_ref` the samples were corrected with.
#[derive(Debug, Clone, PartialEq)]
pub struct PreintegratedDelta {
    pub dt: f64,
    pub delta_r: Matrix3<f64>,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub cov: SMatrix<f64, 9, 9>,
    pub j_r_bg: Matrix3<f64>,
    pub j_v_bg: Matrix3<f64>,
    pub j_v_ba: Matrix3<f64>,
    pub j_p_bg: Matrix3<f64>,
    pub j_p_ba: Matrix3<f64>,
    pub bg_ref: Vector3<f64>,
    pub ba_ref: Vector3<f64>,
}

impl PreintegratedDelta {
    fn identity(bg: Vector3<f64>, ba: Vector3<f64>) -> Self {
        PreintegratedDelta {
            dt: 0.0,
            delta_r: Matrix3::identity(),
            delta_v: Vector3::zeros(),
            delta_p: Vector3::zeros(),
            cov: SMatrix::zeros(),
            j_r_bg: Matrix3::zeros(),
            j_v_bg: Matrix3::zeros(),
            j_v_ba: Matrix3::zeros(),
            j_p_bg: Matrix3::zeros(),
            j_p_ba: Matrix3::zeros(),
            bg_ref: bg,
            ba_ref: ba,
        }
    }

    /// First-order correction of the deltas to new bias estimates.
    pub fn corrected(
        &self,
        bg: &Vector3<f64>,
        ba: &Vector3<f64>,
    ) -> (Matrix3<f64>, Vector3<f64>, Vector3<f64>) {
        let dbg = bg - self.bg_ref;
        let dba = ba - self.ba_ref;
        (
            self.delta_r * so3_exp(&(self.j_r_bg * dbg)),
            self.delta_v + self.j_v_bg * dbg + self.j_v_ba * dba,
            self.delta_p + self.j_p_bg * dbg + self.j_p_ba * dba,
        )
    }

    /// Chains `self` over [i,k] with `other` over [k,j] into a delta over [i,j].
    ///
    /// Requires both to share reference biases. State composition is exact;
    /// covariance and bias Jacobians compose to first order, consistent with
    /// the per-sample recursion.
    pub fn compose(&self, other: &PreintegratedDelta) -> PreintegratedDelta {
        assert_eq!(self.bg_ref, other.bg_ref, "reference bias mismatch");
        assert_eq!(self.ba_ref, other.ba_ref, "reference bias mismatch");
        let r_ik = self.delta_r;
        let dt_kj = other.dt;

        // Error of the first segment propagates through the second segment's
        // frame; the second segment's error enters rotated by dR_ik.
        let mut a = SMatrix::<f64, 9, 9>::identity();
        a.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&other.delta_r.transpose());
        a.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-r_ik * so3_hat(&other.delta_v)));
        a.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-r_ik * so3_hat(&other.delta_p)));
        a.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * dt_kj));
        let mut b = SMatrix::<f64, 9, 9>::identity();
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&r_ik);
        b.fixed_view_mut::<3, 3>(6, 6).copy_from(&r_ik);

        PreintegratedDelta {
            dt: self.dt + other.dt,
            delta_r: r_ik * other.delta_r,
            delta_v: self.delta_v + r_ik * other.delta_v,
            delta_p: self.delta_p + self.delta_v * dt_kj + r_ik * other.delta_p,
            cov: a * self.cov * a.transpose() + b * other.cov * b.transpose(),
            j_r_bg: other.delta_r.transpose() * self.j_r_bg + other.j_r_bg,
            j_v_bg: self.j_v_bg + r_ik * other.j_v_bg
                - r_ik * so3_hat(&other.delta_v) * self.j_r_bg,
            j_v_ba: self.j_v_ba + r_ik * other.j_v_ba,
            j_p_bg: self.j_p_bg + self.j_v_bg * dt_kj + r_ik * other.j_p_bg
                - r_ik * so3_hat(&other.delta_p) * self.j_r_bg,
            j_p_ba: self.j_p_ba + self.j_v_ba * dt_kj + r_ik * other.j_p_ba,
            bg_ref: self.bg_ref,
            ba_ref: self.ba_ref,
        }
    }
}

/// Stateful accumulator fed between keyframes.
#[derive(Debug, Clone)]
pub struct Preintegrator {
    noise: ImuNoise,
    bg: Vector3<f64>,
    ba: Vector3<f64>,
    acc: PreintegratedDelta,
    samples: usize,
}

impl Preintegrator {
    pub fn new(noise: ImuNoise, bg: Vector3<f64>, ba: Vector3<f64>) -> Self {
        Preintegrator {
            noise,
            bg,
            ba,
            acc: PreintegratedDelta::identity(bg, ba),
            samples: 0,
        }
    }

    /// Updates the reference biases for subsequent accumulations.
    /// Takes effect at the next reset, not mid-interval.
    pub fn set_bias(&mut self, bg: Vector3<f64>, ba: Vector3<f64>) {
        self.bg = bg;
        self.ba = ba;
    }

    pub fn sample_count(&self) -> usize {
        self.samples
    }

    pub fn duration(&self) -> f64 {
        self.acc.dt
    }

    /// The delta accumulated so far, without ending the interval.
    pub fn current(&self) -> &PreintegratedDelta {
        &self.acc
    }

    /// Folds one sample held for `dt` seconds into the accumulator.
    pub fn integrate_sample(&mut self, sample: &ImuSample, dt: f64) -> Result<(), VioError> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(VioError::BadSampleInterval { dt });
        }
        let w = sample.gyro - self.bg;
        let a = sample.accel - self.ba;
        let dr_inc = so3_exp(&(w * dt));
        let r = self.acc.delta_r;
        let r_hat_a = r * so3_hat(&a);

        // Covariance first, with the pre-update state.
        let mut amat = SMatrix::<f64, 9, 9>::identity();
        amat.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&dr_inc.transpose());
        amat.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r_hat_a * dt));
        amat.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-r_hat_a * (0.5 * dt * dt)));
        amat.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * dt));
        let jr = so3_right_jacobian(&(w * dt));
        let sg = self.noise.gyro_density * self.noise.gyro_density / dt;
        let sa = self.noise.accel_density * self.noise.accel_density / dt;
        let g_theta = jr * dt;
        let g_v = r * dt;
        let g_p = r * (0.5 * dt * dt);
        let mut noise = SMatrix::<f64, 9, 9>::zeros();
        noise
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(g_theta * g_theta.transpose() * sg));
        noise
            .fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(g_v * g_v.transpose() * sa));
        noise
            .fixed_view_mut::<3, 3>(3, 6)
            .copy_from(&(g_v * g_p.transpose() * sa));
        noise
            .fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(g_p * g_v.transpose() * sa));
        noise
            .fixed_view_mut::<3, 3>(6, 6)
            .copy_from(&(g_p * g_p.transpose() * sa));
        self.acc.cov = amat * self.acc.cov * amat.transpose() + noise;

        // Bias Jacobians, also with pre-update values.
        let j_r_bg_old = self.acc.j_r_bg;
        self.acc.j_p_bg += self.acc.j_v_bg * dt - r_hat_a * j_r_bg_old * (0.5 * dt * dt);
        self.acc.j_p_ba += self.acc.j_v_ba * dt - r * (0.5 * dt * dt);
        self.acc.j_v_bg -= r_hat_a * j_r_bg_old * dt;
        self.acc.j_v_ba -= r * dt;
        self.acc.j_r_bg = dr_inc.transpose() * j_r_bg_old - jr * dt;

        // State last.
        self.acc.delta_p += self.acc.delta_v * dt + r * a * (0.5 * dt * dt);
        self.acc.delta_v += r * a * dt;
        self.acc.delta_r = r * dr_inc;
        self.acc.dt += dt;
        self.samples += 1;
        Ok(())
    }

    /// Emits the accumulated delta and resets for the next interval.
    pub fn finalize(&mut self) -> Result<PreintegratedDelta, VioError> {
        if self.samples == 0 {
            return Err(VioError::EmptyPreintegration);
        }
        let out = std::mem::replace(&mut self.acc, PreintegratedDelta::identity(self.bg, self.ba));
        self.samples = 0;
        Ok(out)
    }
}

/// Integrates each sample over the part of `[t_start_ns, t_end_ns)` it covers:
/// sample k spans from `max(t_k, t_start)` to `min(t_{k+1}, t_end)`, and the
/// last sample extends to `t_end`.
pub fn integrate_window(
    pre: &mut Preintegrator,
    samples: &[ImuSample],
    t_start_ns: i64,
    t_end_ns: i64,
) -> Result<(), VioError> {
    for (k, sample) in samples.iter().enumerate() {
        let span_start = sample.t_ns.max(t_start_ns);
        let span_end = match samples.get(k + 1) {
            Some(next) => next.t_ns.min(t_end_ns),
            None => t_end_ns,
        };
        if span_end > span_start {
            pre.integrate_sample(sample, (span_end - span_start) as f64 * 1e-9)?;
        }
    }
    Ok(())
}

/// Rotation-only integration of gyro samples over a time window, used to seed
/// tracking and outlier rejection between consecutive frames.
pub fn gyro_delta_rotation(
    samples: &[ImuSample],
    bg: &Vector3<f64>,
    t_start_ns: i64,
    t_end_ns: i64,
) -> Matrix3<f64> {
    let mut r = Matrix3::identity();
    for (k, sample) in samples.iter().enumerate() {
        let span_start = sample.t_ns.max(t_start_ns);
        let span_end = match samples.get(k + 1) {
            Some(next) => next.t_ns.min(t_end_ns),
            None => t_end_ns,
        };
        if span_end > span_start {
            let dt = (span_end - span_start) as f64 * 1e-9;
            r *= so3_exp(&((sample.gyro - bg) * dt));
        }
    }
    r
}
