//! SO(3) primitives, keyframe state algebra, and the camera model.
//!
//! Rotations are plain `Matrix3<f64>` kept orthonormal by construction. The
//! exponential map uses the Rodrigues formula
//!
//! ```text
//! exp(w^) = I + sin(t)/t * w^ + (1 - cos(t))/t^2 * (w^)^2,   t = |w|
//! ```
//!
//! with the usual series fallbacks below `SMALL_ANGLE`. The logarithm handles
//! the near-pi branch by extracting the axis from the symmetric part of R,
//! where the skew part loses precision.
//!
//! A keyframe state is the 15-DoF tuple (R, p, v, bg, ba). Its tangent layout
//! is fixed crate-wide as
//!
//! ```text
//! [ d_theta (0..3) | d_p (3..6) | d_v (6..9) | d_bg (9..12) | d_ba (12..15) ]
//! ```
//!
//! and the retraction perturbs the attitude on the right: R <- R * exp(d_theta^).
//! Every Jacobian in the backend is written against this convention.

use nalgebra::{Matrix3, SVector, Vector2, Vector3};

/// Angles below this are evaluated with truncated series.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Tangent dimension of one keyframe state.
pub const STATE_DOF: usize = 15;

pub type StateVector = SVector<f64, STATE_DOF>;

/// Skew-symmetric matrix such that `hat(w) * v = w x v`.
pub fn so3_hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`so3_hat`] on skew-symmetric input.
pub fn so3_vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues exponential map.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let hat = so3_hat(w);
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + hat * a + hat * hat * b
}

/// Logarithm map; the returned angle lies in `[0, pi]`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < SMALL_ANGLE {
        // log ~= 0.5 * (1 + theta^2/6) * vee(R - R^T)
        return skew * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near pi the skew part vanishes and acos of the trace loses half its
        // digits, so take the angle from |vee(R - R^T)| = 2 sin t instead and
        // the axis from a a^T = I + (sym(R) - I) / (1 - cos t).
        let theta = std::f64::consts::PI - (skew.norm() * 0.5).min(1.0).asin();
        let outer =
            Matrix3::identity() + ((r + r.transpose()) * 0.5 - Matrix3::identity()) / (1.0 - cos_theta);
        let k = (0..3)
            .max_by(|&i, &j| outer[(i, i)].total_cmp(&outer[(j, j)]))
            .unwrap();
        let mut axis = outer.column(k).normalize();
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    skew * (theta / (2.0 * theta.sin()))
}

/// Right Jacobian of SO(3): `exp(w + dw) ~= exp(w) exp(Jr(w) dw)`.
pub fn so3_right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let hat = so3_hat(w);
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() - hat * a + hat * hat * b
}

/// Inverse of the right Jacobian, valid for `|w| < pi`.
pub fn so3_right_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let hat = so3_hat(w);
    let b = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + hat * 0.5 + hat * hat * b
}

/// Rigid transform used for camera extrinsics and ground-truth poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        Pose { r, t }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.transpose();
        Pose {
            r: rt,
            t: -(rt * self.t),
        }
    }

    /// `self * other`, composing maps applied right to left.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: self.r * other.r,
            t: self.r * other.t + self.t,
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }
}

/// Full 15-DoF keyframe state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KFState {
    pub r: Matrix3<f64>,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub bg: Vector3<f64>,
    pub ba: Vector3<f64>,
}

impl KFState {
    pub fn identity() -> Self {
        KFState {
            r: Matrix3::identity(),
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            bg: Vector3::zeros(),
            ba: Vector3::zeros(),
        }
    }

    /// Applies a tangent increment in the crate-wide layout.
    pub fn retract(&self, delta: &StateVector) -> KFState {
        let d_theta = Vector3::new(delta[0], delta[1], delta[2]);
        KFState {
            r: self.r * so3_exp(&d_theta),
            p: self.p + Vector3::new(delta[3], delta[4], delta[5]),
            v: self.v + Vector3::new(delta[6], delta[7], delta[8]),
            bg: self.bg + Vector3::new(delta[9], delta[10], delta[11]),
            ba: self.ba + Vector3::new(delta[12], delta[13], delta[14]),
        }
    }

    /// Tangent difference such that `other.retract(&self.boxminus(&other)) == self`.
    pub fn boxminus(&self, other: &KFState) -> StateVector {
        let d_theta = so3_log(&(other.r.transpose() * self.r));
        let mut out = StateVector::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&d_theta);
        out.fixed_rows_mut::<3>(3).copy_from(&(self.p - other.p));
        out.fixed_rows_mut::<3>(6).copy_from(&(self.v - other.v));
        out.fixed_rows_mut::<3>(9).copy_from(&(self.bg - other.bg));
        out.fixed_rows_mut::<3>(12).copy_from(&(self.ba - other.ba));
        out
    }

    pub fn pose(&self) -> Pose {
        Pose {
            r: self.r,
            t: self.p,
        }
    }
}

/// Pinhole intrinsics with radial-tangential distortion `[k1, k2, p1, p2]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub distortion: [f64; 4],
}

impl CameraIntrinsics {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            distortion: [0.0; 4],
        }
    }

    /// Applies distortion to normalized image coordinates.
    pub fn distort(&self, n: &Vector2<f64>) -> Vector2<f64> {
        let [k1, k2, p1, p2] = self.distortion;
        let (x, y) = (n.x, n.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
        Vector2::new(
            x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
            y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y,
        )
    }

    /// Inverts [`Self::distort`] by Newton iteration.
    pub fn undistort(&self, d: &Vector2<f64>) -> Vector2<f64> {
        let [k1, k2, p1, p2] = self.distortion;
        let mut n = *d;
        for _ in 0..12 {
            let (x, y) = (n.x, n.y);
            let r2 = x * x + y * y;
            let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
            let d_radial = 2.0 * k1 + 4.0 * k2 * r2;
            let jac = nalgebra::Matrix2::new(
                radial + x * x * d_radial + 2.0 * p1 * y + 6.0 * p2 * x,
                x * y * d_radial + 2.0 * p1 * x + 2.0 * p2 * y,
                x * y * d_radial + 2.0 * p1 * x + 2.0 * p2 * y,
                radial + y * y * d_radial + 6.0 * p1 * y + 2.0 * p2 * x,
            );
            let residual = self.distort(&n) - d;
            let Some(inv) = jac.try_inverse() else { break };
            let step = inv * residual;
            n -= step;
            if step.norm() < 1e-15 {
                break;
            }
        }
        n
    }

    /// Projects a camera-frame point to distorted pixel coordinates.
    /// Returns `None` for points at or behind the image plane.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p_cam.z <= 1e-9 {
            return None;
        }
        let n = Vector2::new(p_cam.x / p_cam.z, p_cam.y / p_cam.z);
        let d = self.distort(&n);
        Some(Vector2::new(
            self.fx * d.x + self.cx,
            self.fy * d.y + self.cy,
        ))
    }

    /// Pixel coordinates to a unit-depth ray in the camera frame.
    pub fn unproject(&self, px: &Vector2<f64>) -> Vector3<f64> {
        let d = Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy);
        let n = self.undistort(&d);
        Vector3::new(n.x, n.y, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Truncated matrix power series, the independent oracle for `so3_exp`.
    fn exp_series(w: &Vector3<f64>) -> Matrix3<f64> {
        let hat = so3_hat(w);
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for k in 1..=30 {
            term = term * hat / k as f64;
            sum += term;
        }
        sum
    }

    fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 {
                return v / n;
            }
        }
    }

    #[test]
    fn exp_matches_power_series() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for theta in [1e-12, 1e-9, 1e-6, 0.1, 1.0, 2.0, 3.0, 3.1384] {
            for _ in 0..20 {
                let w = random_unit(&mut rng) * theta;
                let r = so3_exp(&w);
                assert_relative_eq!(r, exp_series(&w), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn exp_is_orthonormal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let w = random_unit(&mut rng) * rng.random_range(0.0..std::f64::consts::PI);
            let r = so3_exp(&w);
            assert_relative_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-13);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn log_recovers_axis_near_pi() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for delta in [1e-9, 1e-7, 1e-5, 1e-3] {
            for _ in 0..20 {
                let w = random_unit(&mut rng) * (std::f64::consts::PI - delta);
                let back = so3_log(&so3_exp(&w));
                assert_relative_eq!(back, w, epsilon = 1e-4, max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn log_at_exactly_pi_is_consistent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let w = random_unit(&mut rng) * std::f64::consts::PI;
            let back = so3_log(&so3_exp(&w));
            // Axis sign is ambiguous at pi; exp must agree either way.
            assert_relative_eq!(so3_exp(&back), so3_exp(&w), epsilon = 1e-9);
            assert_relative_eq!(back.norm(), std::f64::consts::PI, epsilon = 1e-7);
        }
    }

    #[test]
    fn right_jacobian_matches_finite_difference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..50 {
            let w = random_unit(&mut rng) * rng.random_range(0.01..2.9);
            let jr = so3_right_jacobian(&w);
            for k in 0..3 {
                let mut dw = Vector3::zeros();
                dw[k] = h;
                let lhs = so3_log(&(so3_exp(&w).transpose() * so3_exp(&(w + dw))));
                assert_relative_eq!(lhs / h, jr.column(k).into_owned(), epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn right_jacobian_inverse_is_inverse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for theta in [1e-10, 1e-5, 0.5, 2.0, 3.0] {
            for _ in 0..10 {
                let w = random_unit(&mut rng) * theta;
                let prod = so3_right_jacobian_inv(&w) * so3_right_jacobian(&w);
                assert_relative_eq!(prod, Matrix3::identity(), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn retract_boxminus_roundtrip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let base = KFState {
                r: so3_exp(&(random_unit(&mut rng) * rng.random_range(0.0..3.0))),
                p: random_unit(&mut rng) * 5.0,
                v: random_unit(&mut rng),
                bg: random_unit(&mut rng) * 0.01,
                ba: random_unit(&mut rng) * 0.1,
            };
            let mut delta = StateVector::zeros();
            for i in 0..STATE_DOF {
                delta[i] = rng.random_range(-0.5..0.5);
            }
            let moved = base.retract(&delta);
            assert_relative_eq!(moved.boxminus(&base), delta, epsilon = 1e-12);
        }
    }

    #[test]
    fn pose_compose_inverse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let a = Pose::new(
                so3_exp(&(random_unit(&mut rng) * 1.5)),
                random_unit(&mut rng) * 3.0,
            );
            let p = random_unit(&mut rng) * 10.0;
            let back = a.inverse().transform(&a.transform(&p));
            assert_relative_eq!(back, p, epsilon = 1e-12);
            let id = a.compose(&a.inverse());
            assert_relative_eq!(id.r, Matrix3::identity(), epsilon = 1e-12);
            assert_relative_eq!(id.t, Vector3::zeros(), epsilon = 1e-12);
        }
    }

    #[test]
    fn camera_project_unproject_roundtrip() {
        let cam = CameraIntrinsics {
            fx: 458.654,
            fy: 457.296,
            cx: 367.215,
            cy: 248.375,
            distortion: [-0.28340811, 0.07395907, 0.00019359, 1.76187114e-05],
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        for _ in 0..200 {
            let p = Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.3..0.3),
                1.0,
            ) * rng.random_range(0.5..20.0);
            let Some(px) = cam.project(&p) else { continue };
            let ray = cam.unproject(&px);
            let dir = p / p.z;
            assert_relative_eq!(ray, dir, epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn exp_log_roundtrip(
            ax in -1.0f64..1.0,
            ay in -1.0f64..1.0,
            az in -1.0f64..1.0,
            theta in 0.0f64..3.13,
        ) {
            let v = Vector3::new(ax, ay, az);
            prop_assume!(v.norm() > 1e-3);
            let w = v.normalize() * theta;
            let back = so3_log(&so3_exp(&w));
            prop_assert!((back - w).norm() < 1e-9 * (1.0 + theta));
        }

        #[test]
        fn hat_vee_roundtrip(x in -10.0f64..10.0, y in -10.0f64..10.0, z in -10.0f64..10.0) {
            let w = Vector3::new(x, y, z);
            prop_assert_eq!(so3_vee(&so3_hat(&w)), w);
        }
    }
}
