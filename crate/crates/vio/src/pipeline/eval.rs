//! Trajectory accuracy evaluation.
//!
//! The estimate and the ground truth live in different world frames: the
//! estimator anchors its first keyframe at the origin with gravity-aligned
//! attitude and arbitrary heading. Evaluation therefore aligns the two
//! position sequences before differencing, in two ways:
//!
//! * a full rigid fit (Kabsch/Umeyama without scale), the classical
//!   absolute trajectory error;
//! * a yaw-plus-translation fit, which removes only the four degrees of
//!   freedom a gravity-observing estimator genuinely cannot recover.
//!
//! For centered point sets a, b the yaw fit maximizes sum b_i^T Rz(t) a_i,
//! giving t* = atan2(sum (a x b)_z, sum (ax bx + ay by)). ATE is the RMSE
//! of aligned position residuals; the normalized error divides the
//! yaw-aligned ATE by the ground-truth path length over the evaluated
//! span, in percent.

use nalgebra::{Matrix3, Vector3};

use crate::dataset::GroundTruth;
use crate::error::VioError;

/// Alignment-based error figures for one estimated trajectory.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TrajectoryError {
    /// Timestamped positions with ground truth available.
    pub pairs: usize,
    /// RMSE after a full rigid alignment, meters.
    pub ate_rmse_se3: f64,
    /// RMSE after yaw-and-translation alignment, meters.
    pub ate_rmse_yaw: f64,
    /// Ground-truth path length over the evaluated span, meters.
    pub path_length: f64,
    /// 100 * ate_rmse_yaw / path_length.
    pub normalized_pct: f64,
}

/// Best rigid fit `b ~ R a + t` over paired points, no scale.
fn fit_se3(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (pa, pb) in a.iter().zip(b) {
        h += (pa - ca) * (pb - cb).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum())) * u.transpose();
    (r, cb - r * ca)
}

/// Best fit `b ~ Rz(t) a + t` over paired points.
fn fit_yaw(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let (mut cross, mut dot) = (0.0, 0.0);
    for (pa, pb) in a.iter().zip(b) {
        let (qa, qb) = (pa - ca, pb - cb);
        cross += qa.x * qb.y - qa.y * qb.x;
        dot += qa.x * qb.x + qa.y * qb.y;
    }
    let theta = cross.atan2(dot);
    let (s, c) = theta.sin_cos();
    let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    (r, cb - r * ca)
}

fn rmse(a: &[Vector3<f64>], b: &[Vector3<f64>], r: &Matrix3<f64>, t: &Vector3<f64>) -> f64 {
    let ss: f64 = a
        .iter()
        .zip(b)
        .map(|(pa, pb)| (r * pa + t - pb).norm_squared())
        .sum();
    (ss / a.len() as f64).sqrt()
}

/// Aligns the estimated positions to ground truth and reports ATE figures.
///
/// Only timestamps the ground truth spans are evaluated; fewer than two
/// such pairs is an error because no alignment exists.
pub fn evaluate_trajectory(
    est: &[(i64, Vector3<f64>)],
    gt: &GroundTruth,
) -> Result<TrajectoryError, VioError> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (t_ns, p) in est {
        if let Some(pose) = gt.pose_at(*t_ns) {
            a.push(*p);
            b.push(pose.t);
        }
    }
    if a.len() < 2 {
        return Err(VioError::InsufficientData {
            needed: 2,
            got: a.len(),
        });
    }
    let (r_se3, t_se3) = fit_se3(&a, &b);
    let (r_yaw, t_yaw) = fit_yaw(&a, &b);
    let path_length: f64 = b.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let ate_rmse_yaw = rmse(&a, &b, &r_yaw, &t_yaw);
    Ok(TrajectoryError {
        pairs: a.len(),
        ate_rmse_se3: rmse(&a, &b, &r_se3, &t_se3),
        ate_rmse_yaw,
        path_length,
        normalized_pct: 100.0 * ate_rmse_yaw / path_length.max(1e-9),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GroundTruthSample;
    use approx::assert_relative_eq;

    /// Helix ground truth sampled at 10 Hz, generic enough that no
    /// alignment degeneracy hides a sign error.
    fn helix_gt(n: usize) -> GroundTruth {
        let samples = (0..n)
            .map(|k| {
                let t = k as f64 * 0.1;
                GroundTruthSample {
                    t_ns: (t * 1e9) as i64,
                    p: Vector3::new((0.7 * t).cos(), (0.7 * t).sin(), 0.2 * t),
                    r: Matrix3::identity(),
                    v: Vector3::zeros(),
                }
            })
            .collect();
        GroundTruth { samples }
    }

    fn gt_positions(gt: &GroundTruth) -> Vec<(i64, Vector3<f64>)> {
        gt.samples.iter().map(|s| (s.t_ns, s.p)).collect()
    }

    #[test]
    fn exact_estimate_scores_zero() {
        let gt = helix_gt(40);
        let est = gt_positions(&gt);
        let e = evaluate_trajectory(&est, &gt).unwrap();
        assert_eq!(e.pairs, 40);
        assert!(e.ate_rmse_se3 < 1e-12);
        assert!(e.ate_rmse_yaw < 1e-12);
        assert!(e.normalized_pct < 1e-10);
    }

    #[test]
    fn constant_offset_is_absorbed() {
        let gt = helix_gt(40);
        let est: Vec<_> = gt_positions(&gt)
            .into_iter()
            .map(|(t, p)| (t, p + Vector3::new(3.0, -2.0, 0.5)))
            .collect();
        let e = evaluate_trajectory(&est, &gt).unwrap();
        assert!(e.ate_rmse_se3 < 1e-12);
        assert!(e.ate_rmse_yaw < 1e-12);
    }

    #[test]
    fn yaw_and_offset_are_absorbed_by_both_fits() {
        let gt = helix_gt(40);
        let (s, c) = 1.1f64.sin_cos();
        let rz = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let est: Vec<_> = gt_positions(&gt)
            .into_iter()
            .map(|(t, p)| (t, rz.transpose() * (p - Vector3::new(1.0, 2.0, 3.0))))
            .collect();
        let e = evaluate_trajectory(&est, &gt).unwrap();
        assert!(e.ate_rmse_se3 < 1e-9, "se3 {}", e.ate_rmse_se3);
        assert!(e.ate_rmse_yaw < 1e-9, "yaw {}", e.ate_rmse_yaw);
    }

    #[test]
    fn tilt_is_absorbed_only_by_the_full_fit() {
        let gt = helix_gt(40);
        let (s, c) = 0.3f64.sin_cos();
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c);
        let est: Vec<_> = gt_positions(&gt)
            .into_iter()
            .map(|(t, p)| (t, rx * p))
            .collect();
        let e = evaluate_trajectory(&est, &gt).unwrap();
        assert!(e.ate_rmse_se3 < 1e-9);
        assert!(e.ate_rmse_yaw > 0.05, "tilt must survive yaw fit: {}", e.ate_rmse_yaw);
    }

    #[test]
    fn straight_line_path_length_and_normalization() {
        let samples = (0..10)
            .map(|k| GroundTruthSample {
                t_ns: k as i64 * 1_000_000_000,
                p: Vector3::new(k as f64, 0.0, 0.0),
                r: Matrix3::identity(),
                v: Vector3::zeros(),
            })
            .collect();
        let gt = GroundTruth { samples };
        let est = gt_positions(&gt);
        let e = evaluate_trajectory(&est, &gt).unwrap();
        assert_relative_eq!(e.path_length, 9.0, epsilon = 1e-12);
        assert!(e.normalized_pct < 1e-10);
    }

    #[test]
    fn too_little_overlap_is_an_error() {
        let gt = helix_gt(40);
        // One timestamp inside the span, the rest far past its end.
        let est = vec![
            (0, Vector3::zeros()),
            (1_000_000_000_000, Vector3::new(1.0, 0.0, 0.0)),
            (2_000_000_000_000, Vector3::new(2.0, 0.0, 0.0)),
        ];
        match evaluate_trajectory(&est, &gt) {
            Err(VioError::InsufficientData { needed: 2, got }) => assert!(got < 2),
            other => panic!("expected overlap error, got {other:?}"),
        }
    }

    #[test]
    fn known_perturbation_matches_hand_rmse() {
        // Symmetric +-d vertical zigzag on a long straight line: centroids
        // match, the optimal yaw stays zero, so RMSE is exactly d.
        let n = 40;
        let samples: Vec<_> = (0..n)
            .map(|k| GroundTruthSample {
                t_ns: k as i64 * 1_000_000_000,
                p: Vector3::new(k as f64, 0.0, 0.0),
                r: Matrix3::identity(),
                v: Vector3::zeros(),
            })
            .collect();
        let gt = GroundTruth { samples };
        let d = 0.02;
        let est: Vec<_> = gt_positions(&gt)
            .into_iter()
            .enumerate()
            .map(|(k, (t, p))| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                (t, p + Vector3::new(0.0, 0.0, sign * d))
            })
            .collect();
        let e = evaluate_trajectory(&est, &gt).unwrap();
        assert_relative_eq!(e.ate_rmse_yaw, d, epsilon = 1e-12);
        assert_relative_eq!(e.normalized_pct, 100.0 * d / 39.0, epsilon = 1e-9);
    }
}
