//! Gyro-aided geometric verification of feature tracks.
//!
//! Between two keyframes the rotation dR is already known from gyroscope
//! integration, which shrinks the relative-pose problem to the
//! translation alone and the minimal sample from five correspondences to
//! two (mono) or one (stereo).
//!
//! Mono: with bearings x = dR x_prev and x' = x_cur, the epipolar
//! constraint x'^T [t]x x = 0 rewrites as (x cross x') . t = 0, one
//! linear constraint on t per correspondence. Two correspondences give
//! t as the cross product of their constraint rows, the null direction
//! of the stacked system. Inliers are scored by distance to the epipolar
//! line of E = [t]x dR. Under pure rotation every constraint row
//! degenerates to zero and no hypothesis survives, so the fallback
//! accepts the rotation-only model when it explains at least as many
//! points as the best epipolar hypothesis.
//!
//! Stereo: each correspondence is a triangulated 3D point seen in both
//! keyframes, so a single pair hypothesizes the full metric translation
//! t = p_cur - dR p_prev, scored by 3D distance.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::VioError;
use crate::geometry::so3_hat;

use super::VfeConfig;

/// Consensus outcome: surviving correspondence indices and the
/// translation hypothesis that produced them. Mono translations are unit
/// direction only; stereo translations are metric. `rotation_only` marks
/// the mono degenerate case where no translation is observable.
#[derive(Debug, Clone)]
pub struct RansacResult {
    pub inliers: Vec<usize>,
    pub translation: Vector3<f64>,
    pub rotation_only: bool,
}

fn homogeneous(p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

/// Distance of `x_cur` from the epipolar line of `x_prev` under E, in
/// normalized image units.
fn epipolar_distance(e: &Matrix3<f64>, x_prev: &Vector3<f64>, x_cur: &Vector3<f64>) -> f64 {
    let l = e * x_prev;
    let denom = (l.x * l.x + l.y * l.y).sqrt();
    if denom < 1e-15 {
        return f64::INFINITY;
    }
    (x_cur.dot(&l)).abs() / denom
}

/// Transfer error of the rotation-only model in normalized image units.
fn rotation_only_residual(
    delta_r: &Matrix3<f64>,
    prev: &Vector2<f64>,
    cur: &Vector2<f64>,
) -> f64 {
    let x = delta_r * homogeneous(prev);
    if x.z.abs() < 1e-12 {
        return f64::INFINITY;
    }
    (Vector2::new(x.x / x.z, x.y / x.z) - cur).norm()
}

/// Two-point RANSAC for monocular tracks. `prev` and `cur` are
/// normalized image coordinates of the same features in the previous and
/// current keyframe; `delta_r` rotates previous-camera vectors into the
/// current camera; `focal` converts the configured pixel threshold into
/// normalized units; `seed` fixes the sample sequence.
pub fn mono_ransac_2pt(
    prev: &[Vector2<f64>],
    cur: &[Vector2<f64>],
    delta_r: &Matrix3<f64>,
    focal: f64,
    cfg: &VfeConfig,
    seed: u64,
) -> Result<RansacResult, VioError> {
    assert_eq!(prev.len(), cur.len());
    let n = prev.len();
    if n < 2 {
        return Err(VioError::InsufficientData { needed: 2, got: n });
    }
    let threshold = cfg.ransac_threshold_px / focal;
    let h_prev: Vec<Vector3<f64>> = prev.iter().map(homogeneous).collect();
    let x_prev: Vec<Vector3<f64>> = h_prev.iter().map(|h| delta_r * h).collect();
    let x_cur: Vec<Vector3<f64>> = cur.iter().map(homogeneous).collect();
    // Constraint rows c . t = 0.
    let rows: Vec<Vector3<f64>> = x_prev
        .iter()
        .zip(&x_cur)
        .map(|(a, b)| a.cross(b))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    let mut best_t = Vector3::zeros();
    for _ in 0..cfg.mono_ransac_iters {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let t = rows[i].cross(&rows[j]);
        if t.norm() < 1e-12 {
            // Degenerate sample: both rows vanish (no parallax) or are
            // parallel. No usable hypothesis.
            continue;
        }
        let t = t / t.norm();
        let e = so3_hat(&t) * delta_r;
        let inliers: Vec<usize> = (0..n)
            .filter(|&k| epipolar_distance(&e, &h_prev[k], &x_cur[k]) < threshold)
            .collect();
        if inliers.len() > best.len() {
            best = inliers;
            best_t = t;
        }
    }

    // Rotation-only fallback: wins whenever translation is unobservable.
    let rot_inliers: Vec<usize> = (0..n)
        .filter(|&k| rotation_only_residual(delta_r, &prev[k], &cur[k]) < threshold)
        .collect();
    if rot_inliers.len() >= best.len() {
        return Ok(RansacResult {
            inliers: rot_inliers,
            translation: Vector3::zeros(),
            rotation_only: true,
        });
    }
    Ok(RansacResult {
        inliers: best,
        translation: best_t,
        rotation_only: false,
    })
}

/// One-point RANSAC for stereo tracks. `prev` and `cur` are triangulated
/// camera-frame points of the same landmarks in the previous and current
/// keyframe; `delta_r` rotates previous-camera vectors into the current
/// camera.
pub fn stereo_ransac_1pt(
    prev: &[Vector3<f64>],
    cur: &[Vector3<f64>],
    delta_r: &Matrix3<f64>,
    cfg: &VfeConfig,
    seed: u64,
) -> Result<RansacResult, VioError> {
    assert_eq!(prev.len(), cur.len());
    let n = prev.len();
    if n == 0 {
        return Err(VioError::InsufficientData { needed: 1, got: 0 });
    }
    let rotated: Vec<Vector3<f64>> = prev.iter().map(|p| delta_r * p).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    let mut best_t = Vector3::zeros();
    for _ in 0..cfg.stereo_ransac_iters {
        let i = rng.random_range(0..n);
        let t = cur[i] - rotated[i];
        let inliers: Vec<usize> = (0..n)
            .filter(|&k| (cur[k] - rotated[k] - t).norm() < cfg.stereo_threshold_m)
            .collect();
        if inliers.len() > best.len() {
            best = inliers;
            best_t = t;
        }
    }
    // Refit on the consensus set: the mean translation over inliers.
    if !best.is_empty() {
        let sum: Vector3<f64> = best.iter().map(|&k| cur[k] - rotated[k]).sum();
        best_t = sum / best.len() as f64;
    }
    Ok(RansacResult {
        inliers: best,
        translation: best_t,
        rotation_only: false,
    })
}
