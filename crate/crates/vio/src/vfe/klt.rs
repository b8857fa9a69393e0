//! Pyramidal Lucas-Kanade feature tracking.
//!
//! For a template window W around feature position p in the previous image
//! I and a displacement d into the current image J, forward-additive LK
//! minimizes sum_{w in W} (I(p+w) - J(p+d+w))^2 by Newton steps
//!
//!   G  = sum g g^T,  g = grad I(p+w)
//!   b  = sum g (I(p+w) - J(p+d+w))
//!   d += G^{-1} b
//!
//! iterated until the update norm falls below a threshold. The solve runs
//! coarse to fine: the displacement found at pyramid level l seeds level
//! l-1 doubled, so the finest level only refines a near-integer guess. G
//! uses previous-image gradients only, so it is computed once per level.

use nalgebra::{Matrix2, Vector2};

use super::pyramid::{GrayImage, Pyramid};
use super::VfeConfig;

/// Minimum acceptable eigenvalue of G. Below this the window is too flat
/// or one-dimensional to constrain both displacement components.
const MIN_EIGENVALUE: f64 = 1e-4;

/// Mean absolute intensity residual (0..255 scale) above which a converged
/// track is rejected. Catches features whose true match left the frame and
/// the solver settled on unrelated texture.
const MAX_RESIDUAL: f64 = 10.0;

fn min_eig_2x2(g: &Matrix2<f64>) -> f64 {
    let half_trace = (g[(0, 0)] + g[(1, 1)]) * 0.5;
    let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
    half_trace - (half_trace * half_trace - det).max(0.0).sqrt()
}

fn in_bounds(img: &GrayImage, p: &Vector2<f64>, margin: f64) -> bool {
    p.x >= margin
        && p.y >= margin
        && p.x <= img.width() as f64 - 1.0 - margin
        && p.y <= img.height() as f64 - 1.0 - margin
}

/// Tracks one feature from `prev` into `cur`. Returns the new position in
/// the finest level, or None when the track is lost: the window leaves the
/// image, the normal matrix is degenerate, or the update diverges.
pub fn track_feature(
    prev: &Pyramid,
    cur: &Pyramid,
    px: &Vector2<f64>,
    cfg: &VfeConfig,
) -> Option<Vector2<f64>> {
    let half = (cfg.lk_window / 2) as isize;
    // Window plus one pixel of gradient support must stay inside.
    let margin = half as f64 + 1.0;
    let top = prev.levels() - 1;
    let mut d = Vector2::zeros();
    for level in (0..=top).rev() {
        let scale = (1 << level) as f64;
        let p = px / scale;
        let pi = prev.level(level);
        let ci = cur.level(level);
        if !in_bounds(pi, &p, margin) {
            return None;
        }
        // Template values and gradients are fixed for the level.
        let n = cfg.lk_window * cfg.lk_window;
        let mut tpl = Vec::with_capacity(n);
        let mut grad = Vec::with_capacity(n);
        let mut g = Matrix2::zeros();
        for wy in -half..=half {
            for wx in -half..=half {
                let (x, y) = (p.x + wx as f64, p.y + wy as f64);
                tpl.push(pi.sample(x, y));
                let gr = pi.gradient(x, y);
                grad.push(gr);
                g += gr * gr.transpose();
            }
        }
        if min_eig_2x2(&g) < MIN_EIGENVALUE {
            return None;
        }
        let g_inv = g.try_inverse()?;
        for _ in 0..cfg.lk_iterations {
            let q = p + d;
            if !in_bounds(ci, &q, margin) {
                return None;
            }
            let mut b = Vector2::zeros();
            let mut k = 0;
            for wy in -half..=half {
                for wx in -half..=half {
                    let diff = tpl[k] - ci.sample(q.x + wx as f64, q.y + wy as f64);
                    b += grad[k] * diff;
                    k += 1;
                }
            }
            let step = g_inv * b;
            if !step.x.is_finite() || !step.y.is_finite() {
                return None;
            }
            d += step;
            if step.norm() < cfg.lk_epsilon {
                break;
            }
        }
        if level > 0 {
            d *= 2.0;
        }
    }
    let out = px + d;
    let p0 = prev.level(0);
    let c0 = cur.level(0);
    if !in_bounds(p0, &out, margin) {
        return None;
    }
    let mut resid = 0.0;
    for wy in -half..=half {
        for wx in -half..=half {
            let (dx, dy) = (wx as f64, wy as f64);
            resid += (p0.sample(px.x + dx, px.y + dy) - c0.sample(out.x + dx, out.y + dy)).abs();
        }
    }
    if resid / (cfg.lk_window * cfg.lk_window) as f64 > MAX_RESIDUAL {
        return None;
    }
    Some(out)
}

/// Tracks every feature position; one result slot per input, None = lost.
pub fn track_features(
    prev: &Pyramid,
    cur: &Pyramid,
    features: &[Vector2<f64>],
    cfg: &VfeConfig,
) -> Vec<Option<Vector2<f64>>> {
    features
        .iter()
        .map(|px| track_feature(prev, cur, px, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framecodec::Frame;

    /// Smooth blob texture so LK has gradients everywhere and subpixel
    /// interpolation stays consistent under integer shifts.
    fn dot_frame(w: usize, h: usize, shift: (i64, i64)) -> Frame {
        let mut pixels = vec![0u8; w * h];
        for by in (12..h as i64 - 12).step_by(24) {
            for bx in (12..w as i64 - 12).step_by(24) {
                for dy in -6i64..=6 {
                    for dx in -6i64..=6 {
                        let x = bx + dx + shift.0;
                        let y = by + dy + shift.1;
                        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                            continue;
                        }
                        let r2 = (dx * dx + dy * dy) as f64;
                        let v = 220.0 * (-r2 / 8.0).exp();
                        let p = &mut pixels[y as usize * w + x as usize];
                        *p = p.saturating_add(v as u8);
                    }
                }
            }
        }
        Frame::new(w, h, pixels).unwrap()
    }

    /// Dot centers far enough from the border that the tracking window
    /// fits at every pyramid level.
    fn interior_centers(pyr: &Pyramid, cfg: &VfeConfig) -> Vec<Vector2<f64>> {
        let margin = (cfg.lk_window / 2) as f64 + 1.0;
        let (w, h) = (pyr.level(0).width(), pyr.level(0).height());
        let mut out = Vec::new();
        for by in (12..h as i64 - 12).step_by(24) {
            for bx in (12..w as i64 - 12).step_by(24) {
                let c = Vector2::new(bx as f64, by as f64);
                let ok = (0..pyr.levels()).all(|l| {
                    let p = c / (1 << l) as f64;
                    in_bounds(pyr.level(l), &p, margin)
                });
                if ok {
                    out.push(c);
                }
            }
        }
        out
    }

    #[test]
    fn identical_frames_track_to_identity() {
        let frame = dot_frame(256, 192, (0, 0));
        let cfg = VfeConfig::default();
        let pyr = Pyramid::build(&frame, cfg.pyramid_levels, cfg.lk_window).unwrap();
        let feats = interior_centers(&pyr, &cfg);
        assert!(feats.len() >= 10);
        let results = track_features(&pyr, &pyr, &feats, &cfg);
        for (f, r) in feats.iter().zip(&results) {
            let tracked = r.expect("feature lost on identical frames");
            assert!((tracked - f).norm() <= 1e-3, "drift {}", (tracked - f).norm());
        }
    }

    #[test]
    fn integer_shift_is_recovered() {
        let prev = dot_frame(256, 192, (0, 0));
        let cur = dot_frame(256, 192, (3, 2));
        let cfg = VfeConfig::default();
        let pp = Pyramid::build(&prev, cfg.pyramid_levels, cfg.lk_window).unwrap();
        let cp = Pyramid::build(&cur, cfg.pyramid_levels, cfg.lk_window).unwrap();
        let feats = interior_centers(&pp, &cfg);
        let results = track_features(&pp, &cp, &feats, &cfg);
        let mut tracked = 0;
        for (f, r) in feats.iter().zip(&results) {
            if let Some(q) = r {
                let d = q - f;
                assert!(
                    (d - Vector2::new(3.0, 2.0)).norm() <= 0.1,
                    "displacement {d:?}"
                );
                tracked += 1;
            }
        }
        assert!(tracked * 2 > feats.len());
    }

    /// One blob on a dark background; `Some` places it, `None` omits it.
    fn single_dot_frame(w: usize, h: usize, at: Option<(i64, i64)>) -> Frame {
        let mut pixels = vec![0u8; w * h];
        if let Some((bx, by)) = at {
            for dy in -6i64..=6 {
                for dx in -6i64..=6 {
                    let (x, y) = (bx + dx, by + dy);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let r2 = (dx * dx + dy * dy) as f64;
                    pixels[y as usize * w + x as usize] = (220.0 * (-r2 / 8.0).exp()) as u8;
                }
            }
        }
        Frame::new(w, h, pixels).unwrap()
    }

    #[test]
    fn feature_leaving_the_border_is_lost() {
        // The blob's new position is past the right border, so the current
        // frame shows only background; the track must come back lost, not
        // as a fabricated position.
        let prev = single_dot_frame(256, 192, Some((60, 96)));
        let cur = single_dot_frame(256, 192, None);
        let cfg = VfeConfig::default();
        let pp = Pyramid::build(&prev, cfg.pyramid_levels, cfg.lk_window).unwrap();
        let cp = Pyramid::build(&cur, cfg.pyramid_levels, cfg.lk_window).unwrap();
        let r = track_feature(&pp, &cp, &Vector2::new(60.0, 96.0), &cfg);
        assert!(r.is_none());
    }

    #[test]
    fn flat_window_is_lost() {
        let frame = Frame::new(64, 64, vec![90u8; 64 * 64]).unwrap();
        let cfg = VfeConfig::default();
        let pyr = Pyramid::build(&frame, cfg.pyramid_levels, cfg.lk_window).unwrap();
        assert!(track_feature(&pyr, &pyr, &Vector2::new(32.0, 32.0), &cfg).is_none());
    }
}
