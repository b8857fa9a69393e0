//! Grid-distributed Shi-Tomasi corner detection.
//!
//! The corner score at a pixel is the minimum eigenvalue of the gradient
//! covariance summed over its 3x3 neighborhood,
//!
//!   G = sum [Ix^2, IxIy; IxIy, Iy^2],  score = lambda_min(G),
//!
//! with central-difference gradients. The frame is divided into a fixed
//! grid of cells and each cell contributes at most one candidate, its
//! score maximum, which both bounds the candidate count by the cell count
//! and spreads detections across the frame. Selection then fills the
//! least-populated cells first and drops candidates within a suppression
//! radius of a feature that is already tracked or already chosen.

use nalgebra::Vector2;

use super::pyramid::GrayImage;
use super::VfeConfig;

/// A per-cell score maximum proposed for selection.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub px: Vector2<f64>,
    pub score: f64,
    pub cell: usize,
}

/// Min-eigenvalue corner score for every pixel. A two-pixel border is
/// zero: gradients need one neighbor and the window one more.
pub fn shi_tomasi_scores(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut ix = vec![0.0f64; w * h];
    let mut iy = vec![0.0f64; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let xi = x as isize;
            let yi = y as isize;
            ix[y * w + x] = (img.at(xi + 1, yi) as f64 - img.at(xi - 1, yi) as f64) * 0.5;
            iy[y * w + x] = (img.at(xi, yi + 1) as f64 - img.at(xi, yi - 1) as f64) * 0.5;
        }
    }
    let mut scores = vec![0.0f64; w * h];
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for wy in y - 1..=y + 1 {
                for wx in x - 1..=x + 1 {
                    let gx = ix[wy * w + wx];
                    let gy = iy[wy * w + wx];
                    a += gx * gx;
                    b += gx * gy;
                    c += gy * gy;
                }
            }
            let half = (a + c) * 0.5;
            let d = (a - c) * 0.5;
            scores[y * w + x] = half - (d * d + b * b).sqrt();
        }
    }
    scores
}

fn cell_of(px: &Vector2<f64>, w: usize, h: usize, cfg: &VfeConfig) -> usize {
    let cw = w as f64 / cfg.grid_cols as f64;
    let ch = h as f64 / cfg.grid_rows as f64;
    let col = ((px.x / cw) as usize).min(cfg.grid_cols - 1);
    let row = ((px.y / ch) as usize).min(cfg.grid_rows - 1);
    row * cfg.grid_cols + col
}

/// Per-cell score maxima above the detection floor; at most one candidate
/// per grid cell.
pub fn grid_candidates(img: &GrayImage, cfg: &VfeConfig) -> Vec<Candidate> {
    let (w, h) = (img.width(), img.height());
    let scores = shi_tomasi_scores(img);
    let cells = cfg.grid_cols * cfg.grid_rows;
    let mut best: Vec<Option<(usize, usize, f64)>> = vec![None; cells];
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let s = scores[y * w + x];
            if s <= cfg.min_corner_score {
                continue;
            }
            let cell = cell_of(&Vector2::new(x as f64, y as f64), w, h, cfg);
            if best[cell].is_none_or(|(_, _, bs)| s > bs) {
                best[cell] = Some((x, y, s));
            }
        }
    }
    best.iter()
        .enumerate()
        .filter_map(|(cell, slot)| {
            slot.map(|(x, y, score)| Candidate {
                px: Vector2::new(x as f64, y as f64),
                score,
                cell,
            })
        })
        .collect()
}

/// Picks up to `needed` new feature positions. Cells holding the fewest
/// existing features are served first; within equal population, stronger
/// corners win. A candidate inside the suppression radius of an existing
/// or already-selected feature is skipped. A textureless frame simply
/// yields fewer positions than requested.
pub fn detect_features(
    img: &GrayImage,
    existing: &[Vector2<f64>],
    needed: usize,
    cfg: &VfeConfig,
) -> Vec<Vector2<f64>> {
    let (w, h) = (img.width(), img.height());
    let mut candidates = grid_candidates(img, cfg);
    let mut population = vec![0usize; cfg.grid_cols * cfg.grid_rows];
    for f in existing {
        population[cell_of(f, w, h, cfg)] += 1;
    }
    candidates.sort_by(|l, r| {
        population[l.cell]
            .cmp(&population[r.cell])
            .then(r.score.total_cmp(&l.score))
            .then(l.cell.cmp(&r.cell))
    });
    let r2 = cfg.suppression_radius * cfg.suppression_radius;
    let mut picked: Vec<Vector2<f64>> = Vec::new();
    for c in &candidates {
        if picked.len() == needed {
            break;
        }
        let clear = existing
            .iter()
            .chain(picked.iter())
            .all(|f| (f - c.px).norm_squared() >= r2);
        if clear {
            picked.push(c.px);
        }
    }
    picked
}
