//! Stereo template matching and triangulation.
//!
//! A 51x5 template around the feature in the left frame slides along the
//! same rows of the right frame, one SAD score per integer disparity.
//! Both frames are read through [`PixelSource`], so the matcher runs
//! unchanged whether frames live raw in memory or only in compressed
//! form with pixels decoded on the fly. Disparity is one-sided: scene
//! content can only shift left in the right image. The best score wins,
//! refined to subpixel by a parabola through the three scores around the
//! minimum,
//!
//!   d* = d + (s[d-1] - s[d+1]) / (2 (s[d-1] - 2 s[d] + s[d+1])),
//!
//! and a ratio test against the best score at least two pixels away
//! rejects ambiguous matches, which also covers textureless regions where
//! every score ties.

use nalgebra::{Vector2, Vector3};

use crate::error::VioError;
use crate::framecodec::{CompressedFrame, Frame};
use crate::geometry::CameraIntrinsics;

use super::pyramid::GrayImage;
use super::VfeConfig;

/// An 8-bit pixel grid the matcher can read: raw frames, compressed
/// frames decoded per pixel, and float images rounded back to intensity.
pub trait PixelSource {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn pixel(&self, x: usize, y: usize) -> u8;
}

impl PixelSource for Frame {
    fn width(&self) -> usize {
        self.width()
    }

    fn height(&self) -> usize {
        self.height()
    }

    fn pixel(&self, x: usize, y: usize) -> u8 {
        self.pixel(x, y)
    }
}

impl PixelSource for CompressedFrame {
    fn width(&self) -> usize {
        self.width()
    }

    fn height(&self) -> usize {
        self.height()
    }

    fn pixel(&self, x: usize, y: usize) -> u8 {
        self.decode_pixel(x, y)
    }
}

impl PixelSource for GrayImage {
    fn width(&self) -> usize {
        self.width()
    }

    fn height(&self) -> usize {
        self.height()
    }

    fn pixel(&self, x: usize, y: usize) -> u8 {
        self.at(x as isize, y as isize).round().clamp(0.0, 255.0) as u8
    }
}

/// Reads the rows `v-half_h ..= v+half_h`, columns `x0 .. x0+w` of a
/// frame into a flat strip buffer.
fn decode_strip<S: PixelSource>(frame: &S, x0: usize, v: usize, w: usize, half_h: usize) -> Vec<i32> {
    let mut out = Vec::with_capacity(w * (2 * half_h + 1));
    for y in v - half_h..=v + half_h {
        for x in x0..x0 + w {
            out.push(frame.pixel(x, y) as i32);
        }
    }
    out
}

/// Matches the left feature at `px` against the right frame along its
/// row. Returns the subpixel disparity, or None when the template or
/// search region cannot be placed, or the match is ambiguous.
pub fn stereo_match<S: PixelSource>(
    left: &S,
    right: &S,
    px: &Vector2<f64>,
    cfg: &VfeConfig,
) -> Option<f64> {
    let (w, h) = (left.width(), left.height());
    let half_w = cfg.template_width / 2;
    let half_h = cfg.template_height / 2;
    let ru = px.x.round() as i64;
    let rv = px.y.round() as i64;
    if rv < half_h as i64
        || rv + (half_h as i64) >= h as i64
        || ru < half_w as i64
        || ru + (half_w as i64) >= w as i64
    {
        return None;
    }
    let (ru, rv) = (ru as usize, rv as usize);
    // Largest disparity that keeps the right window inside the frame and
    // the scan inside the configured search width.
    let max_disp = (cfg.search_width - cfg.template_width).min(ru - half_w);
    let tw = cfg.template_width;
    let tpl = decode_strip(left, ru - half_w, rv, tw, half_h);
    let strip = decode_strip(right, ru - max_disp - half_w, rv, tw + max_disp, half_h);
    let strip_w = tw + max_disp;
    let rows = 2 * half_h + 1;

    let mut sad = vec![0i64; max_disp + 1];
    for (d, s) in sad.iter_mut().enumerate() {
        // Right window for disparity d starts at buffer column max_disp - d.
        let off = max_disp - d;
        let mut acc = 0i64;
        for r in 0..rows {
            let t = &tpl[r * tw..(r + 1) * tw];
            let c = &strip[r * strip_w + off..r * strip_w + off + tw];
            for (a, b) in t.iter().zip(c) {
                acc += (a - b).unsigned_abs() as i64;
            }
        }
        *s = acc;
    }

    let best = (0..=max_disp).min_by_key(|&d| sad[d])?;
    let second = (0..=max_disp)
        .filter(|d| d.abs_diff(best) >= 2)
        .map(|d| sad[d])
        .min()?;
    if sad[best] as f64 >= cfg.ratio_test * second as f64 {
        return None;
    }

    let mut refined = best as f64;
    if best > 0 && best < max_disp {
        let (sm, s0, sp) = (sad[best - 1] as f64, sad[best] as f64, sad[best + 1] as f64);
        let denom = sm - 2.0 * s0 + sp;
        if denom > 0.0 {
            // The integer minimum brackets the true one within half a
            // pixel; beyond that the parabola extrapolates noise.
            refined += (0.5 * (sm - sp) / denom).clamp(-0.5, 0.5);
        }
    }
    // The template was centered on the rounded pixel; shift the disparity
    // back to the true subpixel feature position.
    Some(refined + (px.x - ru as f64))
}

/// Back-projects a rectified pixel and disparity to camera coordinates:
/// z = fx b / d, then x and y along the pixel ray at that depth.
pub fn triangulate(
    px: &Vector2<f64>,
    disparity: f64,
    intr: &CameraIntrinsics,
    baseline: f64,
    min_disparity: f64,
) -> Result<Vector3<f64>, VioError> {
    if disparity <= min_disparity {
        return Err(VioError::TooFar {
            disparity,
            min: min_disparity,
        });
    }
    let z = intr.fx * baseline / disparity;
    Ok(Vector3::new(
        (px.x - intr.cx) / intr.fx * z,
        (px.y - intr.cy) / intr.fy * z,
        z,
    ))
}
