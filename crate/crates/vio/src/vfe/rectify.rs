//! Stereo undistortion and rectification.
//!
//! Both cameras are rotated onto a common image plane whose x axis runs
//! along the baseline, so epipolar lines become horizontal and stereo
//! matching reduces to a search along one row. The shared frame follows
//! Fusiello's construction from the camera centers c0, c1 in body
//! coordinates:
//!
//!   x_new = (c1 - c0) / |c1 - c0|
//!   y_new = (z_left x x_new) / |z_left x x_new|
//!   z_new = x_new x y_new
//!
//! with z_left the left camera's optical axis. Each output camera keeps
//! its center, shares one distortion-free intrinsic matrix, and maps old
//! to new coordinates by a pure rotation. Resampling goes through
//! precomputed per-pixel remap tables (output pixel to input pixel through
//! the inverse rotation and the original distortion) with bilinear
//! interpolation, mirroring a hardware remap unit that streams table
//! entries instead of re-deriving the model per pixel.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::dataset::{CameraCalib, RigCalib};
use crate::error::VioError;
use crate::geometry::{CameraIntrinsics, Pose};

use super::pyramid::GrayImage;

/// Per-pixel lookup from output (rectified) to input (raw) coordinates.
/// Entries are NaN where the model maps the pixel behind the camera.
#[derive(Debug, Clone)]
pub struct RectifyMaps {
    pub width: usize,
    pub height: usize,
    pub map_x: Vec<f32>,
    pub map_y: Vec<f32>,
}

impl RectifyMaps {
    /// Fraction of entries that are finite and inside the source image.
    pub fn valid_fraction(&self) -> f64 {
        let mut ok = 0usize;
        for (&x, &y) in self.map_x.iter().zip(&self.map_y) {
            if x.is_finite()
                && y.is_finite()
                && x >= 0.0
                && y >= 0.0
                && x <= (self.width - 1) as f32
                && y <= (self.height - 1) as f32
            {
                ok += 1;
            }
        }
        ok as f64 / self.map_x.len() as f64
    }
}

/// Rotations and shared intrinsics produced by rectification. `rig` is
/// the equivalent distortion-free rig: same centers, rotated axes.
#[derive(Debug, Clone)]
pub struct Rectification {
    pub rig: RigCalib,
    /// Old left camera coordinates to rectified coordinates.
    pub r_left: Matrix3<f64>,
    /// Old right camera coordinates to rectified coordinates.
    pub r_right: Matrix3<f64>,
    pub left_maps: RectifyMaps,
    pub right_maps: RectifyMaps,
}

fn rotation_maps(
    cam: &CameraCalib,
    r_rect: &Matrix3<f64>,
    knew: &CameraIntrinsics,
) -> RectifyMaps {
    let (w, h) = (cam.width, cam.height);
    let mut map_x = Vec::with_capacity(w * h);
    let mut map_y = Vec::with_capacity(w * h);
    let r_inv = r_rect.transpose();
    for v in 0..h {
        for u in 0..w {
            let ray_new = Vector3::new(
                (u as f64 - knew.cx) / knew.fx,
                (v as f64 - knew.cy) / knew.fy,
                1.0,
            );
            let ray_old = r_inv * ray_new;
            if ray_old.z <= 1e-9 {
                map_x.push(f32::NAN);
                map_y.push(f32::NAN);
                continue;
            }
            let n = Vector2::new(ray_old.x / ray_old.z, ray_old.y / ray_old.z);
            let d = cam.intrinsics.distort(&n);
            map_x.push((cam.intrinsics.fx * d.x + cam.intrinsics.cx) as f32);
            map_y.push((cam.intrinsics.fy * d.y + cam.intrinsics.cy) as f32);
        }
    }
    RectifyMaps {
        width: w,
        height: h,
        map_x,
        map_y,
    }
}

/// Builds the rectified frame and remap tables for a stereo rig.
pub fn compute_rectification(rig: &RigCalib) -> Result<Rectification, VioError> {
    let cam1 = rig
        .cam1
        .as_ref()
        .ok_or_else(|| VioError::Config("rectification needs a stereo rig".into()))?;
    let c0 = rig.cam0.t_bc.t;
    let c1 = cam1.t_bc.t;
    let dx = c1 - c0;
    if dx.norm() < 1e-9 {
        return Err(VioError::Config(
            "stereo baseline is zero, rectifying frame undefined".into(),
        ));
    }
    let x_new = dx / dx.norm();
    let z_left = rig.cam0.t_bc.r.column(2).into_owned();
    let y_dir = z_left.cross(&x_new);
    if y_dir.norm() < 1e-9 {
        return Err(VioError::Config(
            "baseline parallel to optical axis, rectifying frame degenerate".into(),
        ));
    }
    let y_new = y_dir / y_dir.norm();
    let z_new = x_new.cross(&y_new);
    // Rows are the new camera axes in body coordinates, so this maps body
    // to rectified-camera coordinates.
    let r_rect_b =
        Matrix3::from_rows(&[x_new.transpose(), y_new.transpose(), z_new.transpose()]);
    let r_left = r_rect_b * rig.cam0.t_bc.r;
    let r_right = r_rect_b * cam1.t_bc.r;

    let k0 = &rig.cam0.intrinsics;
    let k1 = &cam1.intrinsics;
    let f = (k0.fx + k0.fy + k1.fx + k1.fy) * 0.25;
    let knew = CameraIntrinsics::pinhole(
        f,
        f,
        (k0.cx + k1.cx) * 0.5,
        (k0.cy + k1.cy) * 0.5,
    );

    let left_maps = rotation_maps(&rig.cam0, &r_left, &knew);
    let right_maps = rotation_maps(cam1, &r_right, &knew);

    let mut out = rig.clone();
    out.cam0 = CameraCalib {
        intrinsics: knew,
        t_bc: Pose::new(r_rect_b.transpose(), c0),
        width: rig.cam0.width,
        height: rig.cam0.height,
    };
    out.cam1 = Some(CameraCalib {
        intrinsics: knew,
        t_bc: Pose::new(r_rect_b.transpose(), c1),
        width: cam1.width,
        height: cam1.height,
    });
    Ok(Rectification {
        rig: out,
        r_left,
        r_right,
        left_maps,
        right_maps,
    })
}

/// Forward transform of a raw-image pixel into rectified coordinates.
/// None when the undistorted ray leaves the rectified image plane.
pub fn rectified_pixel(
    px: &Vector2<f64>,
    cam: &CameraIntrinsics,
    r_rect: &Matrix3<f64>,
    knew: &CameraIntrinsics,
) -> Option<Vector2<f64>> {
    let ray = r_rect * cam.unproject(px);
    if ray.z <= 1e-9 {
        return None;
    }
    Some(Vector2::new(
        knew.fx * ray.x / ray.z + knew.cx,
        knew.fy * ray.y / ray.z + knew.cy,
    ))
}

/// Resamples an image through the remap tables with bilinear
/// interpolation. Invalid table entries produce black pixels.
pub fn remap(img: &GrayImage, maps: &RectifyMaps) -> GrayImage {
    let mut data = Vec::with_capacity(maps.width * maps.height);
    for i in 0..maps.width * maps.height {
        let (x, y) = (maps.map_x[i], maps.map_y[i]);
        if x.is_finite() && y.is_finite() {
            data.push(img.sample(x as f64, y as f64) as f32);
        } else {
            data.push(0.0);
        }
    }
    GrayImage::new(maps.width, maps.height, data)
}
