//! Run artifacts: trajectory CSV, landmark map PLY, and the JSON report.
//!
//! All three are produced as strings first so byte-identical output under
//! a fixed seed is testable without touching the filesystem. Floats print
//! through the shortest-roundtrip formatter, which is deterministic and
//! loses nothing on re-parse.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};

use crate::error::VioError;
use crate::geometry::KFState;

/// One CSV line per keyframe: timestamp, position, unit quaternion
/// (scalar first, hemisphere w >= 0), velocity.
pub fn trajectory_csv(traj: &[(u64, i64, KFState)]) -> String {
    let mut out = String::from("timestamp_ns,px,py,pz,qw,qx,qy,qz,vx,vy,vz\n");
    for (_, t_ns, s) in traj {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(s.r));
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            t_ns, s.p.x, s.p.y, s.p.z, q.w, q.i, q.j, q.k, s.v.x, s.v.y, s.v.z
        )
        .expect("string write");
    }
    out
}

/// ASCII point cloud of triangulated landmark positions.
pub fn map_ply(points: &[Vector3<f64>]) -> String {
    let mut out = String::new();
    writeln!(out, "ply").unwrap();
    writeln!(out, "format ascii 1.0").unwrap();
    writeln!(out, "element vertex {}", points.len()).unwrap();
    writeln!(out, "property float x").unwrap();
    writeln!(out, "property float y").unwrap();
    writeln!(out, "property float z").unwrap();
    writeln!(out, "end_header").unwrap();
    for p in points {
        writeln!(out, "{} {} {}", p.x as f32, p.y as f32, p.z as f32).unwrap();
    }
    out
}

pub fn write_text(path: &Path, content: &str) -> Result<(), VioError> {
    fs::write(path, content).map_err(|e| VioError::io(path, e))
}
