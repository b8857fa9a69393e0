//! Sequence ingestion: EuRoC-format directories and synthetic scenarios.
//!
//! Both sources produce the same [`SequenceData`]: a time-sorted IMU stream,
//! a frame stream, ground truth, and the camera rig calibration. Synthetic
//! scenarios additionally carry the landmark list and can emit either rendered
//! images (so the full vision frontend runs) or exact projected observations
//! (so the estimator can be verified against closed-form ground truth without
//! image-processing error).

mod euroc;
mod synth;

pub use euroc::{euroc_default_rig, load_euroc, save_euroc};
pub use synth::{gravity_world, synth_scenario, synthetic_rig, ScenarioConfig, Trajectory, GRAVITY};

use std::path::PathBuf;

use nalgebra::{Matrix3, Vector3};

use crate::error::VioError;
use crate::framecodec::Frame;
use crate::geometry::{so3_exp, so3_log, CameraIntrinsics, Pose};
use crate::ife::{ImuNoise, ImuSample};

/// One camera of the rig: intrinsics plus its mounting pose `T_BC`
/// (camera frame to body frame).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalib {
    pub intrinsics: CameraIntrinsics,
    pub t_bc: Pose,
    pub width: usize,
    pub height: usize,
}

/// Full sensor rig: one or two cameras plus IMU noise figures.
#[derive(Debug, Clone, PartialEq)]
pub struct RigCalib {
    pub cam0: CameraCalib,
    pub cam1: Option<CameraCalib>,
    pub imu_noise: ImuNoise,
    pub imu_rate_hz: f64,
    pub frame_rate_hz: f64,
}

impl RigCalib {
    /// Stereo baseline length, if a second camera is present.
    pub fn baseline(&self) -> Option<f64> {
        let cam1 = self.cam1.as_ref()?;
        Some((cam1.t_bc.t - self.cam0.t_bc.t).norm())
    }
}

/// Image payload of a frame event. Real sequences keep file paths and decode
/// on demand so a full run never holds more than a few frames in memory.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageRef {
    Memory(Frame),
    File(PathBuf),
}

impl ImageRef {
    pub fn load(&self) -> Result<Frame, VioError> {
        match self {
            ImageRef::Memory(frame) => Ok(frame.clone()),
            ImageRef::File(path) => euroc::load_image(path),
        }
    }
}

/// Exact projection of one landmark into a frame, used in oracle mode.
/// `u_right` is present only for stereo scenarios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub landmark: u32,
    pub u: f64,
    pub v: f64,
    pub u_right: Option<f64>,
}

/// Vision payload: decoded/decodable images, or ground-truth observations.
#[derive(Debug, Clone, PartialEq)]
pub enum VisionData {
    Images {
        left: ImageRef,
        right: Option<ImageRef>,
    },
    Observations(Vec<Observation>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEvent {
    pub t_ns: i64,
    pub vision: VisionData,
}

impl FrameEvent {
    pub fn is_stereo(&self) -> bool {
        match &self.vision {
            VisionData::Images { right, .. } => right.is_some(),
            VisionData::Observations(obs) => obs.iter().any(|o| o.u_right.is_some()),
        }
    }
}

/// Time-indexed ground-truth state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthSample {
    pub t_ns: i64,
    pub p: Vector3<f64>,
    pub r: Matrix3<f64>,
    pub v: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub samples: Vec<GroundTruthSample>,
}

impl GroundTruth {
    /// Interpolated pose at `t_ns`: linear in position, geodesic in rotation.
    /// Returns `None` outside the covered span.
    pub fn pose_at(&self, t_ns: i64) -> Option<Pose> {
        let samples = &self.samples;
        if samples.is_empty() || t_ns < samples[0].t_ns || t_ns > samples.last().unwrap().t_ns {
            return None;
        }
        let idx = samples.partition_point(|s| s.t_ns <= t_ns);
        if idx == 0 || idx == samples.len() {
            let s = &samples[idx.saturating_sub(1)];
            return Some(Pose::new(s.r, s.p));
        }
        let b = &samples[idx];
        let a = &samples[idx - 1];
        let span = (b.t_ns - a.t_ns) as f64;
        let alpha = if span > 0.0 {
            (t_ns - a.t_ns) as f64 / span
        } else {
            0.0
        };
        let dr = so3_log(&(a.r.transpose() * b.r));
        Some(Pose::new(
            a.r * so3_exp(&(dr * alpha)),
            a.p + (b.p - a.p) * alpha,
        ))
    }

    pub fn span_ns(&self) -> Option<(i64, i64)> {
        Some((self.samples.first()?.t_ns, self.samples.last()?.t_ns))
    }
}

/// A complete loaded or generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceData {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<FrameEvent>,
    pub ground_truth: GroundTruth,
    pub rig: RigCalib,
    /// World-frame landmark positions; synthetic scenarios only.
    pub landmarks: Option<Vec<Vector3<f64>>>,
}

impl SequenceData {
    /// IMU samples with `t_start_ns <= t < t_end_ns`, located by binary search.
    pub fn imu_between(&self, t_start_ns: i64, t_end_ns: i64) -> &[ImuSample] {
        let lo = self.imu.partition_point(|s| s.t_ns < t_start_ns);
        let hi = self.imu.partition_point(|s| s.t_ns < t_end_ns);
        &self.imu[lo..hi]
    }
}
