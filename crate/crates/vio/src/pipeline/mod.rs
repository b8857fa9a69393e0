//! Keyframe pipeline: scheduling, frontends, backend, and the run loop.
//!
//! A frame takes one of two paths. Tracking-only frames run feature
//! tracking and nothing else, keeping track state warm between
//! keyframes. Keyframes run the full stack: tracking, outlier rejection,
//! stereo measurement, feature replenishment, track-store bookkeeping,
//! one inertial factor spanning the gap since the previous keyframe, and
//! a Gauss-Newton pass over the sliding window, marginalizing the oldest
//! state once the window exceeds its horizon.
//!
//! Between keyframes i and j the IMU accumulates a preintegrated delta
//! (dR, dv, dp) over dt, and the new state enters at the propagated guess
//!
//!   R_j = R_i dR,  v_j = v_i + g dt + R_i dv,
//!   p_j = p_i + v_i dt + g dt^2 / 2 + R_i dp,
//!
//! which is also the translation the distance keyframe policy
//! thresholds. At bootstrap the first frame becomes a keyframe at the
//! origin: attitude aligned so the early averaged accelerometer points
//! up, gyro bias set to the early averaged gyro, and the gauge fixed by a
//! strong prior on the first state.
//!
//! Feature tracks die by tracking loss, an outlier verdict, or the age
//! limit. A dead track's measurements stay in the store until its birth
//! keyframe leaves the window, at which point the whole track folds into
//! the boundary prior and its rows free up. With age <= horizon no live
//! track ever observes the leaving state, so nothing is ever both folded
//! and kept.

pub mod eval;
pub mod model;
pub mod output;
pub mod sweep;

pub use eval::{evaluate_trajectory, TrajectoryError};
pub use model::{model_report, MemoryReport};
pub use sweep::{sweep_compression, CodecParams, SweepPoint};

use std::collections::{HashMap, HashSet};
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::backend::linearize::{ImuFactor, StereoObs, VisionConfig, VisionFactor};
use crate::backend::track_store::{TrackStore, NO_RIGHT};
use crate::backend::{BackendConfig, FactorGraph};
use crate::dataset::{FrameEvent, Observation, RigCalib, SequenceData, VisionData};
use crate::error::VioError;
use crate::framecodec::{encode_frame, CompressedFrame, Frame};
use crate::geometry::{so3_exp, CameraIntrinsics, KFState, STATE_DOF};
use crate::ife::{integrate_window, ImuSample, Preintegrator};
use crate::vfe::{
    compute_rectification, detect_features, mono_ransac_2pt, rectified_pixel, remap, stereo_match,
    stereo_ransac_1pt, track_features, triangulate, GrayImage, Pyramid, Rectification,
    TrackingData, VfeConfig,
};

/// Hard configuration maxima, fixed by the sizing of the on-chip stores.
pub const MAX_HORIZON: usize = 20;
/// Longest keyframe span a single feature track may cover.
pub const MAX_TRACK_AGE: usize = 10;
/// Most features tracked at once.
pub const MAX_FEATURES: usize = 200;
/// Most track payload slots.
pub const MAX_TRACKS: usize = 4000;

/// Keyframe scheduling policy.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KfPolicy {
    /// Every k-th processed frame, starting with frame 0.
    Rate(u32),
    /// A keyframe once the predicted translation since the last keyframe
    /// reaches this many meters. A stationary platform only ever emits
    /// the bootstrap keyframe.
    Distance(f64),
}

impl std::str::FromStr for KfPolicy {
    type Err = VioError;

    fn from_str(s: &str) -> Result<Self, VioError> {
        let bad = || VioError::Config(format!("keyframe policy `{s}` is not rate:<k> or dist:<m>"));
        let (kind, val) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "rate" => {
                let k: u32 = val.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                Ok(KfPolicy::Rate(k))
            }
            "dist" => {
                let d: f64 = val.parse().map_err(|_| bad())?;
                if d <= 0.0 || !d.is_finite() {
                    return Err(bad());
                }
                Ok(KfPolicy::Distance(d))
            }
            _ => Err(bad()),
        }
    }
}

/// What the stereo matcher reads.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMode {
    /// Match on raw rectified pixels.
    Off,
    /// Match on the production 26-bit-per-4x4-block code.
    On,
    /// Match through a generalized block code, for design sweeps.
    Sweep { block: usize, truncate_bits: u32 },
}

/// Full pipeline configuration. Serde defaults make partial TOML files
/// load against the programmable maxima.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub vfe: VfeConfig,
    /// Keyframes in the sliding window.
    pub horizon: usize,
    /// Longest keyframe span of one feature track.
    pub feature_age: usize,
    /// Track payload slots.
    pub max_tracks: usize,
    /// Use the right camera when the rig has one.
    pub stereo: bool,
    pub kf_policy: KfPolicy,
    pub compression: CompressionMode,
    /// Seeds sample consensus and the modeled solver system.
    pub seed: u64,
    /// Gauss-Newton iterations per keyframe.
    pub gn_iterations: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            vfe: VfeConfig::default(),
            horizon: MAX_HORIZON,
            feature_age: MAX_TRACK_AGE,
            max_tracks: MAX_TRACKS,
            stereo: true,
            kf_policy: KfPolicy::Rate(1),
            compression: CompressionMode::On,
            seed: 0,
            gn_iterations: 3,
        }
    }
}

impl PipelineConfig {
    /// Everything at the programmable maxima.
    pub fn maxima() -> Self {
        PipelineConfig::default()
    }

    /// A light configuration: 35 features over a 10-keyframe window.
    pub fn easy() -> Self {
        PipelineConfig {
            horizon: 10,
            vfe: VfeConfig {
                max_features: 35,
                ..VfeConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self, VioError> {
        match name {
            "maxima" => Ok(Self::maxima()),
            "easy" => Ok(Self::easy()),
            other => Err(VioError::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, VioError> {
        let cfg: PipelineConfig =
            toml::from_str(s).map_err(|e| VioError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, VioError> {
        let text = std::fs::read_to_string(path).map_err(|e| VioError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Rejects values outside the programmable ranges.
    pub fn validate(&self) -> Result<(), VioError> {
        let check = |name: &str, v: usize, lo: usize, hi: usize| {
            if v < lo || v > hi {
                Err(VioError::Config(format!(
                    "{name} of {v} outside the programmable range {lo}..={hi}"
                )))
            } else {
                Ok(())
            }
        };
        check("window horizon", self.horizon, 2, MAX_HORIZON)?;
        check("feature age", self.feature_age, 1, MAX_TRACK_AGE)?;
        check("track capacity", self.max_tracks, 1, MAX_TRACKS)?;
        check("feature budget", self.vfe.max_features, 1, MAX_FEATURES)?;
        if self.feature_age > self.horizon {
            return Err(VioError::Config(format!(
                "feature age {} exceeds the window horizon {}",
                self.feature_age, self.horizon
            )));
        }
        if self.gn_iterations == 0 {
            return Err(VioError::Config("at least one solver iteration".into()));
        }
        match self.kf_policy {
            KfPolicy::Rate(0) => {
                return Err(VioError::Config("keyframe rate divisor of zero".into()))
            }
            KfPolicy::Distance(d) if d <= 0.0 || !d.is_finite() => {
                return Err(VioError::Config(format!(
                    "keyframe distance threshold {d} not positive"
                )))
            }
            _ => {}
        }
        if let CompressionMode::Sweep {
            block,
            truncate_bits,
        } = self.compression
        {
            if !matches!(block, 4 | 8 | 16) {
                return Err(VioError::Config(format!(
                    "sweep block edge {block} not one of 4, 8, 16"
                )));
            }
            if !(1..=7).contains(&truncate_bits) {
                return Err(VioError::Config(format!(
                    "sweep truncation of {truncate_bits} bits outside 1..=7"
                )));
            }
        }
        Ok(())
    }
}

/// Work tallies, split by pipeline stage. Tracking-only frames advance
/// only `frames` and `track_calls`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct OpCounters {
    pub frames: u64,
    pub keyframes: u64,
    /// Feature tracking attempts.
    pub track_calls: u64,
    /// Detector invocations.
    pub detect_calls: u64,
    /// Stereo rectification passes.
    pub rectify_calls: u64,
    /// Frame compressions.
    pub encode_calls: u64,
    /// Stereo template matching attempts.
    pub stereo_match_calls: u64,
    /// Sample-consensus invocations.
    pub ransac_calls: u64,
    /// Gauss-Newton iterations.
    pub backend_steps: u64,
    /// Solver multiply-accumulates performed.
    pub solver_macs: u64,
    /// Solver multiply-accumulates skipped on zero operands.
    pub solver_skipped: u64,
}

/// Bootstrap attitude and bias estimates from early IMU data.
#[derive(Debug, Clone, Copy)]
pub struct InitState {
    pub r: Matrix3<f64>,
    pub bg: Vector3<f64>,
    pub ba: Vector3<f64>,
}

impl Default for InitState {
    fn default() -> Self {
        InitState {
            r: Matrix3::identity(),
            bg: Vector3::zeros(),
            ba: Vector3::zeros(),
        }
    }
}

/// Averages a stationary stretch of IMU data into an initial attitude
/// (gravity up, zero yaw) and gyro bias.
pub fn init_from_imu(samples: &[ImuSample]) -> InitState {
    if samples.is_empty() {
        return InitState::default();
    }
    let n = samples.len() as f64;
    let mean_a: Vector3<f64> = samples.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
    let mean_g: Vector3<f64> = samples.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
    let r = if mean_a.norm() < 1e-9 {
        Matrix3::identity()
    } else {
        let a = mean_a.normalize();
        let axis = a.cross(&Vector3::z());
        if axis.norm() < 1e-12 {
            if a.z > 0.0 {
                Matrix3::identity()
            } else {
                so3_exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0))
            }
        } else {
            so3_exp(&(axis.normalize() * a.z.clamp(-1.0, 1.0).acos()))
        }
    };
    InitState {
        r,
        bg: mean_g,
        ba: Vector3::zeros(),
    }
}

/// One keyframe's estimate, emitted as each keyframe is processed.
#[derive(Debug, Clone, Copy)]
pub struct StateEstimate {
    pub kf_id: u64,
    pub t_ns: i64,
    pub state: KFState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum VisionMode {
    /// Exact landmark observations, associated by landmark id.
    Oracle,
    /// Pixel frames through the full front end.
    Image,
}

/// One live feature's measurement at the current keyframe, ready for the
/// store and the next consensus round.
struct Ingest {
    track: u64,
    u: f64,
    v: f64,
    right: Option<f64>,
    norm: Vector2<f64>,
    p3: Option<Vector3<f64>>,
}

/// Gauge anchor on the bootstrap state, diagonal information in tangent
/// order (attitude, position, velocity, gyro bias, accel bias). Yaw and
/// position are clamped hard; roll and pitch softer, since gravity keeps
/// them observable; biases at the confidence of a short static average.
const ANCHOR_INFO: [f64; STATE_DOF] = [
    1e6, 1e6, 1e8, 1e8, 1e8, 1e8, 1e4, 1e4, 1e4, 1e6, 1e6, 1e6, 1e2, 1e2, 1e2,
];

pub struct Pipeline {
    cfg: PipelineConfig,
    rig: RigCalib,
    mode: Option<VisionMode>,
    vcfg: Option<VisionConfig>,
    graph: FactorGraph,
    store: TrackStore,
    tracking: TrackingData,
    /// Birth keyframe per live track.
    birth: HashMap<u64, u64>,
    /// Oracle association: dataset landmark -> live track.
    live_global: HashMap<u32, u64>,
    global_of: HashMap<u64, u32>,
    rect: Option<Rectification>,
    prev_pyr: Option<Pyramid>,
    /// Normalized image coordinates at the previous keyframe.
    prev_norm: HashMap<u64, Vector2<f64>>,
    /// Camera-frame points at the previous keyframe.
    prev_p3: HashMap<u64, Vector3<f64>>,
    preint: Preintegrator,
    last_frame_t: Option<i64>,
    frame_idx: u64,
    kf_count: u64,
    counters: OpCounters,
    init: InitState,
    /// States that left the window, in keyframe order.
    finished: Vec<(u64, i64, KFState)>,
    /// Landmarks triangulated as their tracks folded.
    map_points: Vec<Vector3<f64>>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, rig: RigCalib, init: InitState) -> Result<Self, VioError> {
        cfg.validate()?;
        let backend = BackendConfig {
            horizon: cfg.horizon,
            max_track_age: cfg.feature_age,
            gn_iterations: cfg.gn_iterations,
            ..BackendConfig::default()
        };
        let store = TrackStore::new(
            cfg.horizon,
            cfg.vfe.max_features,
            cfg.feature_age,
            cfg.max_tracks,
        );
        let tracking = TrackingData::new(cfg.vfe.max_features);
        let preint = Preintegrator::new(rig.imu_noise, init.bg, init.ba);
        Ok(Pipeline {
            cfg,
            rig,
            mode: None,
            vcfg: None,
            graph: FactorGraph::new(backend),
            store,
            tracking,
            birth: HashMap::new(),
            live_global: HashMap::new(),
            global_of: HashMap::new(),
            rect: None,
            prev_pyr: None,
            prev_norm: HashMap::new(),
            prev_p3: HashMap::new(),
            preint,
            last_frame_t: None,
            frame_idx: 0,
            kf_count: 0,
            counters: OpCounters::default(),
            init,
            finished: Vec::new(),
            map_points: Vec::new(),
        })
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    pub fn live_features(&self) -> usize {
        self.tracking.len()
    }

    pub fn window_len(&self) -> usize {
        self.graph.len()
    }

    pub fn map_points(&self) -> &[Vector3<f64>] {
        &self.map_points
    }

    /// Every keyframe state, marginalized ones first at their final
    /// estimates, then the current window.
    pub fn trajectory(&self) -> Vec<(u64, i64, KFState)> {
        let mut out = self.finished.clone();
        out.extend(self.graph.window().iter().map(|e| (e.kf_id, e.t_ns, e.state)));
        out
    }

    /// Whether the rig and configuration give the current run a right
    /// camera to use.
    fn stereo_active(&self) -> bool {
        self.cfg.stereo && self.rig.cam1.is_some()
    }

    fn vcfg(&self) -> &VisionConfig {
        self.vcfg.as_ref().expect("vision config fixed at first frame")
    }

    /// Fixes the vision mode and projection model on first contact.
    /// Oracle observations project through the rig's own pinhole model;
    /// images project through the rectified equivalent rig when stereo,
    /// or the undistorted left pinhole when mono.
    fn fix_mode(&mut self, vision: &VisionData) -> Result<(), VioError> {
        let incoming = match vision {
            VisionData::Observations(_) => VisionMode::Oracle,
            VisionData::Images { .. } => VisionMode::Image,
        };
        match self.mode {
            Some(m) if m == incoming => Ok(()),
            Some(_) => Err(VioError::Config(
                "stream mixes oracle observations and image frames".into(),
            )),
            None => {
                let mut vcfg = match incoming {
                    VisionMode::Oracle => VisionConfig::from_rig(&self.rig),
                    VisionMode::Image => {
                        if self.stereo_active() {
                            let rect = compute_rectification(&self.rig)?;
                            let vcfg = VisionConfig::from_rig(&rect.rig);
                            self.rect = Some(rect);
                            vcfg
                        } else {
                            VisionConfig::from_rig(&self.rig)
                        }
                    }
                };
                if !self.cfg.stereo {
                    vcfg.baseline = None;
                }
                self.vcfg = Some(vcfg);
                self.mode = Some(incoming);
                Ok(())
            }
        }
    }

    /// Translation the IMU predicts since the last keyframe.
    fn predicted_translation(&self) -> f64 {
        let Some(last) = self.graph.newest() else {
            return f64::INFINITY;
        };
        let st = &last.state;
        let d = self.preint.current();
        let (_, _, dp) = d.corrected(&st.bg, &st.ba);
        let dt = d.dt;
        let g = self.graph.cfg.gravity;
        (st.v * dt + g * (0.5 * dt * dt) + st.r * dp).norm()
    }

    /// Processes one frame with the IMU samples since the previous one.
    /// The slice may start earlier; integration clips to the inter-frame
    /// window. Returns a state estimate on keyframes, nothing otherwise.
    pub fn process_frame(
        &mut self,
        event: &FrameEvent,
        imu: &[ImuSample],
    ) -> Result<Option<StateEstimate>, VioError> {
        if let Some(prev) = self.last_frame_t {
            if event.t_ns <= prev {
                return Err(VioError::NonMonotonicTime {
                    prev_ns: prev,
                    next_ns: event.t_ns,
                });
            }
            if !imu.is_empty() {
                integrate_window(&mut self.preint, imu, prev, event.t_ns)?;
            }
        }
        self.fix_mode(&event.vision)?;

        let is_kf = self.kf_count == 0
            || match self.cfg.kf_policy {
                KfPolicy::Rate(k) => self.frame_idx.is_multiple_of(u64::from(k)),
                KfPolicy::Distance(d) => self.predicted_translation() >= d,
            };

        self.counters.frames += 1;
        let out = if is_kf {
            Some(self.process_keyframe(event)?)
        } else {
            self.tracking_only(event)?;
            None
        };
        self.frame_idx += 1;
        self.last_frame_t = Some(event.t_ns);
        Ok(out)
    }

    /// The between-keyframes path: feature tracking, nothing else.
    fn tracking_only(&mut self, event: &FrameEvent) -> Result<(), VioError> {
        match &event.vision {
            VisionData::Observations(obs) => {
                self.oracle_track(obs);
            }
            VisionData::Images { left, .. } => {
                let frame = left.load()?;
                self.image_track(&frame)?;
            }
        }
        Ok(())
    }

    /// Updates live features from exact observations, dropping the unseen.
    fn oracle_track(&mut self, obs: &[Observation]) {
        let by_id: HashMap<u32, &Observation> = obs.iter().map(|o| (o.landmark, o)).collect();
        let results: Vec<Option<Vector2<f64>>> = self
            .tracking
            .features()
            .iter()
            .map(|f| {
                self.global_of
                    .get(&f.landmark)
                    .and_then(|g| by_id.get(g))
                    .map(|o| Vector2::new(o.u, o.v))
            })
            .collect();
        self.counters.track_calls += results.len() as u64;
        let before: Vec<u64> = self.tracking.features().iter().map(|f| f.landmark).collect();
        self.tracking.apply_tracking(&results);
        self.prune_lost(&before);
    }

    /// Pyramidal tracking from the previous frame, dropping failures.
    fn image_track(&mut self, frame: &Frame) -> Result<(), VioError> {
        let pyr = Pyramid::build(frame, self.cfg.vfe.pyramid_levels, self.cfg.vfe.lk_window)?;
        if let Some(prev) = &self.prev_pyr {
            let positions = self.tracking.positions();
            self.counters.track_calls += positions.len() as u64;
            let results = track_features(prev, &pyr, &positions, &self.cfg.vfe);
            let before: Vec<u64> = self.tracking.features().iter().map(|f| f.landmark).collect();
            self.tracking.apply_tracking(&results);
            self.prune_lost(&before);
        }
        self.prev_pyr = Some(pyr);
        Ok(())
    }

    /// Clears bookkeeping for tracks that just left the tracker. Their
    /// stored observations stay until the fold.
    fn prune_lost(&mut self, before: &[u64]) {
        let after: HashSet<u64> = self.tracking.features().iter().map(|f| f.landmark).collect();
        for id in before {
            if !after.contains(id) {
                self.forget_live(*id);
            }
        }
    }

    fn forget_live(&mut self, id: u64) {
        self.birth.remove(&id);
        if let Some(g) = self.global_of.remove(&id) {
            self.live_global.remove(&g);
        }
        self.prev_norm.remove(&id);
        self.prev_p3.remove(&id);
    }

    /// Ends tracking for the given tracks, keeping their store rows.
    fn cut_tracks(&mut self, ids: &[u64]) {
        if ids.is_empty() {
            return;
        }
        let drop: HashSet<u64> = ids.iter().copied().collect();
        let keep: HashSet<u64> = self
            .tracking
            .features()
            .iter()
            .map(|f| f.landmark)
            .filter(|id| !drop.contains(id))
            .collect();
        self.tracking.retain_landmarks(&keep);
        for id in ids {
            self.forget_live(*id);
        }
    }

    /// Retires features whose track can take no further observations.
    fn retire_aged(&mut self, kf: u64) {
        let aged: Vec<u64> = self
            .tracking
            .features()
            .iter()
            .map(|f| f.landmark)
            .filter(|id| {
                self.birth
                    .get(id)
                    .is_some_and(|b| kf - b >= self.cfg.feature_age as u64)
            })
            .collect();
        self.cut_tracks(&aged);
    }

    fn normalized(&self, u: f64, v: f64) -> Vector2<f64> {
        let c = self.vcfg();
        Vector2::new((u - c.cx) / c.fx, (v - c.cy) / c.fy)
    }

    /// Camera-frame point from a rectified pixel and disparity, when the
    /// disparity clears the far-point gate.
    fn point_from_disparity(&self, u: f64, v: f64, disparity: f64) -> Option<Vector3<f64>> {
        let c = self.vcfg();
        let baseline = c.baseline?;
        if disparity <= self.cfg.vfe.min_disparity {
            return None;
        }
        let k = CameraIntrinsics::pinhole(c.fx, c.fy, c.cx, c.cy);
        triangulate(
            &Vector2::new(u, v),
            disparity,
            &k,
            baseline,
            self.cfg.vfe.min_disparity,
        )
        .ok()
    }

    /// Drops measurements that fail sample consensus against the
    /// IMU-predicted rotation, ending their tracks.
    fn reject_outliers(
        &mut self,
        measures: &mut Vec<Ingest>,
        dr_body: &Matrix3<f64>,
        kf: u64,
    ) -> Result<(), VioError> {
        let r_bc = self.vcfg().t_bc.r;
        // Points carried from the previous camera into the current one
        // rotate by R_cur^T R_prev = R_bc^T dR^T R_bc.
        let dr_cam = r_bc.transpose() * dr_body.transpose() * r_bc;
        let seed = self
            .cfg
            .seed
            .wrapping_add(kf.wrapping_mul(0x9E37_79B9_7F4A_7C15));

        let vote_stereo = self.stereo_active();
        let (idx, outcome) = if vote_stereo {
            let mut idx = Vec::new();
            let mut prev = Vec::new();
            let mut cur = Vec::new();
            for (i, m) in measures.iter().enumerate() {
                if let (Some(p), Some(c)) = (self.prev_p3.get(&m.track), m.p3) {
                    idx.push(i);
                    prev.push(*p);
                    cur.push(c);
                }
            }
            if idx.is_empty() {
                return Ok(());
            }
            let res = stereo_ransac_1pt(&prev, &cur, &dr_cam, &self.cfg.vfe, seed)?;
            (idx, res.inliers)
        } else {
            let mut idx = Vec::new();
            let mut prev = Vec::new();
            let mut cur = Vec::new();
            for (i, m) in measures.iter().enumerate() {
                if let Some(p) = self.prev_norm.get(&m.track) {
                    idx.push(i);
                    prev.push(*p);
                    cur.push(m.norm);
                }
            }
            if idx.len() < 2 {
                return Ok(());
            }
            let res = mono_ransac_2pt(&prev, &cur, &dr_cam, self.vcfg().fx, &self.cfg.vfe, seed)?;
            (idx, res.inliers)
        };
        self.counters.ransac_calls += 1;

        let inlier: HashSet<usize> = outcome.iter().map(|k| idx[*k]).collect();
        let tested: HashSet<usize> = idx.iter().copied().collect();
        let cut: Vec<u64> = measures
            .iter()
            .enumerate()
            .filter(|(i, _)| tested.contains(i) && !inlier.contains(i))
            .map(|(_, m)| m.track)
            .collect();
        measures.retain(|m| !cut.contains(&m.track));
        self.cut_tracks(&cut);
        Ok(())
    }

    /// The full keyframe path.
    fn process_keyframe(&mut self, event: &FrameEvent) -> Result<StateEstimate, VioError> {
        let kf = self.kf_count;
        // Propagate the state and close the inertial interval.
        let (state, imu_factor, dr_body) = if kf == 0 {
            let state = KFState {
                r: self.init.r,
                p: Vector3::zeros(),
                v: Vector3::zeros(),
                bg: self.init.bg,
                ba: self.init.ba,
            };
            (state, None, Matrix3::identity())
        } else {
            let delta = self.preint.finalize()?;
            let last = self.graph.newest().expect("window has states").state;
            let (dr, dv, dp) = delta.corrected(&last.bg, &last.ba);
            let dt = delta.dt;
            let g = self.graph.cfg.gravity;
            let state = KFState {
                r: last.r * dr,
                p: last.p + last.v * dt + g * (0.5 * dt * dt) + last.r * dp,
                v: last.v + g * dt + last.r * dv,
                bg: last.bg,
                ba: last.ba,
            };
            let factor = ImuFactor::new(0, 0, delta, &self.rig.imu_noise);
            (state, Some(factor), dr)
        };

        let measures = match &event.vision {
            VisionData::Observations(obs) => {
                let obs = obs.clone();
                self.kf_vision_oracle(&obs, kf, &dr_body)?
            }
            VisionData::Images { left, right } => {
                let left = left.load()?;
                let right = match right {
                    Some(r) if self.stereo_active() => Some(r.load()?),
                    _ => None,
                };
                self.kf_vision_image(left, right, kf, &dr_body)?
            }
        };

        self.graph.push_keyframe(kf, event.t_ns, state, imu_factor)?;
        if kf == 0 {
            self.graph.set_anchor(0, &ANCHOR_INFO);
        }
        while self.graph.needs_marginalization() {
            self.fold_oldest()?;
        }
        self.ingest(kf, &measures)?;

        let factors = self.build_factors();
        let vcfg = *self.vcfg();
        let reports = self.graph.optimize(&factors, &vcfg)?;
        for r in &reports {
            self.counters.backend_steps += 1;
            self.counters.solver_macs += r.ops.performed;
            self.counters.solver_skipped += r.ops.skipped;
            if !r.cost_before.is_finite() {
                return Err(VioError::Diverged(format!(
                    "keyframe {kf}: non-finite cost"
                )));
            }
        }
        let newest = self.graph.newest().expect("window has states");
        let est = StateEstimate {
            kf_id: kf,
            t_ns: event.t_ns,
            state: newest.state,
        };
        if !est.state.p.iter().all(|x| x.is_finite()) {
            return Err(VioError::Diverged(format!(
                "keyframe {kf}: non-finite position"
            )));
        }

        // Snapshot measurements for the next consensus round and restart
        // the inertial interval at the refreshed bias estimates.
        self.prev_norm.clear();
        self.prev_p3.clear();
        for m in &measures {
            self.prev_norm.insert(m.track, m.norm);
            if let Some(p) = m.p3 {
                self.prev_p3.insert(m.track, p);
            }
        }
        self.preint = Preintegrator::new(self.rig.imu_noise, est.state.bg, est.state.ba);
        self.kf_count += 1;
        self.counters.keyframes += 1;
        Ok(est)
    }

    /// Keyframe vision on exact observations.
    fn kf_vision_oracle(
        &mut self,
        obs: &[Observation],
        kf: u64,
        dr_body: &Matrix3<f64>,
    ) -> Result<Vec<Ingest>, VioError> {
        self.oracle_track(obs);
        self.retire_aged(kf);

        let by_id: HashMap<u32, &Observation> = obs.iter().map(|o| (o.landmark, o)).collect();
        let mut measures = Vec::new();
        for f in self.tracking.features() {
            let g = self.global_of[&f.landmark];
            let o = by_id[&g];
            measures.push(self.measure_from_obs(f.landmark, o));
        }
        self.reject_outliers(&mut measures, dr_body, kf)?;

        // Replenish from unseen landmarks, in observation order.
        for o in obs {
            if self.tracking.len() >= self.cfg.vfe.max_features {
                break;
            }
            if self.live_global.contains_key(&o.landmark) {
                continue;
            }
            let Some(id) = self.tracking.spawn(Vector2::new(o.u, o.v)) else {
                break;
            };
            self.birth.insert(id, kf);
            self.live_global.insert(o.landmark, id);
            self.global_of.insert(id, o.landmark);
            measures.push(self.measure_from_obs(id, o));
        }
        Ok(measures)
    }

    fn measure_from_obs(&self, track: u64, o: &Observation) -> Ingest {
        let right = if self.stereo_active() { o.u_right } else { None };
        let p3 = right.and_then(|ur| self.point_from_disparity(o.u, o.v, o.u - ur));
        Ingest {
            track,
            u: o.u,
            v: o.v,
            right,
            norm: self.normalized(o.u, o.v),
            p3,
        }
    }

    /// Keyframe vision on pixel frames: track, rectify, match, reject,
    /// replenish.
    fn kf_vision_image(
        &mut self,
        left: Frame,
        right: Option<Frame>,
        kf: u64,
        dr_body: &Matrix3<f64>,
    ) -> Result<Vec<Ingest>, VioError> {
        self.image_track(&left)?;
        self.retire_aged(kf);
        let left_gray = GrayImage::from_frame(&left);

        // Rectify both frames and pick the matcher's pixel source.
        let stereo = match (&self.rect, right) {
            (Some(rect), Some(right_frame)) => {
                let rl = remap(&left_gray, &rect.left_maps);
                let rr = remap(&GrayImage::from_frame(&right_frame), &rect.right_maps);
                self.counters.rectify_calls += 1;
                Some(self.prepare_match_pair(rl, rr)?)
            }
            _ => None,
        };

        let raw_positions = self.tracking.positions();
        let live_ids: Vec<u64> = self.tracking.features().iter().map(|f| f.landmark).collect();
        let mut measures = Vec::new();
        let mut lost = Vec::new();
        for (id, px) in live_ids.iter().zip(&raw_positions) {
            match self.measure_from_pixel(*id, px, &stereo) {
                Some(m) => measures.push(m),
                None => lost.push(*id),
            }
        }
        self.cut_tracks(&lost);
        self.reject_outliers(&mut measures, dr_body, kf)?;

        // Replenish from fresh corners, avoiding surviving features.
        let needed = self
            .cfg
            .vfe
            .max_features
            .saturating_sub(self.tracking.len());
        if needed > 0 {
            let existing = self.tracking.positions();
            let fresh = detect_features(&left_gray, &existing, needed, &self.cfg.vfe);
            self.counters.detect_calls += 1;
            for px in fresh {
                let Some(id) = self.tracking.spawn(px) else {
                    break;
                };
                match self.measure_from_pixel(id, &px, &stereo) {
                    Some(m) => {
                        self.birth.insert(id, kf);
                        measures.push(m);
                    }
                    None => {
                        // A corner that cannot be measured is not a track.
                        let drop: HashSet<u64> = self
                            .tracking
                            .features()
                            .iter()
                            .map(|f| f.landmark)
                            .filter(|x| *x != id)
                            .collect();
                        self.tracking.retain_landmarks(&drop);
                    }
                }
            }
        }
        Ok(measures)
    }

    /// Applies the configured compression to one rectified pair.
    fn prepare_match_pair(
        &mut self,
        left: GrayImage,
        right: GrayImage,
    ) -> Result<MatchPair, VioError> {
        match self.cfg.compression {
            CompressionMode::Off => Ok(MatchPair::Raw(left, right)),
            CompressionMode::On => {
                let l = encode_frame(&gray_to_frame(&left)?);
                let r = encode_frame(&gray_to_frame(&right)?);
                self.counters.encode_calls += 2;
                Ok(MatchPair::Compressed(l, r))
            }
            CompressionMode::Sweep {
                block,
                truncate_bits,
            } => {
                let p = CodecParams {
                    block,
                    truncate_bits,
                };
                self.counters.encode_calls += 2;
                Ok(MatchPair::Raw(
                    sweep::degrade_image(&left, &p)?,
                    sweep::degrade_image(&right, &p)?,
                ))
            }
        }
    }

    /// Full measurement of one feature from its raw-image position:
    /// rectified (or undistorted) coordinates plus the stereo match.
    /// None when the feature has no valid rectified position.
    fn measure_from_pixel(
        &mut self,
        track: u64,
        raw: &Vector2<f64>,
        stereo: &Option<MatchPair>,
    ) -> Option<Ingest> {
        let (u, v) = match (&self.rect, stereo) {
            (Some(rect), Some(_)) => {
                let r = rectified_pixel(
                    raw,
                    &self.rig.cam0.intrinsics,
                    &rect.r_left,
                    &rect.rig.cam0.intrinsics,
                )?;
                (r.x, r.y)
            }
            _ => {
                // Mono: undistort, then project through the bare pinhole.
                let n = self.rig.cam0.intrinsics.unproject(raw);
                let c = self.vcfg();
                (c.fx * n.x + c.cx, c.fy * n.y + c.cy)
            }
        };
        let right = match stereo {
            Some(pair) => {
                self.counters.stereo_match_calls += 1;
                let px = Vector2::new(u, v);
                let d = match pair {
                    MatchPair::Raw(l, r) => stereo_match(l, r, &px, &self.cfg.vfe),
                    MatchPair::Compressed(l, r) => stereo_match(l, r, &px, &self.cfg.vfe),
                };
                d.filter(|d| *d > self.cfg.vfe.min_disparity).map(|d| u - d)
            }
            None => None,
        };
        let p3 = right.and_then(|ur| self.point_from_disparity(u, v, u - ur));
        Some(Ingest {
            track,
            u,
            v,
            right,
            norm: self.normalized(u, v),
            p3,
        })
    }

    /// Folds every track whose birth keyframe is leaving, then slides the
    /// window.
    fn fold_oldest(&mut self) -> Result<(), VioError> {
        let leaving = self.graph.window()[0];
        let mut expired = self.store.expired_before(leaving.kf_id + 1);
        expired.sort_unstable();
        let folded: Vec<VisionFactor> = expired
            .iter()
            .map(|lm| self.factor_for(*lm))
            .collect::<Result<_, _>>()?;
        let states = self.graph.states();
        let vcfg = *self.vcfg();
        for f in &folded {
            if let Some(p) = f.triangulate(&states, &vcfg) {
                self.map_points.push(p);
            }
        }
        self.graph.marginalize_oldest(&folded, &vcfg)?;
        for lm in &expired {
            self.store.evict(*lm)?;
        }
        self.finished
            .push((leaving.kf_id, leaving.t_ns, leaving.state));
        Ok(())
    }

    fn factor_for(&self, lm: u64) -> Result<VisionFactor, VioError> {
        let obs = self
            .store
            .observations(lm)
            .ok_or(VioError::TrackNotFound(lm))?;
        let mapped = obs
            .iter()
            .filter_map(|(kf, p)| {
                self.graph.slot_of(*kf).map(|slot| {
                    let u_right = (p[2] >= 0.0).then_some(p[2]);
                    (
                        slot,
                        StereoObs {
                            u: p[0],
                            v: p[1],
                            u_right,
                        },
                    )
                })
            })
            .collect();
        Ok(VisionFactor {
            track: lm,
            obs: mapped,
        })
    }

    /// Writes this keyframe's measurements into the store. A full store
    /// ends the newest track rather than failing the frame.
    fn ingest(&mut self, kf: u64, measures: &[Ingest]) -> Result<(), VioError> {
        let mut overflow = Vec::new();
        for m in measures {
            let payload = [m.u, m.v, m.right.unwrap_or(NO_RIGHT)];
            match self.store.insert(m.track, kf, payload) {
                Ok(()) => {}
                Err(VioError::TrackStoreFull { .. }) => overflow.push(m.track),
                Err(e) => return Err(e),
            }
        }
        self.cut_tracks(&overflow);
        Ok(())
    }

    /// Vision factors over every stored track with two or more
    /// observations, in ascending track order.
    fn build_factors(&self) -> Vec<VisionFactor> {
        let mut lms: Vec<u64> = self.store.landmarks().collect();
        lms.sort_unstable();
        lms.iter()
            .filter_map(|lm| self.factor_for(*lm).ok())
            .filter(|f| f.obs.len() >= 2)
            .collect()
    }
}

/// The two buffers stereo matching reads, raw or compressed.
enum MatchPair {
    Raw(GrayImage, GrayImage),
    Compressed(CompressedFrame, CompressedFrame),
}

/// Rounds a float image back to an 8-bit frame for the encoder.
fn gray_to_frame(img: &GrayImage) -> Result<Frame, VioError> {
    let (w, h) = (img.width(), img.height());
    let data: Vec<u8> = (0..h)
        .flat_map(|y| {
            (0..w).map(move |x| img.at(x as isize, y as isize).round().clamp(0.0, 255.0) as u8)
        })
        .collect();
    Frame::new(w, h, data)
}

/// Everything one run produced.
#[derive(Debug)]
pub struct RunResult {
    /// Keyframe states in keyframe order, final estimates.
    pub trajectory: Vec<(u64, i64, KFState)>,
    /// Triangulated landmark positions.
    pub map_points: Vec<Vector3<f64>>,
    pub report: RunReport,
}

/// The JSON-serializable run summary.
#[derive(Debug, serde::Serialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub counters: OpCounters,
    pub memory: MemoryReport,
    pub eval: Option<TrajectoryError>,
    pub trajectory_points: usize,
    pub map_points: usize,
}

/// Runs the pipeline over a full sequence: bootstraps from the first
/// half second of IMU data, feeds every frame with its inertial window,
/// and writes `trajectory.csv`, `map.ply`, and `report.json` when an
/// output directory is given. Identical inputs and seed give identical
/// artifacts, byte for byte.
pub fn run_sequence(
    data: &SequenceData,
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<RunResult, VioError> {
    if data.frames.is_empty() {
        return Err(VioError::Config("sequence has no frames".into()));
    }
    let init = match data.imu.first() {
        Some(first) => {
            let until = first.t_ns + 500_000_000;
            let n = data.imu.partition_point(|s| s.t_ns <= until);
            init_from_imu(&data.imu[..n])
        }
        None => InitState::default(),
    };
    let mut pipe = Pipeline::new(cfg.clone(), data.rig.clone(), init)?;

    let mut prev_t: Option<i64> = None;
    for ev in &data.frames {
        let imu = match prev_t {
            None => &data.imu[0..0],
            Some(p) => {
                // One sample before the window so the span covering its
                // start is present; integration clips to the window.
                let lo = data
                    .imu
                    .partition_point(|s| s.t_ns < p)
                    .saturating_sub(1);
                let hi = data.imu.partition_point(|s| s.t_ns < ev.t_ns);
                &data.imu[lo.min(hi)..hi]
            }
        };
        pipe.process_frame(ev, imu)?;
        prev_t = Some(ev.t_ns);
    }

    let trajectory = pipe.trajectory();
    let positions: Vec<(i64, Vector3<f64>)> =
        trajectory.iter().map(|(_, t, s)| (*t, s.p)).collect();
    let eval = evaluate_trajectory(&positions, &data.ground_truth).ok();
    let memory = model_report(cfg, data.rig.cam0.width, data.rig.cam0.height)?;
    let report = RunReport {
        config: cfg.clone(),
        counters: *pipe.counters(),
        memory,
        eval,
        trajectory_points: trajectory.len(),
        map_points: pipe.map_points().len(),
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| VioError::io(dir, e))?;
        output::write_text(&dir.join("trajectory.csv"), &output::trajectory_csv(&trajectory))?;
        output::write_text(&dir.join("map.ply"), &output::map_ply(pipe.map_points()))?;
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| VioError::Config(format!("report serialization: {e}")))?;
        output::write_text(&dir.join("report.json"), &json)?;
    }

    Ok(RunResult {
        trajectory,
        map_points: pipe.map_points().to_vec(),
        report,
    })
}
