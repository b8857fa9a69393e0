//! Synthetic scenario generator with closed-form ground truth.
//!
//! Trajectories are analytic curves whose velocity and acceleration are exact
//! derivatives. The IMU stream reports interval-mean rates, the way an
//! integrating (delta-angle, delta-velocity) unit does: the sample at t_k is
//! the constant rate whose zero-order hold over [t_k, t_k+1) reproduces the
//! true attitude and velocity change exactly, so a discrete integrator
//! replays the trajectory to machine precision before configured bias and
//! noise are applied. Moving trajectories begin with a 1 s static lead-in
//! (for gravity bootstrapping) followed by a 2 s smoothstep ramp, keeping
//! acceleration continuous at both joints.
//!
//! Landmarks sit on a cylinder wall around the trajectory. Each frame carries
//! either their exact projections or rendered anti-aliased dot images.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    CameraCalib, FrameEvent, GroundTruth, GroundTruthSample, ImageRef, Observation, RigCalib,
    SequenceData, VisionData,
};
use crate::error::VioError;
use crate::framecodec::Frame;
use crate::geometry::{so3_exp, so3_log, CameraIntrinsics, Pose};
use crate::ife::{ImuNoise, ImuSample};

pub const GRAVITY: f64 = 9.81;

/// World gravity vector, along -z.
pub fn gravity_world() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

const LEAD_IN_S: f64 = 1.0;
const RAMP_S: f64 = 2.0;
/// Landmarks are kept this many pixels inside the image border.
const VISIBILITY_MARGIN_PX: f64 = 12.0;
const MIN_DEPTH_M: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// No motion at the world origin.
    Static,
    /// Horizontal circle traversed tangentially at `rate` rad/s.
    Circle { radius: f64, rate: f64 },
    /// Circle with a vertical sinusoid, `cycles` bobs per revolution.
    CircleBob {
        radius: f64,
        rate: f64,
        bob_amplitude: f64,
        cycles: f64,
    },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub trajectory: Trajectory,
    pub duration_s: f64,
    pub imu_rate_hz: f64,
    pub frame_rate_hz: f64,
    pub landmark_count: usize,
    pub seed: u64,
    pub stereo: bool,
    /// Render dot images instead of emitting exact observations.
    pub render_images: bool,
    pub pixel_noise_px: f64,
    pub imu_noise: bool,
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            trajectory: Trajectory::Circle {
                radius: 2.0,
                rate: 0.5,
            },
            duration_s: 10.0,
            imu_rate_hz: 200.0,
            frame_rate_hz: 20.0,
            landmark_count: 50,
            seed: 0,
            stereo: true,
            render_images: false,
            pixel_noise_px: 0.0,
            imu_noise: false,
            gyro_bias: [0.0; 3],
            accel_bias: [0.0; 3],
        }
    }
}

impl ScenarioConfig {
    /// Named presets accepted as `synthetic:<name>` dataset specifiers.
    pub fn named(name: &str) -> Result<Self, VioError> {
        let base = ScenarioConfig::default();
        match name {
            "static" => Ok(ScenarioConfig {
                trajectory: Trajectory::Static,
                ..base
            }),
            "circle" => Ok(base),
            "circle_bob" => Ok(ScenarioConfig {
                trajectory: Trajectory::CircleBob {
                    radius: 2.0,
                    rate: 0.5,
                    bob_amplitude: 0.3,
                    cycles: 2.0,
                },
                ..base
            }),
            "circle_noisy" => Ok(ScenarioConfig {
                pixel_noise_px: 0.5,
                imu_noise: true,
                gyro_bias: [0.002, -0.001, 0.0015],
                accel_bias: [0.03, -0.02, 0.05],
                ..base
            }),
            other => Err(VioError::UnknownScenario(other.to_string())),
        }
    }
}

/// Trajectory state at one instant, all in the world frame except `omega_body`.
#[derive(Debug, Clone, Copy)]
struct TrajSample {
    p: Vector3<f64>,
    v: Vector3<f64>,
    /// Analytic reference channel, read by the discretization tests.
    #[allow(dead_code)]
    a: Vector3<f64>,
    r: Matrix3<f64>,
    /// Analytic reference channel, read by the discretization tests.
    #[allow(dead_code)]
    omega_body: Vector3<f64>,
}

/// Time warp: 0 on the lead-in, smoothstep ramp, then unit slope.
/// Returns (w, w', w'') with w' and w'' continuous everywhere.
fn warp(t: f64) -> (f64, f64, f64) {
    if t <= LEAD_IN_S {
        return (0.0, 0.0, 0.0);
    }
    let s = t - LEAD_IN_S;
    if s >= RAMP_S {
        return (RAMP_S * 0.5 + (s - RAMP_S), 1.0, 0.0);
    }
    let x = s / RAMP_S;
    (
        RAMP_S * (x * x * x - x * x * x * x * 0.5),
        3.0 * x * x - 2.0 * x * x * x,
        (6.0 * x - 6.0 * x * x) / RAMP_S,
    )
}

fn rot_z(phi: f64) -> Matrix3<f64> {
    so3_exp(&Vector3::new(0.0, 0.0, phi))
}

impl Trajectory {
    fn eval(&self, t: f64) -> TrajSample {
        match *self {
            Trajectory::Static => TrajSample {
                p: Vector3::zeros(),
                v: Vector3::zeros(),
                a: Vector3::zeros(),
                r: Matrix3::identity(),
                omega_body: Vector3::zeros(),
            },
            Trajectory::Circle { radius, rate } => {
                let (w, dw, ddw) = warp(t);
                let phi = rate * w;
                let dphi = rate * dw;
                let ddphi = rate * ddw;
                circle_sample(radius, phi, dphi, ddphi, 0.0, 0.0, 0.0)
            }
            Trajectory::CircleBob {
                radius,
                rate,
                bob_amplitude,
                cycles,
            } => {
                let (w, dw, ddw) = warp(t);
                let phi = rate * w;
                let dphi = rate * dw;
                let ddphi = rate * ddw;
                let z = bob_amplitude * (cycles * phi).sin();
                let dz = bob_amplitude * cycles * dphi * (cycles * phi).cos();
                let ddz = bob_amplitude
                    * (cycles * ddphi * (cycles * phi).cos()
                        - cycles * cycles * dphi * dphi * (cycles * phi).sin());
                circle_sample(radius, phi, dphi, ddphi, z, dz, ddz)
            }
        }
    }

    /// Center of the landmark cylinder.
    fn wall_center(&self) -> Vector3<f64> {
        match *self {
            Trajectory::Static => Vector3::zeros(),
            Trajectory::Circle { radius, .. } | Trajectory::CircleBob { radius, .. } => {
                Vector3::new(-radius, 0.0, 0.0)
            }
        }
    }

    fn wall_radius(&self) -> f64 {
        match *self {
            Trajectory::Static => 8.0,
            Trajectory::Circle { radius, .. } | Trajectory::CircleBob { radius, .. } => {
                radius + 6.0
            }
        }
    }
}

/// Circle of `radius` about (-radius, 0, z), starting at the origin and
/// heading +x, with the body yawed along the tangent.
fn circle_sample(
    radius: f64,
    phi: f64,
    dphi: f64,
    ddphi: f64,
    z: f64,
    dz: f64,
    ddz: f64,
) -> TrajSample {
    let (sin, cos) = phi.sin_cos();
    TrajSample {
        p: Vector3::new(radius * (cos - 1.0), radius * sin, z),
        v: Vector3::new(-radius * sin * dphi, radius * cos * dphi, dz),
        a: Vector3::new(
            -radius * (cos * dphi * dphi + sin * ddphi),
            radius * (cos * ddphi - sin * dphi * dphi),
            ddz,
        ),
        r: rot_z(phi),
        omega_body: Vector3::new(0.0, 0.0, dphi),
    }
}

/// Synthetic stereo rig: identical distortion-free pinhole cameras with
/// optical axes along body +x and a horizontal baseline.
pub fn synthetic_rig(stereo: bool) -> RigCalib {
    // Columns are the camera axes in the body frame: x_cam = -y_body,
    // y_cam = -z_body, z_cam = +x_body.
    let r_bc = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let intrinsics = CameraIntrinsics::pinhole(400.0, 400.0, 376.0, 240.0);
    let cam = |y_off: f64| CameraCalib {
        intrinsics,
        t_bc: Pose::new(r_bc, Vector3::new(0.0, y_off, 0.0)),
        width: 752,
        height: 480,
    };
    RigCalib {
        cam0: cam(0.055),
        cam1: stereo.then(|| cam(-0.055)),
        imu_noise: ImuNoise::euroc(),
        imu_rate_hz: 200.0,
        frame_rate_hz: 20.0,
    }
}

/// Generates the full sequence for a scenario.
pub fn synth_scenario(config: &ScenarioConfig) -> Result<SequenceData, VioError> {
    if config.duration_s <= 0.0 || config.imu_rate_hz <= 0.0 || config.frame_rate_hz <= 0.0 {
        return Err(VioError::Config(
            "scenario rates and duration must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rig = synthetic_rig(config.stereo);
    let traj = &config.trajectory;

    let landmarks = place_landmarks(traj, config.landmark_count, &mut rng);

    let imu_dt_ns = (1e9 / config.imu_rate_hz).round() as i64;
    let imu_count = (config.duration_s * config.imu_rate_hz).round() as usize;
    let gyro_bias = Vector3::from(config.gyro_bias);
    let accel_bias = Vector3::from(config.accel_bias);
    let g = gravity_world();

    let gyro_sigma = rig.imu_noise.gyro_density * config.imu_rate_hz.sqrt();
    let accel_sigma = rig.imu_noise.accel_density * config.imu_rate_hz.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut imu = Vec::with_capacity(imu_count);
    let mut gt_samples = Vec::with_capacity(imu_count);
    for k in 0..imu_count {
        let t_ns = k as i64 * imu_dt_ns;
        let t = t_ns as f64 * 1e-9;
        let s = traj.eval(t);
        let s_next = traj.eval((t_ns + imu_dt_ns) as f64 * 1e-9);
        let dt = imu_dt_ns as f64 * 1e-9;
        // Interval-mean rates: held constant over [t_k, t_k+1) they
        // reproduce the true attitude and velocity increments exactly.
        let mut gyro = so3_log(&(s.r.transpose() * s_next.r)) / dt + gyro_bias;
        let mut accel = s.r.transpose() * ((s_next.v - s.v) / dt - g) + accel_bias;
        if config.imu_noise {
            for i in 0..3 {
                gyro[i] += gyro_sigma * normal.sample(&mut rng);
                accel[i] += accel_sigma * normal.sample(&mut rng);
            }
        }
        imu.push(ImuSample { t_ns, gyro, accel });
        gt_samples.push(GroundTruthSample {
            t_ns,
            p: s.p,
            r: s.r,
            v: s.v,
        });
    }

    let frame_dt_ns = (1e9 / config.frame_rate_hz).round() as i64;
    let frame_count = (config.duration_s * config.frame_rate_hz).round() as usize;
    let mut frames = Vec::with_capacity(frame_count);
    let mut total_obs = 0usize;
    for k in 0..frame_count {
        let t_ns = k as i64 * frame_dt_ns;
        let s = traj.eval(t_ns as f64 * 1e-9);
        let body = Pose::new(s.r, s.p);
        let mut observations = Vec::new();
        for (id, lm) in landmarks.iter().enumerate() {
            let Some(obs) = observe(&rig, &body, lm, id as u32) else {
                continue;
            };
            let mut obs = obs;
            if config.pixel_noise_px > 0.0 {
                obs.u += config.pixel_noise_px * normal.sample(&mut rng);
                obs.v += config.pixel_noise_px * normal.sample(&mut rng);
                if let Some(ur) = obs.u_right.as_mut() {
                    *ur += config.pixel_noise_px * normal.sample(&mut rng);
                }
            }
            observations.push(obs);
        }
        total_obs += observations.len();
        let vision = if config.render_images {
            let left = render_dots(&rig.cam0, observations.iter().map(|o| (o.u, o.v)));
            let right = rig.cam1.as_ref().map(|cam| {
                render_dots(
                    cam,
                    observations
                        .iter()
                        .filter_map(|o| o.u_right.map(|ur| (ur, o.v))),
                )
            });
            VisionData::Images {
                left: ImageRef::Memory(left),
                right: right.map(ImageRef::Memory),
            }
        } else {
            VisionData::Observations(observations)
        };
        frames.push(FrameEvent { t_ns, vision });
    }

    if total_obs == 0 {
        return Err(VioError::Config(
            "degenerate scenario: no landmark visible in any frame".into(),
        ));
    }

    Ok(SequenceData {
        imu,
        frames,
        ground_truth: GroundTruth {
            samples: gt_samples,
        },
        rig,
        landmarks: Some(landmarks),
    })
}

fn place_landmarks(
    traj: &Trajectory,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vector3<f64>> {
    let center = traj.wall_center();
    let radius = traj.wall_radius();
    (0..count)
        .map(|_| {
            let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
            let height = rng.random_range(-3.0..3.0);
            let r = radius + rng.random_range(-0.5..0.5);
            center + Vector3::new(r * azimuth.cos(), r * azimuth.sin(), height)
        })
        .collect()
}

/// Projects a landmark into one or both cameras; `None` unless the point is in
/// front of the camera and inside the margin in every required view.
fn observe(rig: &RigCalib, body: &Pose, lm: &Vector3<f64>, id: u32) -> Option<Observation> {
    let project = |cam: &CameraCalib| -> Option<nalgebra::Vector2<f64>> {
        let t_wc = body.compose(&cam.t_bc);
        let p_c = t_wc.inverse().transform(lm);
        if p_c.z < MIN_DEPTH_M {
            return None;
        }
        let px = cam.intrinsics.project(&p_c)?;
        let m = VISIBILITY_MARGIN_PX;
        (px.x >= m && px.x < cam.width as f64 - m && px.y >= m && px.y < cam.height as f64 - m)
            .then_some(px)
    };
    let left = project(&rig.cam0)?;
    let u_right = match &rig.cam1 {
        Some(cam1) => Some(project(cam1)?.x),
        None => None,
    };
    Some(Observation {
        landmark: id,
        u: left.x,
        v: left.y,
        u_right,
    })
}

/// White anti-aliased dots of radius 2 px on a dark background.
fn render_dots(cam: &CameraCalib, points: impl Iterator<Item = (f64, f64)>) -> Frame {
    const BG: f64 = 10.0;
    const PEAK: f64 = 245.0;
    const RADIUS: f64 = 2.0;
    let (w, h) = (cam.width, cam.height);
    let mut pixels = vec![BG as u8; w * h];
    for (u, v) in points {
        let x0 = ((u - RADIUS - 1.0).floor().max(0.0)) as usize;
        let x1 = ((u + RADIUS + 1.0).ceil().min(w as f64 - 1.0)) as usize;
        let y0 = ((v - RADIUS - 1.0).floor().max(0.0)) as usize;
        let y1 = ((v + RADIUS + 1.0).ceil().min(h as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - u).powi(2) + (y as f64 - v).powi(2)).sqrt();
                let coverage = (RADIUS + 0.5 - d).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let idx = y * w + x;
                    let value = BG + PEAK * coverage;
                    pixels[idx] = pixels[idx].max(value.round() as u8);
                }
            }
        }
    }
    Frame::new(w, h, pixels).expect("synthetic frame dimensions are block-aligned")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn static_scenario_measures_gravity_only() {
        let config = ScenarioConfig {
            trajectory: Trajectory::Static,
            duration_s: 2.0,
            ..Default::default()
        };
        let seq = synth_scenario(&config).unwrap();
        assert_eq!(seq.imu.len(), 400);
        for s in &seq.imu {
            assert_relative_eq!(s.gyro, Vector3::zeros(), epsilon = 1e-15);
            assert_relative_eq!(s.accel, Vector3::new(0.0, 0.0, GRAVITY), epsilon = 1e-12);
        }
    }

    #[test]
    fn circle_steady_state_rate_and_accel() {
        let config = ScenarioConfig::default();
        let seq = synth_scenario(&config).unwrap();
        // Steady phase begins at 3 s; check a sample at 5 s.
        let idx = 1000;
        assert_eq!(seq.imu[idx].t_ns, 5_000_000_000);
        let s = &seq.imu[idx];
        // A steady turn has constant body rate, so the interval mean is
        // the instantaneous value exactly.
        assert_relative_eq!(s.gyro, Vector3::new(0.0, 0.0, 0.5), epsilon = 1e-12);
        // The specific-force vector rotates within the interval, so its
        // mean trails the instantaneous magnitude at second order in
        // (rate * dt): well under a part per million here.
        let centripetal = 2.0 * 0.5 * 0.5;
        let expected = (centripetal * centripetal + GRAVITY * GRAVITY).sqrt();
        assert_relative_eq!(s.accel.norm(), expected, epsilon = 1e-6);
    }

    #[test]
    fn lead_in_is_static() {
        let seq = synth_scenario(&ScenarioConfig::default()).unwrap();
        for s in seq.imu.iter().take(200) {
            assert_relative_eq!(s.gyro, Vector3::zeros(), epsilon = 1e-15);
            assert_relative_eq!(s.accel, Vector3::new(0.0, 0.0, GRAVITY), epsilon = 1e-12);
        }
        let g0 = seq.ground_truth.samples[0];
        assert_relative_eq!(g0.p, Vector3::zeros(), epsilon = 1e-15);
        assert_relative_eq!(g0.r, Matrix3::identity(), epsilon = 1e-15);
    }

    /// Zero-order-hold replay: each sample held over its interval, the
    /// discrete model the interval-mean stream is exact under.
    fn integrate_imu(seq: &SequenceData) -> (Vector3<f64>, Vector3<f64>) {
        let g = gravity_world();
        let mut r = Matrix3::<f64>::identity();
        let mut v = Vector3::zeros();
        let mut p = Vector3::zeros();
        let n = seq.imu.len() - 1;
        for k in 0..n {
            let dt = (seq.imu[k + 1].t_ns - seq.imu[k].t_ns) as f64 * 1e-9;
            let a_w = r * seq.imu[k].accel + g;
            p += v * dt + a_w * (0.5 * dt * dt);
            v += a_w * dt;
            r *= so3_exp(&(seq.imu[k].gyro * dt));
        }
        let gt = seq.ground_truth.samples[n];
        (p - gt.p, v - gt.v)
    }

    #[test]
    fn interval_means_track_the_analytic_derivatives() {
        let config = ScenarioConfig::default();
        let seq = synth_scenario(&config).unwrap();
        // Mid-ramp sample: rates change within the interval. The mean
        // agrees with the midpoint derivative at second order in dt,
        // while the interval-start value is visibly different.
        let idx = 400;
        let t = seq.imu[idx].t_ns as f64 * 1e-9;
        assert_relative_eq!(t, 2.0, epsilon = 1e-12);
        let dt = 0.005;
        let start = config.trajectory.eval(t);
        let mid = config.trajectory.eval(t + 0.5 * dt);
        assert_relative_eq!(seq.imu[idx].gyro, mid.omega_body, epsilon = 1e-5);
        assert_relative_eq!(
            start.r * seq.imu[idx].accel,
            mid.a - gravity_world(),
            epsilon = 1e-5
        );
        assert!(
            (seq.imu[idx].gyro - start.omega_body).norm() > 1e-4,
            "the stream reports the mean, not the endpoint value"
        );
    }

    #[test]
    fn imu_stream_integrates_to_ground_truth() {
        for name in ["circle", "circle_bob"] {
            let config = ScenarioConfig::named(name).unwrap();
            let seq = synth_scenario(&config).unwrap();
            let (dp, dv) = integrate_imu(&seq);
            // Attitude and velocity increments are exact by construction;
            // position carries only the trapezoid residue of the held
            // velocity, micrometers over the full ten seconds.
            assert!(
                dp.norm() < 1e-5,
                "{name}: position drift {} after 10 s",
                dp.norm()
            );
            assert!(dv.norm() < 1e-9, "{name}: velocity drift {}", dv.norm());
        }
    }

    #[test]
    fn observations_match_reprojection() {
        let seq = synth_scenario(&ScenarioConfig::default()).unwrap();
        let landmarks = seq.landmarks.as_ref().unwrap();
        let mut checked = 0;
        for frame in &seq.frames {
            let VisionData::Observations(obs) = &frame.vision else {
                panic!("expected observations")
            };
            let gt = seq.ground_truth.pose_at(frame.t_ns).unwrap();
            for o in obs {
                let lm = &landmarks[o.landmark as usize];
                let p_c = gt
                    .compose(&seq.rig.cam0.t_bc)
                    .inverse()
                    .transform(lm);
                let px = seq.rig.cam0.intrinsics.project(&p_c).unwrap();
                assert_relative_eq!(px.x, o.u, epsilon = 1e-9);
                assert_relative_eq!(px.y, o.v, epsilon = 1e-9);
                if let Some(ur) = o.u_right {
                    // Rectified parallel rig: same row, positive disparity.
                    let cam1 = seq.rig.cam1.as_ref().unwrap();
                    let p_c1 = gt.compose(&cam1.t_bc).inverse().transform(lm);
                    let px1 = cam1.intrinsics.project(&p_c1).unwrap();
                    assert_relative_eq!(px1.x, ur, epsilon = 1e-9);
                    assert_relative_eq!(px1.y, o.v, epsilon = 1e-9);
                    assert!(o.u - ur > 0.0, "disparity must be positive");
                }
                checked += 1;
            }
        }
        assert!(checked > 500, "scenario too sparse: {checked} observations");
    }

    #[test]
    fn seeded_runs_are_identical() {
        let mut config = ScenarioConfig::named("circle_noisy").unwrap();
        config.render_images = true;
        config.duration_s = 1.0;
        let a = synth_scenario(&config).unwrap();
        let b = synth_scenario(&config).unwrap();
        assert_eq!(a, b);
        config.seed = 1;
        let c = synth_scenario(&config).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rendered_dots_land_on_observations() {
        let config = ScenarioConfig {
            render_images: true,
            duration_s: 1.0,
            ..ScenarioConfig::default()
        };
        let seq = synth_scenario(&config).unwrap();
        let oracle = synth_scenario(&ScenarioConfig {
            render_images: false,
            duration_s: 1.0,
            ..ScenarioConfig::default()
        })
        .unwrap();
        let VisionData::Images { left, .. } = &seq.frames[0].vision else {
            panic!("expected images")
        };
        let frame = left.load().unwrap();
        let VisionData::Observations(obs) = &oracle.frames[0].vision else {
            panic!("expected observations")
        };
        assert!(!obs.is_empty());
        for o in obs {
            let (x, y) = (o.u.round() as usize, o.v.round() as usize);
            assert!(
                frame.pixel(x, y) > 150,
                "no dot at ({x},{y}): {}",
                frame.pixel(x, y)
            );
        }
        // Background stays dark.
        assert_eq!(frame.pixel(0, 0), 10);
    }

    #[test]
    fn unknown_scenario_rejected() {
        assert!(matches!(
            ScenarioConfig::named("zigzag"),
            Err(VioError::UnknownScenario(_))
        ));
    }
}
