//! ASL-layout sequence directories: `imu0/`, `cam0/`, `cam1/`,
//! `state_groundtruth_estimate0/`, each with a `data.csv`.
//!
//! CSV rows are hand-parsed so malformed input reports its file and line.
//! Camera and IMU `sensor.yaml` files are read with a minimal string scanner
//! that understands only the keys this crate needs; missing files or keys fall
//! back to the published calibration of the reference dataset. Images decode
//! on demand so full sequences stream at constant memory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use super::{
    CameraCalib, FrameEvent, GroundTruth, GroundTruthSample, ImageRef, RigCalib, SequenceData,
    VisionData,
};
use crate::error::VioError;
use crate::framecodec::Frame;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::ife::{ImuNoise, ImuSample};

/// Published calibration for the reference stereo rig.
pub fn euroc_default_rig() -> RigCalib {
    let cam0 = CameraCalib {
        intrinsics: CameraIntrinsics {
            fx: 458.654,
            fy: 457.296,
            cx: 367.215,
            cy: 248.375,
            distortion: [-0.28340811, 0.07395907, 0.00019359, 1.76187114e-05],
        },
        t_bc: pose_from_rowmajor(&[
            0.0148655429818, -0.999880929698, 0.00414029679422, -0.0216401454975,
            0.999557249008, 0.0149672133247, 0.025715529948, -0.064676986768,
            -0.0257744366974, 0.00375618835797, 0.999660727178, 0.00981073058949,
            0.0, 0.0, 0.0, 1.0,
        ]),
        width: 752,
        height: 480,
    };
    let cam1 = CameraCalib {
        intrinsics: CameraIntrinsics {
            fx: 457.587,
            fy: 456.134,
            cx: 379.999,
            cy: 255.238,
            distortion: [-0.28368365, 0.07451284, -0.00010473, -3.55590700e-05],
        },
        t_bc: pose_from_rowmajor(&[
            0.0125552670891, -0.999755099723, 0.0182237714554, -0.0198435579556,
            0.999598781151, 0.0130119051815, 0.0251588363115, 0.0453689425024,
            -0.0253898008918, 0.0179005838253, 0.999517347078, 0.00786212447038,
            0.0, 0.0, 0.0, 1.0,
        ]),
        width: 752,
        height: 480,
    };
    RigCalib {
        cam0,
        cam1: Some(cam1),
        imu_noise: ImuNoise::euroc(),
        imu_rate_hz: 200.0,
        frame_rate_hz: 20.0,
    }
}

fn pose_from_rowmajor(m: &[f64; 16]) -> Pose {
    Pose::new(
        Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
        Vector3::new(m[3], m[7], m[11]),
    )
}

pub fn load_euroc(dir: impl AsRef<Path>) -> Result<SequenceData, VioError> {
    let dir = dir.as_ref();
    let imu = load_imu_csv(&dir.join("imu0").join("data.csv"))?;
    let cam0 = load_cam_index(&dir.join("cam0"))?;
    let cam1_dir = dir.join("cam1");
    let cam1 = if cam1_dir.join("data.csv").exists() {
        Some(load_cam_index(&cam1_dir)?)
    } else {
        None
    };
    let ground_truth = match load_gt_csv(
        &dir.join("state_groundtruth_estimate0").join("data.csv"),
    ) {
        Ok(gt) => gt,
        Err(VioError::Io { .. }) => {
            log::warn!("no ground truth under {}", dir.display());
            GroundTruth::default()
        }
        Err(e) => return Err(e),
    };
    let rig = load_rig(dir, cam1.is_some());

    let right_by_time: BTreeMap<i64, PathBuf> = cam1.into_iter().flatten().collect();
    let frames = cam0
        .into_iter()
        .map(|(t_ns, path)| FrameEvent {
            t_ns,
            vision: VisionData::Images {
                left: ImageRef::File(path),
                right: right_by_time.get(&t_ns).cloned().map(ImageRef::File),
            },
        })
        .collect();

    Ok(SequenceData {
        imu,
        frames,
        ground_truth,
        rig,
        landmarks: None,
    })
}

/// Splits one CSV row, rejecting rows with the wrong field count.
fn fields<'a>(
    line: &'a str,
    min: usize,
    path: &Path,
    lineno: usize,
) -> Result<Vec<&'a str>, VioError> {
    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
    if parts.len() < min {
        return Err(VioError::parse(
            path,
            lineno,
            format!("expected at least {min} comma-separated fields, got {}", parts.len()),
        ));
    }
    Ok(parts)
}

fn parse_num<T: std::str::FromStr>(
    s: &str,
    what: &str,
    path: &Path,
    lineno: usize,
) -> Result<T, VioError> {
    s.parse()
        .map_err(|_| VioError::parse(path, lineno, format!("bad {what}: `{s}`")))
}

/// Lines of a CSV file with 1-based numbers, comments and blanks skipped.
fn csv_rows(path: &Path) -> Result<Vec<(usize, String)>, VioError> {
    let text = fs::read_to_string(path).map_err(|e| VioError::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.to_string()))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .collect())
}

fn load_imu_csv(path: &Path) -> Result<Vec<ImuSample>, VioError> {
    let mut out = Vec::new();
    for (lineno, line) in csv_rows(path)? {
        let f = fields(&line, 7, path, lineno)?;
        let t_ns: i64 = parse_num(f[0], "timestamp", path, lineno)?;
        let mut vals = [0.0f64; 6];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = parse_num(f[i + 1], "imu value", path, lineno)?;
        }
        if let Some(last) = out.last() {
            let last: &ImuSample = last;
            if t_ns <= last.t_ns {
                return Err(VioError::parse(
                    path,
                    lineno,
                    format!("timestamp {t_ns} not increasing (previous {})", last.t_ns),
                ));
            }
        }
        out.push(ImuSample {
            t_ns,
            gyro: Vector3::new(vals[0], vals[1], vals[2]),
            accel: Vector3::new(vals[3], vals[4], vals[5]),
        });
    }
    Ok(out)
}

fn load_cam_index(cam_dir: &Path) -> Result<Vec<(i64, PathBuf)>, VioError> {
    let path = cam_dir.join("data.csv");
    let mut out = Vec::new();
    for (lineno, line) in csv_rows(&path)? {
        let f = fields(&line, 2, &path, lineno)?;
        let t_ns: i64 = parse_num(f[0], "timestamp", &path, lineno)?;
        out.push((t_ns, cam_dir.join("data").join(f[1])));
    }
    out.sort_by_key(|(t, _)| *t);
    Ok(out)
}

fn load_gt_csv(path: &Path) -> Result<GroundTruth, VioError> {
    let mut samples = Vec::new();
    for (lineno, line) in csv_rows(path)? {
        let f = fields(&line, 8, path, lineno)?;
        let t_ns: i64 = parse_num(f[0], "timestamp", path, lineno)?;
        let mut vals = [0.0f64; 7];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = parse_num(f[i + 1], "ground-truth value", path, lineno)?;
        }
        let v = if f.len() >= 11 {
            Vector3::new(
                parse_num(f[8], "velocity", path, lineno)?,
                parse_num(f[9], "velocity", path, lineno)?,
                parse_num(f[10], "velocity", path, lineno)?,
            )
        } else {
            Vector3::zeros()
        };
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            vals[3], vals[4], vals[5], vals[6],
        ));
        samples.push(GroundTruthSample {
            t_ns,
            p: Vector3::new(vals[0], vals[1], vals[2]),
            r: *q.to_rotation_matrix().matrix(),
            v,
        });
    }
    samples.sort_by_key(|s| s.t_ns);
    Ok(GroundTruth { samples })
}

pub(super) fn load_image(path: &Path) -> Result<Frame, VioError> {
    let img = image::open(path)
        .map_err(|e| VioError::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Frame::new(w, h, img.into_raw())
}

/// Scans `sensor.yaml` text for `key:` followed by a bracketed numeric array,
/// which may span lines.
fn yaml_array(text: &str, key: &str) -> Option<Vec<f64>> {
    let at = text.find(&format!("{key}:"))?;
    let rest = &text[at..];
    let open = rest.find('[')?;
    let close = rest[open..].find(']')? + open;
    rest[open + 1..close]
        .split(',')
        .map(|s| s.trim().parse().ok())
        .collect()
}

fn yaml_scalar(text: &str, key: &str) -> Option<f64> {
    for line in text.lines() {
        if let Some(rest) = line.trim_start().strip_prefix(&format!("{key}:")) {
            return rest.trim().parse().ok();
        }
    }
    None
}

/// Reads one camera's `sensor.yaml`, overlaying parsed fields on `fallback`.
fn load_cam_yaml(path: &Path, fallback: &CameraCalib) -> CameraCalib {
    let Ok(text) = fs::read_to_string(path) else {
        return fallback.clone();
    };
    let mut cam = fallback.clone();
    if let Some(v) = yaml_array(&text, "intrinsics") {
        if v.len() == 4 {
            (cam.intrinsics.fx, cam.intrinsics.fy) = (v[0], v[1]);
            (cam.intrinsics.cx, cam.intrinsics.cy) = (v[2], v[3]);
        }
    }
    if let Some(v) = yaml_array(&text, "distortion_coefficients") {
        if v.len() == 4 {
            cam.intrinsics.distortion = [v[0], v[1], v[2], v[3]];
        }
    }
    if let Some(v) = yaml_array(&text, "resolution") {
        if v.len() == 2 {
            (cam.width, cam.height) = (v[0] as usize, v[1] as usize);
        }
    }
    if let Some(at) = text.find("T_BS") {
        if let Some(v) = yaml_array(&text[at..], "data") {
            if v.len() == 16 {
                let mut m = [0.0; 16];
                m.copy_from_slice(&v);
                cam.t_bc = pose_from_rowmajor(&m);
            }
        }
    }
    cam
}

fn load_rig(dir: &Path, stereo: bool) -> RigCalib {
    let defaults = euroc_default_rig();
    let cam0 = load_cam_yaml(&dir.join("cam0").join("sensor.yaml"), &defaults.cam0);
    let cam1 = stereo.then(|| {
        load_cam_yaml(
            &dir.join("cam1").join("sensor.yaml"),
            defaults.cam1.as_ref().unwrap(),
        )
    });
    let mut noise = defaults.imu_noise;
    let mut imu_rate = defaults.imu_rate_hz;
    if let Ok(text) = fs::read_to_string(dir.join("imu0").join("sensor.yaml")) {
        if let Some(v) = yaml_scalar(&text, "gyroscope_noise_density") {
            noise.gyro_density = v;
        }
        if let Some(v) = yaml_scalar(&text, "gyroscope_random_walk") {
            noise.gyro_walk = v;
        }
        if let Some(v) = yaml_scalar(&text, "accelerometer_noise_density") {
            noise.accel_density = v;
        }
        if let Some(v) = yaml_scalar(&text, "accelerometer_random_walk") {
            noise.accel_walk = v;
        }
        if let Some(v) = yaml_scalar(&text, "rate_hz") {
            imu_rate = v;
        }
    }
    let frame_rate_hz = fs::read_to_string(dir.join("cam0").join("sensor.yaml"))
        .ok()
        .and_then(|t| yaml_scalar(&t, "rate_hz"))
        .unwrap_or(defaults.frame_rate_hz);
    RigCalib {
        cam0,
        cam1,
        imu_noise: noise,
        imu_rate_hz: imu_rate,
        frame_rate_hz,
    }
}

/// Writes a sequence back out in ASL layout. Frames are saved as PNG; the
/// float formatting round-trips exactly, so reloading reproduces the IMU
/// stream bit for bit.
pub fn save_euroc(dir: impl AsRef<Path>, seq: &SequenceData) -> Result<(), VioError> {
    let dir = dir.as_ref();
    let write =
        |path: &Path, text: &str| fs::write(path, text).map_err(|e| VioError::io(path, e));
    let mkdir = |path: &Path| fs::create_dir_all(path).map_err(|e| VioError::io(path, e));

    let imu_dir = dir.join("imu0");
    mkdir(&imu_dir)?;
    let mut csv = String::from(
        "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]\n",
    );
    for s in &seq.imu {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            s.t_ns, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        )
        .expect("string write");
    }
    write(&imu_dir.join("data.csv"), &csv)?;
    write(&imu_dir.join("sensor.yaml"), &imu_yaml(&seq.rig))?;

    save_cam(dir, "cam0", seq, |f| match &f.vision {
        VisionData::Images { left, .. } => Some(left.clone()),
        VisionData::Observations(_) => None,
    })?;
    if seq.frames.iter().any(|f| f.is_stereo()) {
        save_cam(dir, "cam1", seq, |f| match &f.vision {
            VisionData::Images { right, .. } => right.clone(),
            VisionData::Observations(_) => None,
        })?;
    }

    let gt_dir = dir.join("state_groundtruth_estimate0");
    mkdir(&gt_dir)?;
    let mut csv = String::from(
        "#timestamp,p_RS_R_x [m],p_RS_R_y [m],p_RS_R_z [m],q_RS_w [],q_RS_x [],q_RS_y [],q_RS_z [],v_RS_R_x [m s^-1],v_RS_R_y [m s^-1],v_RS_R_z [m s^-1]\n",
    );
    for s in &seq.ground_truth.samples {
        let q = UnitQuaternion::from_matrix(&s.r);
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.t_ns, s.p.x, s.p.y, s.p.z, q.w, q.i, q.j, q.k, s.v.x, s.v.y, s.v.z
        )
        .expect("string write");
    }
    write(&gt_dir.join("data.csv"), &csv)?;
    Ok(())
}

fn save_cam(
    dir: &Path,
    cam_name: &str,
    seq: &SequenceData,
    image_of: impl Fn(&FrameEvent) -> Option<ImageRef>,
) -> Result<(), VioError> {
    let cam_dir = dir.join(cam_name);
    let data_dir = cam_dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| VioError::io(&data_dir, e))?;
    let mut csv = String::from("#timestamp [ns],filename\n");
    for frame in &seq.frames {
        let Some(image) = image_of(frame) else {
            continue;
        };
        let name = format!("{}.png", frame.t_ns);
        let img = image.load()?;
        let path = data_dir.join(&name);
        let buffer = image::GrayImage::from_raw(
            img.width() as u32,
            img.height() as u32,
            img.pixels().to_vec(),
        )
        .expect("frame buffer size");
        buffer.save(&path).map_err(|e| VioError::Image {
            path: path.clone(),
            source: e,
        })?;
        writeln!(csv, "{},{name}", frame.t_ns).expect("string write");
    }
    let path = cam_dir.join("data.csv");
    fs::write(&path, csv).map_err(|e| VioError::io(&path, e))?;

    let calib = if cam_name == "cam0" {
        Some(&seq.rig.cam0)
    } else {
        seq.rig.cam1.as_ref()
    };
    if let Some(c) = calib {
        let path = cam_dir.join("sensor.yaml");
        fs::write(&path, cam_yaml(c, seq.rig.frame_rate_hz)).map_err(|e| VioError::io(&path, e))?;
    }
    Ok(())
}

fn cam_yaml(cam: &CameraCalib, rate_hz: f64) -> String {
    let r = &cam.t_bc.r;
    let t = &cam.t_bc.t;
    format!(
        "sensor_type: camera\nrate_hz: {rate_hz}\nT_BS:\n  rows: 4\n  cols: 4\n  data: [{}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, 0.0, 0.0, 0.0, 1.0]\nresolution: [{}, {}]\ncamera_model: pinhole\nintrinsics: [{}, {}, {}, {}]\ndistortion_model: radial-tangential\ndistortion_coefficients: [{}, {}, {}, {}]\n",
        r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
        r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
        r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        cam.width, cam.height,
        cam.intrinsics.fx, cam.intrinsics.fy, cam.intrinsics.cx, cam.intrinsics.cy,
        cam.intrinsics.distortion[0], cam.intrinsics.distortion[1],
        cam.intrinsics.distortion[2], cam.intrinsics.distortion[3],
    )
}

fn imu_yaml(rig: &RigCalib) -> String {
    format!(
        "sensor_type: imu\nrate_hz: {}\ngyroscope_noise_density: {}\ngyroscope_random_walk: {}\naccelerometer_noise_density: {}\naccelerometer_random_walk: {}\n",
        rig.imu_rate_hz,
        rig.imu_noise.gyro_density,
        rig.imu_noise.gyro_walk,
        rig.imu_noise.accel_density,
        rig.imu_noise.accel_walk,
    )
}
