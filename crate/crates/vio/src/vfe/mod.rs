//! Vision frontend: feature tracking, detection, rectification, stereo
//! matching, and gyro-aided geometric verification.
//!
//! The frontend keeps a bounded set of feature tracks alive from frame to
//! frame and, on keyframes only, refreshes it: new corners are detected
//! where tracks are missing, the stereo pair is rectified and matched to
//! attach a right-image pixel to each feature, and RANSAC drops tracks
//! that disagree with the gyro rotation between keyframes. On every
//! other frame the only work is pyramidal Lucas-Kanade tracking, which
//! is what makes the per-frame memory footprint small.
//!
//! Submodules are organized by stage: [`pyramid`] and [`klt`] for
//! tracking, [`detect`] for corner detection, [`rectify`] and [`stereo`]
//! for the stereo path, and [`ransac`] for verification.

pub mod detect;
pub mod klt;
pub mod pyramid;
pub mod ransac;
pub mod rectify;
pub mod stereo;

use nalgebra::Vector2;

pub use detect::detect_features;
pub use klt::{track_feature, track_features};
pub use pyramid::{GrayImage, Pyramid};
pub use ransac::{mono_ransac_2pt, stereo_ransac_1pt, RansacResult};
pub use rectify::{compute_rectification, rectified_pixel, remap, Rectification};
pub use stereo::{stereo_match, triangulate, PixelSource};

/// Frontend tuning knobs. The defaults are the largest values the
/// programmable hardware parameters accept: 3 pyramid levels, a 15x15
/// tracking window with 30 iterations per level, a 51x5 stereo template
/// slid over a 421x5 search region, 200 features per frame, and a
/// 57x32-cell detection grid (1824 candidate slots).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VfeConfig {
    /// Pyramid levels used by tracking.
    pub pyramid_levels: usize,
    /// Side of the square Lucas-Kanade window, px.
    pub lk_window: usize,
    /// Iteration cap per pyramid level.
    pub lk_iterations: usize,
    /// Update norm below which tracking iteration stops, px.
    pub lk_epsilon: f64,
    /// Stereo template width, px.
    pub template_width: usize,
    /// Stereo template and search-region height, px.
    pub template_height: usize,
    /// Stereo search-region width, px.
    pub search_width: usize,
    /// Feature capacity per frame.
    pub max_features: usize,
    /// Detection grid columns.
    pub grid_cols: usize,
    /// Detection grid rows.
    pub grid_rows: usize,
    /// Minimum spacing between a new detection and any feature, px.
    pub suppression_radius: f64,
    /// Floor on the min-eigenvalue corner score.
    pub min_corner_score: f64,
    /// Monocular RANSAC sample count.
    pub mono_ransac_iters: usize,
    /// Stereo RANSAC sample count.
    pub stereo_ransac_iters: usize,
    /// Epipolar inlier threshold, px.
    pub ransac_threshold_px: f64,
    /// Stereo 3D inlier threshold, m.
    pub stereo_threshold_m: f64,
    /// Disparity at or below this triangulates as too far, px.
    pub min_disparity: f64,
    /// Best-to-second-best SAD ratio above which a match is ambiguous.
    pub ratio_test: f64,
}

impl Default for VfeConfig {
    fn default() -> Self {
        VfeConfig {
            pyramid_levels: 3,
            lk_window: 15,
            lk_iterations: 30,
            lk_epsilon: 0.01,
            template_width: 51,
            template_height: 5,
            search_width: 421,
            max_features: 200,
            grid_cols: 57,
            grid_rows: 32,
            suppression_radius: 10.0,
            min_corner_score: 1.0,
            mono_ransac_iters: 100,
            stereo_ransac_iters: 50,
            ransac_threshold_px: 1.5,
            stereo_threshold_m: 0.05,
            min_disparity: 1.0,
            ratio_test: 0.8,
        }
    }
}

/// One live feature track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    /// Landmark identity, unique for the lifetime of the frontend.
    pub landmark: u64,
    /// Subpixel position in the left frame.
    pub px: Vector2<f64>,
    /// Column of the stereo match in the rectified right frame, if any.
    pub right_u: Option<f64>,
    /// Frames this track has survived, 0 on the frame it was born.
    pub age: u32,
}

/// The live feature set, bounded by the frame capacity. Landmark ids
/// count up monotonically and are never reissued, so a downstream
/// consumer can treat an id as naming one physical landmark forever.
#[derive(Debug, Clone, Default)]
pub struct TrackingData {
    features: Vec<Feature>,
    next_landmark: u64,
    capacity: usize,
}

impl TrackingData {
    pub fn new(capacity: usize) -> Self {
        TrackingData {
            features: Vec::new(),
            next_landmark: 0,
            capacity,
        }
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Ids handed out so far.
    pub fn issued(&self) -> u64 {
        self.next_landmark
    }

    /// Admits a new track at `px`. Returns its landmark id, or None when
    /// the set is full.
    pub fn spawn(&mut self, px: Vector2<f64>) -> Option<u64> {
        if self.features.len() >= self.capacity {
            return None;
        }
        let id = self.next_landmark;
        self.next_landmark += 1;
        self.features.push(Feature {
            landmark: id,
            px,
            right_u: None,
            age: 0,
        });
        Some(id)
    }

    /// Applies per-feature tracking results in order: Some moves the
    /// feature and ages it, None drops it. Stereo associations reset
    /// because they belong to the previous frame.
    pub fn apply_tracking(&mut self, results: &[Option<Vector2<f64>>]) {
        assert_eq!(results.len(), self.features.len());
        let mut kept = Vec::with_capacity(self.features.len());
        for (f, r) in self.features.iter().zip(results) {
            if let Some(px) = r {
                kept.push(Feature {
                    landmark: f.landmark,
                    px: *px,
                    right_u: None,
                    age: f.age + 1,
                });
            }
        }
        self.features = kept;
    }

    /// Keeps only the listed landmarks (RANSAC consensus).
    pub fn retain_landmarks(&mut self, keep: &std::collections::HashSet<u64>) {
        self.features.retain(|f| keep.contains(&f.landmark));
    }

    /// Drops tracks that have reached the given age.
    pub fn retire_older_than(&mut self, max_age: u32) {
        self.features.retain(|f| f.age < max_age);
    }

    pub fn set_right(&mut self, landmark: u64, right_u: Option<f64>) {
        if let Some(f) = self.features.iter_mut().find(|f| f.landmark == landmark) {
            f.right_u = right_u;
        }
    }

    pub fn positions(&self) -> Vec<Vector2<f64>> {
        self.features.iter().map(|f| f.px).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_programmable_maxima() {
        let cfg = VfeConfig::default();
        assert_eq!(cfg.pyramid_levels, 3);
        assert_eq!(cfg.lk_window, 15);
        assert_eq!(cfg.lk_iterations, 30);
        assert_eq!((cfg.template_width, cfg.template_height), (51, 5));
        assert_eq!(cfg.search_width, 421);
        assert_eq!(cfg.max_features, 200);
        assert_eq!(cfg.grid_cols * cfg.grid_rows, 1824);
    }

    #[test]
    fn capacity_bounds_the_track_count() {
        let mut td = TrackingData::new(3);
        for i in 0..5 {
            let got = td.spawn(Vector2::new(i as f64, 0.0));
            assert_eq!(got.is_some(), i < 3);
        }
        assert_eq!(td.len(), 3);
    }

    #[test]
    fn landmark_ids_are_never_reused() {
        let mut td = TrackingData::new(2);
        let a = td.spawn(Vector2::zeros()).unwrap();
        let b = td.spawn(Vector2::zeros()).unwrap();
        // Both tracks die; new tracks must get fresh ids.
        td.apply_tracking(&[None, None]);
        let c = td.spawn(Vector2::zeros()).unwrap();
        let d = td.spawn(Vector2::zeros()).unwrap();
        let ids = [a, b, c, d];
        let unique: std::collections::HashSet<u64> = ids.iter().copied().collect();
        assert_eq!(unique.len(), 4);
    }

    #[test]
    fn tracking_results_move_age_and_drop() {
        let mut td = TrackingData::new(8);
        let a = td.spawn(Vector2::new(10.0, 10.0)).unwrap();
        td.spawn(Vector2::new(20.0, 10.0)).unwrap();
        td.set_right(a, Some(8.5));
        td.apply_tracking(&[Some(Vector2::new(11.0, 10.5)), None]);
        assert_eq!(td.len(), 1);
        let f = td.features()[0];
        assert_eq!(f.landmark, a);
        assert_eq!(f.px, Vector2::new(11.0, 10.5));
        assert_eq!(f.age, 1);
        // Stereo association does not carry across frames.
        assert_eq!(f.right_u, None);
    }

    #[test]
    fn age_retirement_removes_old_tracks() {
        let mut td = TrackingData::new(8);
        td.spawn(Vector2::zeros()).unwrap();
        for _ in 0..10 {
            let px = td.positions();
            td.apply_tracking(&px.iter().map(|p| Some(*p)).collect::<Vec<_>>());
        }
        assert_eq!(td.features()[0].age, 10);
        td.retire_older_than(10);
        assert!(td.is_empty());
    }
}
