//! Fixed-lag smoother backend.
//!
//! The window holds up to `horizon` keyframe states. Consecutive states are
//! tied by preintegrated IMU factors, feature tracks contribute structureless
//! vision factors, and states that slide out are folded into a Gaussian
//! prior on the remaining boundary states. Each Gauss-Newton iteration
//! rebuilds the band-structured normal equations, damps the diagonal, solves
//! with the zero-skipping Cholesky, and retracts the stacked update onto the
//! window states.

pub mod hessian;
pub mod linearize;
pub mod marginalize;
pub mod pattern;
pub mod track_store;

pub use hessian::{dense_cholesky_macs, dense_substitute_macs, SolveOps, StructuredHessian};
pub use linearize::{ImuFactor, StereoObs, VisionConfig, VisionFactor};
pub use marginalize::{schur_marginalize, MarginalPrior};
pub use pattern::{build_pattern, BlockPattern};
pub use track_store::TrackStore;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::dataset::gravity_world;
use crate::error::VioError;
use crate::geometry::{KFState, STATE_DOF};

/// Smoother sizing and iteration settings.
#[derive(Debug, Clone, Copy)]
pub struct BackendConfig {
    /// Keyframes kept in the window.
    pub horizon: usize,
    /// Maximum keyframes a feature track may span.
    pub max_track_age: usize,
    /// Diagonal damping added before factorization.
    pub lambda: f64,
    /// Gauss-Newton iterations per keyframe.
    pub gn_iterations: usize,
    pub gravity: Vector3<f64>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            horizon: 20,
            max_track_age: 10,
            lambda: 1e-6,
            gn_iterations: 3,
            gravity: gravity_world(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WindowEntry {
    pub kf_id: u64,
    pub t_ns: i64,
    pub state: KFState,
}

/// Outcome of one Gauss-Newton iteration.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    /// Total weighted cost at the linearization point.
    pub cost_before: f64,
    /// Euclidean norm of the stacked tangent update.
    pub delta_norm: f64,
    /// Solver multiply-accumulate tally.
    pub ops: SolveOps,
}

#[derive(Debug, Clone)]
pub struct FactorGraph {
    pub cfg: BackendConfig,
    window: Vec<WindowEntry>,
    imu_factors: Vec<ImuFactor>,
    prior: Option<MarginalPrior>,
}

impl FactorGraph {
    pub fn new(cfg: BackendConfig) -> Self {
        FactorGraph {
            cfg,
            window: Vec::new(),
            imu_factors: Vec::new(),
            prior: None,
        }
    }

    pub fn window(&self) -> &[WindowEntry] {
        &self.window
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn states(&self) -> Vec<KFState> {
        self.window.iter().map(|e| e.state).collect()
    }

    pub fn newest(&self) -> Option<&WindowEntry> {
        self.window.last()
    }

    pub fn slot_of(&self, kf_id: u64) -> Option<usize> {
        self.window.iter().position(|e| e.kf_id == kf_id)
    }

    pub fn prior(&self) -> Option<&MarginalPrior> {
        self.prior.as_ref()
    }

    /// Installs an absolute prior on one window state, used to anchor the
    /// gauge at startup.
    pub fn set_anchor(&mut self, slot: usize, info_diag: &[f64; STATE_DOF]) {
        let entry = &self.window[slot];
        let mut info = DMatrix::zeros(STATE_DOF, STATE_DOF);
        for (k, v) in info_diag.iter().enumerate() {
            info[(k, k)] = *v;
        }
        self.prior = Some(MarginalPrior {
            info,
            rhs: DVector::zeros(STATE_DOF),
            lin: vec![entry.state],
            ids: vec![entry.kf_id],
        });
    }

    /// Appends a keyframe. Every keyframe after the first must carry the
    /// preintegrated IMU factor from its predecessor.
    pub fn push_keyframe(
        &mut self,
        kf_id: u64,
        t_ns: i64,
        state: KFState,
        imu: Option<ImuFactor>,
    ) -> Result<(), VioError> {
        if self.window.is_empty() != imu.is_none() {
            return Err(VioError::Config(
                "exactly the first keyframe enters without an inertial factor".into(),
            ));
        }
        if let Some(mut f) = imu {
            f.i = self.window.len() - 1;
            f.j = self.window.len();
            self.imu_factors.push(f);
        }
        self.window.push(WindowEntry { kf_id, t_ns, state });
        Ok(())
    }

    pub fn needs_marginalization(&self) -> bool {
        self.window.len() > self.cfg.horizon
    }

    /// Folds the oldest state into the boundary prior and slides the window.
    ///
    /// `folded_tracks` are tracks ending at the leaving state: their full
    /// information is absorbed. Tracks that continue are not passed here;
    /// their observation at the leaving keyframe is simply dropped when the
    /// caller rebuilds factors against the new window.
    pub fn marginalize_oldest(
        &mut self,
        folded_tracks: &[VisionFactor],
        vcfg: &VisionConfig,
    ) -> Result<(), VioError> {
        if self.window.len() < 2 {
            return Err(VioError::Config(
                "cannot marginalize a window of fewer than two states".into(),
            ));
        }
        let states = self.states();

        // Involved slots: the leaving state, its IMU partner, every prior
        // state, every state of a folded track.
        let mut involved = std::collections::BTreeSet::new();
        involved.insert(0usize);
        involved.insert(1usize);
        let prior_slots: Vec<usize> = match &self.prior {
            Some(p) => p
                .ids
                .iter()
                .map(|id| {
                    self.slot_of(*id).ok_or_else(|| {
                        VioError::Config(format!("prior references missing keyframe {id}"))
                    })
                })
                .collect::<Result<_, _>>()?,
            None => Vec::new(),
        };
        involved.extend(prior_slots.iter().copied());
        for t in folded_tracks {
            involved.extend(t.obs.iter().map(|(s, _)| *s));
        }

        let retained: Vec<usize> = involved.iter().copied().filter(|s| *s != 0).collect();
        let sub_index = |slot: usize| -> usize {
            if slot == 0 {
                0
            } else {
                1 + retained.binary_search(&slot).expect("involved slot")
            }
        };

        let dim = (1 + retained.len()) * STATE_DOF;
        let mut h = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        if let Some(p) = &self.prior {
            p.scatter_dense(&mut h, &mut b, &states, &prior_slots, &sub_index);
        }
        marginalize::scatter_imu_dense(
            &self.imu_factors[0],
            &mut h,
            &mut b,
            &states,
            &self.cfg.gravity,
            &sub_index,
        );
        for t in folded_tracks {
            marginalize::scatter_vision_dense(t, &mut h, &mut b, &states, vcfg, &sub_index);
        }

        let (info, rhs) = schur_marginalize(&h, &b, STATE_DOF)?;
        self.prior = Some(MarginalPrior {
            info,
            rhs,
            lin: retained.iter().map(|s| states[*s]).collect(),
            ids: retained.iter().map(|s| self.window[*s].kf_id).collect(),
        });

        self.window.remove(0);
        self.imu_factors.remove(0);
        for f in &mut self.imu_factors {
            f.i -= 1;
            f.j -= 1;
        }
        Ok(())
    }

    fn prior_slots(&self) -> Result<Vec<usize>, VioError> {
        match &self.prior {
            Some(p) => p
                .ids
                .iter()
                .map(|id| {
                    self.slot_of(*id).ok_or_else(|| {
                        VioError::Config(format!("prior references missing keyframe {id}"))
                    })
                })
                .collect(),
            None => Ok(Vec::new()),
        }
    }

    /// Total weighted cost of all factors at the current states.
    pub fn cost(&self, tracks: &[VisionFactor], vcfg: &VisionConfig) -> Result<f64, VioError> {
        let states = self.states();
        let mut cost = 0.0;
        if let Some(p) = &self.prior {
            cost += p.cost(&states, &self.prior_slots()?);
        }
        for f in &self.imu_factors {
            cost += f.cost(&states, &self.cfg.gravity);
        }
        for t in tracks {
            cost += t.cost(&states, vcfg);
        }
        Ok(cost)
    }

    /// One damped Gauss-Newton iteration over the whole window.
    pub fn gauss_newton_step(
        &mut self,
        tracks: &[VisionFactor],
        vcfg: &VisionConfig,
    ) -> Result<StepReport, VioError> {
        let n = self.window.len();
        assert!(n > 0, "step on an empty window");
        let pattern = build_pattern(n, self.cfg.max_track_age.min(n))?;
        let mut h = StructuredHessian::new(pattern);
        let states = self.states();

        let mut cost = 0.0;
        if let Some(p) = &self.prior {
            cost += p.accumulate(&mut h, &states, &self.prior_slots()?)?;
        }
        for f in &self.imu_factors {
            cost += f.accumulate(&mut h, &states, &self.cfg.gravity)?;
        }
        for t in tracks {
            cost += t.accumulate(&mut h, &states, vcfg)?;
        }
        h.add_diagonal(self.cfg.lambda);

        let (dx, ops) = h.solve()?;
        for (slot, entry) in self.window.iter_mut().enumerate() {
            let seg = dx.fixed_rows::<STATE_DOF>(slot * STATE_DOF).into_owned();
            entry.state = entry.state.retract(&seg);
        }
        Ok(StepReport {
            cost_before: cost,
            delta_norm: dx.norm(),
            ops,
        })
    }

    /// Runs the configured number of iterations, returning one report each.
    pub fn optimize(
        &mut self,
        tracks: &[VisionFactor],
        vcfg: &VisionConfig,
    ) -> Result<Vec<StepReport>, VioError> {
        let mut reports = Vec::with_capacity(self.cfg.gn_iterations);
        for _ in 0..self.cfg.gn_iterations {
            reports.push(self.gauss_newton_step(tracks, vcfg)?);
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_rig;
    use crate::geometry::{so3_exp, StateVector};
    use crate::ife::{ImuNoise, ImuSample, Preintegrator};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    /// Constant world-frame acceleration and body rate trajectory; returns
    /// ground-truth states at the segment boundaries plus the exact IMU
    /// factors between them.
    fn simulate_segments(n: usize, g: Vector3<f64>) -> (Vec<KFState>, Vec<ImuFactor>) {
        let bg = Vector3::new(0.002, -0.001, 0.003);
        let ba = Vector3::new(-0.02, 0.01, 0.05);
        let w_true = Vector3::new(0.1, -0.15, 0.3);
        let a_true = Vector3::new(0.4, 0.2, -0.1);
        let dt = 0.001;
        let steps = 200;

        let mut states = vec![KFState {
            r: so3_exp(&Vector3::new(0.1, 0.0, -0.2)),
            p: Vector3::zeros(),
            v: Vector3::new(0.3, 0.0, 0.1),
            bg,
            ba,
        }];
        let mut factors = Vec::new();
        let mut t_ns = 0i64;
        for k in 0..n - 1 {
            let mut s = states[k];
            let mut pre = Preintegrator::new(ImuNoise::euroc(), bg, ba);
            for _ in 0..steps {
                let sample = ImuSample {
                    t_ns,
                    gyro: w_true + bg,
                    accel: s.r.transpose() * (a_true - g) + ba,
                };
                pre.integrate_sample(&sample, dt).unwrap();
                s.p += s.v * dt + a_true * (0.5 * dt * dt);
                s.v += a_true * dt;
                s.r *= so3_exp(&(w_true * dt));
                t_ns += 1_000_000;
            }
            factors.push(ImuFactor::new(
                k,
                k + 1,
                pre.finalize().unwrap(),
                &ImuNoise::euroc(),
            ));
            states.push(s);
        }
        (states, factors)
    }

    fn landmark_cloud(rng: &mut impl Rng, count: usize) -> Vec<Vector3<f64>> {
        // In front of the rig: the synthetic cameras look along body +x.
        (0..count)
            .map(|_| {
                Vector3::new(
                    rng.random_range(4.0..9.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                )
            })
            .collect()
    }

    fn vcfg() -> VisionConfig {
        VisionConfig::from_rig(&synthetic_rig(true))
    }

    fn project_exact(
        state: &KFState,
        l: &Vector3<f64>,
        cfg: &VisionConfig,
    ) -> Option<StereoObs> {
        let t_wc = state.pose().compose(&cfg.t_bc);
        let pc = t_wc.inverse().transform(l);
        if pc.z < 0.5 {
            return None;
        }
        let b = cfg.baseline.unwrap();
        Some(StereoObs {
            u: cfg.fx * pc.x / pc.z + cfg.cx,
            v: cfg.fy * pc.y / pc.z + cfg.cy,
            u_right: Some(cfg.fx * (pc.x - b) / pc.z + cfg.cx),
        })
    }

    fn tracks_for(
        states: &[KFState],
        landmarks: &[Vector3<f64>],
        cfg: &VisionConfig,
    ) -> Vec<VisionFactor> {
        landmarks
            .iter()
            .enumerate()
            .filter_map(|(id, l)| {
                let obs: Vec<_> = states
                    .iter()
                    .enumerate()
                    .filter_map(|(s, st)| project_exact(st, l, cfg).map(|o| (s, o)))
                    .collect();
                (obs.len() >= 2).then_some(VisionFactor {
                    track: id as u64,
                    obs,
                })
            })
            .collect()
    }

    fn anchor_diag() -> [f64; STATE_DOF] {
        [1e8; STATE_DOF]
    }

    #[test]
    fn noiseless_window_converges_to_ground_truth() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(81);
        let cfg = BackendConfig {
            horizon: 5,
            max_track_age: 5,
            gn_iterations: 8,
            ..Default::default()
        };
        let g = cfg.gravity;
        let (truth, factors) = simulate_segments(5, g);
        let landmarks = landmark_cloud(&mut rng, 40);
        let vc = vcfg();
        let tracks = tracks_for(&truth, &landmarks, &vc);
        assert!(tracks.len() > 20, "scene too sparse: {}", tracks.len());

        let mut graph = FactorGraph::new(cfg);
        for (k, s) in truth.iter().enumerate() {
            // Perturb every state but the anchored first one.
            let mut guess = *s;
            if k > 0 {
                let mut d = StateVector::zeros();
                for i in 0..9 {
                    d[i] = rng.random_range(-0.02..0.02);
                }
                guess = guess.retract(&d);
            }
            let f = (k > 0).then(|| factors[k - 1].clone());
            graph
                .push_keyframe(k as u64, k as i64 * 200_000_000, guess, f)
                .unwrap();
        }
        graph.set_anchor(0, &anchor_diag());

        let reports = graph.optimize(&tracks, &vc).unwrap();
        assert!(reports[0].cost_before > reports.last().unwrap().cost_before);
        for (k, entry) in graph.window().iter().enumerate() {
            let err = entry.state.boxminus(&truth[k]).norm();
            assert!(err < 1e-6, "state {k} error {err}");
        }
    }

    #[test]
    fn cost_decreases_monotonically_near_optimum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(82);
        let cfg = BackendConfig {
            horizon: 4,
            max_track_age: 4,
            gn_iterations: 5,
            ..Default::default()
        };
        let (truth, factors) = simulate_segments(4, cfg.gravity);
        let landmarks = landmark_cloud(&mut rng, 30);
        let vc = vcfg();
        let tracks = tracks_for(&truth, &landmarks, &vc);

        let mut graph = FactorGraph::new(cfg);
        for (k, s) in truth.iter().enumerate() {
            let mut guess = *s;
            if k > 0 {
                let mut d = StateVector::zeros();
                for i in 0..6 {
                    d[i] = rng.random_range(-0.01..0.01);
                }
                guess = guess.retract(&d);
            }
            let f = (k > 0).then(|| factors[k - 1].clone());
            graph
                .push_keyframe(k as u64, k as i64 * 200_000_000, guess, f)
                .unwrap();
        }
        graph.set_anchor(0, &anchor_diag());

        let mut last = f64::INFINITY;
        for _ in 0..cfg.gn_iterations {
            let rep = graph.gauss_newton_step(&tracks, &vc).unwrap();
            assert!(
                rep.cost_before < last * (1.0 + 1e-9),
                "cost rose: {last} -> {}",
                rep.cost_before
            );
            last = rep.cost_before;
        }
        let final_cost = graph.cost(&tracks, &vc).unwrap();
        assert!(final_cost < 1e-10, "terminal cost {final_cost}");
    }

    #[test]
    fn marginalization_matches_independent_dense_schur() {
        let cfg = BackendConfig {
            horizon: 3,
            max_track_age: 3,
            ..Default::default()
        };
        let (truth, factors) = simulate_segments(4, cfg.gravity);
        let vc = vcfg();

        let mut graph = FactorGraph::new(cfg);
        for (k, s) in truth.iter().take(4).enumerate() {
            let f = (k > 0).then(|| factors[k - 1].clone());
            graph
                .push_keyframe(k as u64, k as i64 * 200_000_000, *s, f)
                .unwrap();
        }
        graph.set_anchor(0, &anchor_diag());
        assert!(graph.needs_marginalization());

        // Independent oracle: assemble the joint prior + first IMU factor
        // over slots (0, 1) densely and eliminate slot 0 via the explicit
        // inverse, before the graph mutates.
        let states = graph.states();
        let dim = 2 * STATE_DOF;
        let mut hd = DMatrix::zeros(dim, dim);
        let mut bd = DVector::zeros(dim);
        let anchor = graph.prior().unwrap().clone();
        anchor.scatter_dense(&mut hd, &mut bd, &states, &[0], &|s| s);
        marginalize::scatter_imu_dense(
            &factors[0],
            &mut hd,
            &mut bd,
            &states,
            &graph.cfg.gravity,
            &|s| s,
        );
        let inv00 = hd
            .view((0, 0), (STATE_DOF, STATE_DOF))
            .try_inverse()
            .unwrap();
        let want_info = hd.view((STATE_DOF, STATE_DOF), (STATE_DOF, STATE_DOF)).into_owned()
            - hd.view((STATE_DOF, 0), (STATE_DOF, STATE_DOF))
                * &inv00
                * hd.view((0, STATE_DOF), (STATE_DOF, STATE_DOF));
        let want_rhs = bd.rows(STATE_DOF, STATE_DOF).into_owned()
            - hd.view((STATE_DOF, 0), (STATE_DOF, STATE_DOF)) * inv00 * bd.rows(0, STATE_DOF);

        graph.marginalize_oldest(&[], &vc).unwrap();
        let prior = graph.prior().unwrap();
        assert_eq!(prior.ids, vec![1]);
        assert_eq!(graph.len(), 3);
        assert_eq!(graph.slot_of(1), Some(0));
        for r in 0..STATE_DOF {
            for c in 0..STATE_DOF {
                assert_relative_eq!(
                    prior.info[(r, c)],
                    want_info[(r, c)],
                    epsilon = 1e-10,
                    max_relative = 1e-10
                );
            }
            assert_relative_eq!(
                prior.rhs[r],
                want_rhs[r],
                epsilon = 1e-10,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn sliding_window_stays_consistent_over_many_keyframes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(83);
        let cfg = BackendConfig {
            horizon: 4,
            max_track_age: 4,
            gn_iterations: 2,
            ..Default::default()
        };
        let (truth, factors) = simulate_segments(10, cfg.gravity);
        let landmarks = landmark_cloud(&mut rng, 60);
        let vc = vcfg();

        let mut graph = FactorGraph::new(cfg);
        graph
            .push_keyframe(0, 0, truth[0], None)
            .unwrap();
        graph.set_anchor(0, &anchor_diag());
        for k in 1..10 {
            let mut d = StateVector::zeros();
            for i in 0..9 {
                d[i] = rng.random_range(-0.005..0.005);
            }
            graph
                .push_keyframe(
                    k as u64,
                    k as i64 * 200_000_000,
                    truth[k].retract(&d),
                    Some(factors[k - 1].clone()),
                )
                .unwrap();
            if graph.needs_marginalization() {
                graph.marginalize_oldest(&[], &vc).unwrap();
            }
            // Measurements are projections through the true states of the
            // keyframes currently in the window.
            let first = graph.window()[0].kf_id as usize;
            let truth_window: Vec<KFState> =
                (0..graph.len()).map(|s| truth[first + s]).collect();
            let tracks = tracks_for(&truth_window, &landmarks, &vc);
            graph.optimize(&tracks, &vc).unwrap();
        }
        assert_eq!(graph.len(), 4);
        // Window ids are the last four keyframes in order.
        let ids: Vec<u64> = graph.window().iter().map(|e| e.kf_id).collect();
        assert_eq!(ids, vec![6, 7, 8, 9]);
        for (slot, entry) in graph.window().iter().enumerate() {
            let err = entry.state.boxminus(&truth[6 + slot]).norm();
            assert!(err < 1e-3, "slot {slot} error {err}");
        }
    }
}
