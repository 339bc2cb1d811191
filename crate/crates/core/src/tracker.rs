//! Incremental motion estimation: motion prediction, projection matching against the
//! previous frame, and robust Gauss-Newton pose refinement.

use nalgebra::{Matrix4, Matrix6, Vector3, Vector6};

use crate::frontend::hamming_distance;
use crate::geometry::{stereo_jacobian, v2t, ImagePoint, Isometry3, StereoRig};
use crate::map::{transform_point, Frame, FrameId, FramepointRef, KeypointWD, WorldMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerConfig {
    pub search_half_width: f64,
    pub search_half_height: f64,
    pub match_max_distance: u32,
    pub iterations: usize,
    /// Squared 4-D reprojection error beyond which the robust kernel kicks in (px²).
    pub kernel_maximum_error: f64,
    pub close_depth: f64,
    pub maximum_depth: f64,
    pub landmark_weight: f64,
    pub min_inliers: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            search_half_width: 25.0,
            search_half_height: 25.0,
            match_max_distance: 25,
            iterations: 10,
            kernel_maximum_error: 100.0,
            close_depth: 15.0,
            maximum_depth: 75.0,
            landmark_weight: 1.5,
            min_inliers: 15,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.close_depth && self.close_depth < self.maximum_depth) {
            return Err(format!(
                "need 0 < close_depth ({}) < maximum_depth ({})",
                self.close_depth, self.maximum_depth
            ));
        }
        if self.iterations == 0 {
            return Err("iterations must be at least 1".into());
        }
        Ok(())
    }
}

/// Constant-velocity prior for the next world-to-camera transform.
pub fn predict_motion(prev_w2c: &Isometry3, prevprev_w2c: Option<&Isometry3>) -> Isometry3 {
    match prevprev_w2c {
        Some(pp) => {
            let motion = prev_w2c * pp.inverse();
            motion * prev_w2c
        }
        None => *prev_w2c,
    }
}

/// Uniform bucket grid over keypoint positions for rectangular window queries.
struct KeypointGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
}

impl KeypointGrid {
    fn new(points: &[KeypointWD], cell: f64, width: usize, height: usize) -> Self {
        let cols = (width as f64 / cell).ceil().max(1.0) as usize;
        let rows = (height as f64 / cell).ceil().max(1.0) as usize;
        let mut buckets = vec![Vec::new(); cols * rows];
        for (i, k) in points.iter().enumerate() {
            let (cr, cc) = Self::cell_of(cell, rows, cols, k.r, k.c);
            buckets[cr * cols + cc].push(i);
        }
        Self { cell, cols, rows, buckets }
    }

    fn cell_of(cell: f64, rows: usize, cols: usize, r: f64, c: f64) -> (usize, usize) {
        let cr = ((r / cell).floor().max(0.0) as usize).min(rows - 1);
        let cc = ((c / cell).floor().max(0.0) as usize).min(cols - 1);
        (cr, cc)
    }

    /// Indices of points whose cells intersect the window, in ascending index order.
    fn query(&self, center: ImagePoint, half_w: f64, half_h: f64) -> Vec<usize> {
        let (r0, c0) = Self::cell_of(self.cell, self.rows, self.cols, center.r - half_h, center.c - half_w);
        let (r1, c1) = Self::cell_of(self.cell, self.rows, self.cols, center.r + half_h, center.c + half_w);
        let mut out = Vec::new();
        for cr in r0..=r1 {
            for cc in c0..=c1 {
                out.extend_from_slice(&self.buckets[cr * self.cols + cc]);
            }
        }
        out.sort_unstable();
        out
    }
}

/// Correspondences between previous framepoints and current keypoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProjectionMatches {
    /// `(previous framepoint index, current keypoint index)`.
    pub pairs: Vec<(usize, usize)>,
    /// Previous framepoints left without a partner.
    pub unmatched: Vec<usize>,
}

/// Projects each previous framepoint (its landmark position when it has one) into the
/// current left image with `prior_w2c` and takes the closest-descriptor keypoint inside the
/// search rectangle. Each current keypoint is used at most once, greedily in previous-point
/// order.
pub fn match_projections(
    world: &WorldMap,
    prev_frame: &Frame,
    curr_keypoints: &[KeypointWD],
    prior_w2c: &Isometry3,
    rig: &StereoRig,
    cfg: &TrackerConfig,
) -> ProjectionMatches {
    let cell = (2.0 * cfg.search_half_width.max(cfg.search_half_height)).max(8.0);
    let grid = KeypointGrid::new(curr_keypoints, cell, rig.width(), rig.height());
    let mut taken = vec![false; curr_keypoints.len()];
    let mut result = ProjectionMatches::default();

    for (i, fp) in prev_frame.points.iter().enumerate() {
        let p_w = fp.landmark.map_or(fp.p_w, |l| world.landmark(l).p_w);
        let p_c = transform_point(prior_w2c, &p_w);
        let projected = match rig.left.project(&p_c) {
            Ok(p) if p.in_view => p.point,
            _ => {
                result.unmatched.push(i);
                continue;
            }
        };
        let mut best: Option<(usize, u32)> = None;
        for j in grid.query(projected, cfg.search_half_width, cfg.search_half_height) {
            let k = &curr_keypoints[j];
            if taken[j]
                || (k.r - projected.r).abs() > cfg.search_half_height
                || (k.c - projected.c).abs() > cfg.search_half_width
            {
                continue;
            }
            let dist = hamming_distance(&fp.k_l.d, &k.d);
            if dist < cfg.match_max_distance && best.is_none_or(|(_, d)| dist < d) {
                best = Some((j, dist));
            }
        }
        match best {
            Some((j, _)) => {
                taken[j] = true;
                result.pairs.push((i, j));
            }
            None => result.unmatched.push(i),
        }
    }
    result
}

/// One stereo measurement of a known world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseObservation {
    pub p_w: Vector3<f64>,
    pub k_l: ImagePoint,
    pub k_r: ImagePoint,
    pub landmark: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate {
    pub t_w2c: Isometry3,
    pub inliers: usize,
    /// Per-observation inlier flags from the final iteration.
    pub inlier_flags: Vec<bool>,
    /// Sum of weighted squared errors of the first and last iteration.
    pub initial_chi2: f64,
    pub final_chi2: f64,
}

impl PoseEstimate {
    pub fn reliable(&self, cfg: &TrackerConfig) -> bool {
        self.inliers >= cfg.min_inliers
    }
}

/// Normal equations of one linearization, with the bookkeeping the solver needs.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    pub h: Matrix6<f64>,
    pub b: Vector6<f64>,
    pub chi2: f64,
    pub inlier_flags: Vec<bool>,
}

fn measured(obs: &PoseObservation) -> nalgebra::Vector4<f64> {
    nalgebra::Vector4::new(obs.k_l.c, obs.k_l.r, obs.k_r.c, obs.k_r.r)
}

/// Builds `H` and `b` at `t_w2c` with per-point weighting: landmark boost, robust kernel,
/// and depth scaling. Points at or beyond `close_depth` only constrain rotation; points at
/// or beyond `maximum_depth` are skipped.
pub fn accumulate_normal_equations(
    observations: &[PoseObservation],
    t_w2c: &Isometry3,
    rig: &StereoRig,
    cfg: &TrackerConfig,
) -> NormalEquations {
    let mut h = Matrix6::zeros();
    let mut b = Vector6::zeros();
    let mut chi2 = 0.0;
    let mut flags = vec![false; observations.len()];

    for (obs, flag) in observations.iter().zip(flags.iter_mut()) {
        let p_c = transform_point(t_w2c, &obs.p_w);
        if p_c.z <= 0.0 || p_c.z >= cfg.maximum_depth {
            continue;
        }
        let Ok(predicted) = rig.project_stereo(&p_c) else { continue };
        let error = predicted - measured(obs);
        let error_squared = error.norm_squared();

        let mut omega = if obs.landmark { cfg.landmark_weight } else { 1.0 };
        if error_squared > cfg.kernel_maximum_error {
            omega *= cfg.kernel_maximum_error / error_squared;
        } else {
            *flag = true;
        }
        let Ok(mut j) = stereo_jacobian(&p_c, rig) else { continue };
        if p_c.z < cfg.close_depth {
            omega *= (cfg.close_depth - p_c.z) / cfg.close_depth;
        } else {
            omega *= (cfg.maximum_depth - p_c.z) / cfg.maximum_depth;
            j.fixed_view_mut::<4, 3>(0, 0).fill(0.0);
        }
        let weight = Matrix4::from_diagonal_element(omega);
        h += j.transpose() * weight * j;
        b += j.transpose() * weight * error;
        chi2 += omega * error_squared;
    }
    NormalEquations { h, b, chi2, inlier_flags: flags }
}

/// Fixed-iteration, identity-damped Gauss-Newton refinement of a world-to-camera pose.
pub fn optimize_pose_observations(
    observations: &[PoseObservation],
    prior_w2c: &Isometry3,
    rig: &StereoRig,
    cfg: &TrackerConfig,
) -> PoseEstimate {
    let mut t_w2c = *prior_w2c;
    let mut initial_chi2 = None;
    let mut last = None;
    for _ in 0..cfg.iterations {
        let ne = accumulate_normal_equations(observations, &t_w2c, rig, cfg);
        initial_chi2.get_or_insert(ne.chi2);
        let damped = ne.h + Matrix6::identity();
        let dx = damped
            .cholesky()
            .map(|c| c.solve(&(-ne.b)))
            .unwrap_or_else(Vector6::zeros);
        t_w2c = v2t(&dx) * t_w2c;
        last = Some(ne);
    }
    let last = last.expect("at least one iteration");
    let inliers = last.inlier_flags.iter().filter(|&&f| f).count();
    PoseEstimate {
        t_w2c: crate::geometry::renormalized(t_w2c),
        inliers,
        inlier_flags: last.inlier_flags,
        initial_chi2: initial_chi2.unwrap_or(0.0),
        final_chi2: last.chi2,
    }
}

/// Linked framepoints of a frame as pose observations, with their indices.
pub fn collect_observations(world: &WorldMap, frame: &Frame) -> (Vec<PoseObservation>, Vec<usize>) {
    let mut obs = Vec::new();
    let mut indices = Vec::new();
    for (i, fp) in frame.points.iter().enumerate() {
        let Some(prev) = fp.prev else { continue };
        let (p_w, landmark) = match fp.landmark {
            Some(l) => (world.landmark(l).p_w, true),
            None => match world.framepoint(prev) {
                Some(p) => (p.p_w, false),
                None => continue,
            },
        };
        obs.push(PoseObservation { p_w, k_l: fp.k_l.point(), k_r: fp.k_r.point(), landmark });
        indices.push(i);
    }
    (obs, indices)
}

/// Optimizes the pose of a stored frame from its linked framepoints and writes the inlier
/// flags back. The frame pose itself is left for the caller to set.
pub fn optimize_pose(
    world: &mut WorldMap,
    frame: FrameId,
    prior_w2c: &Isometry3,
    rig: &StereoRig,
    cfg: &TrackerConfig,
) -> PoseEstimate {
    let (obs, indices) = collect_observations(world, world.frame(frame));
    let estimate = optimize_pose_observations(&obs, prior_w2c, rig, cfg);
    let f = world.frame_mut(frame);
    for fp in &mut f.points {
        fp.inlier = false;
    }
    for (&i, &flag) in indices.iter().zip(&estimate.inlier_flags) {
        f.points[i].inlier = flag;
    }
    estimate
}

/// Links matched framepoints of `curr` to their predecessors in `prev`.
pub fn link_matches(world: &mut WorldMap, prev: FrameId, curr: FrameId, pairs: &[(usize, usize)]) {
    for &(i, j) in pairs {
        let p = FramepointRef { frame: prev, index: i };
        let c = FramepointRef { frame: curr, index: j };
        // Both sides are fresh for this frame pair; a failure means a duplicate pairing.
        let _ = world.link_track(p, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use crate::rng::SplitMix64;

    fn rig() -> StereoRig {
        StereoRig::new(700.0, 700.0, 620.0, 188.0, 378.0, 1241, 376).unwrap()
    }

    #[test]
    fn no_history_means_no_motion() {
        let p = se3_exp(&Twist::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3));
        assert_eq!(predict_motion(&p, None), p);
        assert_eq!(predict_motion(&Isometry3::identity(), Some(&Isometry3::identity())), Isometry3::identity());
    }

    #[test]
    fn constant_velocity_extrapolates() {
        // Camera-to-world: t-2 at the origin, t-1 one meter along x.
        let c2w_pp = Isometry3::identity();
        let c2w_p = Isometry3::translation(1.0, 0.0, 0.0);
        let prior = predict_motion(&c2w_p.inverse(), Some(&c2w_pp.inverse()));
        let c2w = prior.inverse();
        assert!((c2w.translation.vector - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(crate::geometry::rotation_angle(&c2w) < 1e-12);
    }

    fn scene(seed: u64, n: usize) -> Vec<Vector3<f64>> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|_| {
                let z = rng.uniform(3.0, 40.0);
                Vector3::new(rng.uniform(-0.8, 0.8) * z, rng.uniform(-0.25, 0.25) * z, z)
            })
            .collect()
    }

    fn observe(points: &[Vector3<f64>], t_w2c: &Isometry3, rig: &StereoRig) -> Vec<PoseObservation> {
        points
            .iter()
            .filter_map(|p| {
                let p_c = transform_point(t_w2c, p);
                let l = rig.left.project(&p_c).ok()?;
                let r = rig.right.project(&p_c).ok()?;
                (l.in_view && r.in_view).then_some(PoseObservation { p_w: *p, k_l: l.point, k_r: r.point, landmark: false })
            })
            .collect()
    }

    #[test]
    fn exact_prior_is_a_fixed_point() {
        let rig = rig();
        let truth = se3_exp(&Twist::new(0.1, -0.05, 0.8, 0.01, 0.02, -0.005));
        let obs = observe(&scene(1, 150), &truth, &rig);
        let est = optimize_pose_observations(&obs, &truth, &rig, &TrackerConfig::default());
        let diff = (est.t_w2c.to_homogeneous() - truth.to_homogeneous()).abs().max();
        assert!(diff < 1e-10, "{diff}");
        assert_eq!(est.inliers, obs.len());
    }

    #[test]
    fn gross_outlier_is_flagged() {
        let rig = rig();
        let truth = se3_exp(&Twist::new(0.0, 0.0, 1.0, 0.0, 0.01, 0.0));
        let mut obs = observe(&scene(2, 100), &truth, &rig);
        obs[5].k_l.c += 60.0;
        obs[5].k_r.c += 60.0;
        let prior = se3_exp(&Twist::new(0.05, 0.0, 0.0, 0.0, 0.0, 0.01)) * truth;
        let est = optimize_pose_observations(&obs, &prior, &rig, &TrackerConfig::default());
        let dt = (est.t_w2c.translation.vector - truth.translation.vector).norm();
        // The capped kernel still lets the outlier pull slightly.
        assert!(dt < 1e-3, "{dt}");
        assert!(!est.inlier_flags[5]);
        assert_eq!(est.inliers, obs.len() - 1);
    }

    #[test]
    fn far_points_do_not_touch_translation() {
        let rig = rig();
        let cfg = TrackerConfig::default();
        let far: Vec<_> = scene(3, 200).into_iter().map(|p| p * 2.0).filter(|p| p.z >= cfg.close_depth).collect();
        let obs = observe(&far, &Isometry3::identity(), &rig);
        let perturbed = se3_exp(&Twist::new(0.1, 0.1, 0.1, 0.01, 0.0, 0.0));
        let ne = accumulate_normal_equations(&obs, &perturbed, &rig, &cfg);
        assert!(ne.h.fixed_view::<3, 3>(0, 0).norm() == 0.0);
        assert!(ne.b.fixed_rows::<3>(0).norm() == 0.0);
        assert!(ne.h.fixed_view::<3, 3>(3, 3).norm() > 0.0);
    }

    #[test]
    fn deterministic() {
        let rig = rig();
        let truth = se3_exp(&Twist::new(0.0, 0.1, 0.9, 0.0, 0.0, 0.02));
        let obs = observe(&scene(4, 120), &truth, &rig);
        let prior = Isometry3::identity();
        let a = optimize_pose_observations(&obs, &prior, &rig, &TrackerConfig::default());
        let b = optimize_pose_observations(&obs, &prior, &rig, &TrackerConfig::default());
        assert_eq!(a.t_w2c.to_homogeneous(), b.t_w2c.to_homogeneous());
    }

    #[test]
    fn error_does_not_grow_on_clean_data() {
        let rig = rig();
        let truth = se3_exp(&Twist::new(0.2, 0.0, 1.0, 0.0, 0.03, 0.0));
        let obs = observe(&scene(5, 120), &truth, &rig);
        let est = optimize_pose_observations(&obs, &Isometry3::identity(), &rig, &TrackerConfig::default());
        assert!(est.final_chi2 <= est.initial_chi2);
    }

    #[test]
    fn config_validation() {
        let bad = TrackerConfig { close_depth: 80.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(TrackerConfig::default().validate().is_ok());
    }
}
