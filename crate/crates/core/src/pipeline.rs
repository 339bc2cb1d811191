//! Frame-by-frame driver and the sequence runner.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::config::SlamConfig;
use crate::eval::{ate_rmse, kitti_relative_errors, timing_stats, EvalError, MetricsReport};
use crate::frontend::{BriefExtractor, DetectorState};
use crate::geometry::{Isometry3, StereoRig};
use crate::gray::GrayImage;
use crate::io::{write_trajectory, LoadError, SequenceManifest};
use crate::map::{Frame, FrameId, FramepointRef, KeypointWD, LocalMapId, WorldMap};
use crate::mapper::{maybe_create_local_map, promote_landmarks, recover_correspondences, update_observed_landmarks};
use crate::posegraph::{broadcast_poses, PoseGraph};
use crate::relocalizer::{ClosureConstraint, Relocalizer};
use crate::stereo::{build_frame, frame_from_pairs};
use crate::tracker::{link_matches, match_projections, optimize_pose, predict_motion};

const BOOTSTRAP_SEARCH_SCALE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackingStatus {
    /// First frame: defines the world origin.
    Initialized,
    Tracked,
    /// Too few inliers; the motion prior was kept.
    Lost,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameReport {
    pub frame: FrameId,
    pub status: TrackingStatus,
    pub framepoints: usize,
    pub tracked: usize,
    pub inliers: usize,
    pub recovered: usize,
    pub new_landmarks: usize,
    pub local_map: Option<LocalMapId>,
    pub closures: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("tracking lost for {lost} consecutive frames at frame {frame}")]
pub struct TrackingHalted {
    pub frame: usize,
    pub lost: usize,
}

/// Incremental stereo SLAM state.
pub struct Slam {
    pub cfg: SlamConfig,
    pub rig: StereoRig,
    pub world: WorldMap,
    detector: DetectorState,
    relocalizer: Relocalizer,
    pending: Vec<FrameId>,
    lost_streak: usize,
    closures: Vec<ClosureConstraint>,
}

impl Slam {
    pub fn new(rig: StereoRig, cfg: SlamConfig) -> Self {
        let mut world = WorldMap::new();
        world.graph = PoseGraph::new(cfg.graph);
        Self {
            cfg,
            rig,
            world,
            detector: cfg.detector,
            relocalizer: Relocalizer::new(cfg.relocalizer),
            pending: Vec::new(),
            lost_streak: 0,
            closures: Vec::new(),
        }
    }

    pub fn detector(&self) -> DetectorState {
        self.detector
    }

    pub fn closures_accepted(&self) -> usize {
        self.closures.len()
    }

    /// Every closure added to the pose graph, in acceptance order.
    pub fn closures(&self) -> &[ClosureConstraint] {
        &self.closures
    }

    /// Camera-to-world pose of every processed frame.
    pub fn trajectory(&self) -> Vec<Isometry3> {
        self.world.frames.iter().map(|f| f.t_c2w()).collect()
    }

    fn prior_w2c(&self) -> Isometry3 {
        match self.world.next_frame_id().0 {
            0 => self.world.origin.inverse(),
            n => {
                let prev = self.world.frame(FrameId(n - 1)).t_w2c();
                let prevprev = (n >= 2).then(|| self.world.frame(FrameId(n - 2)).t_w2c());
                predict_motion(&prev, prevprev.as_ref())
            }
        }
    }

    /// Detects, matches and triangulates a rectified stereo pair, then tracks and maps it.
    pub fn process(&mut self, left: &GrayImage, right: &GrayImage, timestamp: f64) -> Result<FrameReport, TrackingHalted> {
        let prior_w2c = self.prior_w2c();
        let (frame, _) = build_frame(
            left,
            right,
            &self.rig,
            &mut self.detector,
            &self.cfg.triangulation,
            self.world.next_frame_id(),
            prior_w2c.inverse(),
            timestamp,
        );
        self.track(frame, prior_w2c, Some(left))
    }

    /// Keypoint-level entry: stereo pairs with descriptors replace detection and stereo
    /// matching. Without an image, lost tracks are not recovered.
    pub fn process_pairs(
        &mut self,
        pairs: &[(KeypointWD, KeypointWD)],
        timestamp: f64,
        left: Option<&GrayImage>,
    ) -> Result<FrameReport, TrackingHalted> {
        let prior_w2c = self.prior_w2c();
        let frame = frame_from_pairs(pairs, &self.rig, self.world.next_frame_id(), prior_w2c.inverse(), timestamp);
        self.track(frame, prior_w2c, left)
    }

    fn track(&mut self, frame: Frame, prior_w2c: Isometry3, left: Option<&GrayImage>) -> Result<FrameReport, TrackingHalted> {
        let id = self.world.push_frame(frame);
        let mut report = FrameReport {
            frame: id,
            status: TrackingStatus::Initialized,
            framepoints: self.world.frame(id).points.len(),
            tracked: 0,
            inliers: 0,
            recovered: 0,
            new_landmarks: 0,
            local_map: None,
            closures: 0,
        };
        if id.0 == 0 {
            self.finish_frame(id, &mut report);
            return Ok(report);
        }

        let prev = FrameId(id.0 - 1);
        let keypoints: Vec<KeypointWD> = self.world.frame(id).points.iter().map(|fp| fp.k_l).collect();
        let mut wide = self.cfg.tracker;
        wide.search_half_width *= BOOTSTRAP_SEARCH_SCALE;
        wide.search_half_height *= BOOTSTRAP_SEARCH_SCALE;
        // No velocity yet at frame 1: the identity prior can be off by a full frame of motion.
        let search = if id.0 == 1 { wide } else { self.cfg.tracker };
        let mut matches = match_projections(&self.world, self.world.frame(prev), &keypoints, &prior_w2c, &self.rig, &search);
        link_matches(&mut self.world, prev, id, &matches.pairs);
        let mut estimate = optimize_pose(&mut self.world, id, &prior_w2c, &self.rig, &self.cfg.tracker);
        if !estimate.reliable(&self.cfg.tracker) && id.0 > 1 {
            // Sudden change of motion: search again with the wide window.
            for index in 0..self.world.frame(id).points.len() {
                self.world.unlink_prev(FramepointRef { frame: id, index });
            }
            matches = match_projections(&self.world, self.world.frame(prev), &keypoints, &prior_w2c, &self.rig, &wide);
            link_matches(&mut self.world, prev, id, &matches.pairs);
            estimate = optimize_pose(&mut self.world, id, &prior_w2c, &self.rig, &self.cfg.tracker);
        }
        report.tracked = matches.pairs.len();
        report.inliers = estimate.inliers;
        if !estimate.reliable(&self.cfg.tracker) {
            self.lost_streak += 1;
            report.status = TrackingStatus::Lost;
            // Keep the prior; drop the tracks so unreliable measurements reach no landmark.
            self.world.frame_mut(id).set_pose_and_refresh(prior_w2c.inverse());
            for index in 0..self.world.frame(id).points.len() {
                self.world.unlink_prev(FramepointRef { frame: id, index });
            }
            if self.lost_streak > self.cfg.max_lost_frames {
                return Err(TrackingHalted { frame: id.0, lost: self.lost_streak });
            }
            self.finish_frame(id, &mut report);
            return Ok(report);
        }
        self.lost_streak = 0;
        report.status = TrackingStatus::Tracked;
        self.world.frame_mut(id).set_pose_and_refresh(estimate.t_w2c.inverse());
        for index in 0..self.world.frame(id).points.len() {
            let fp = &self.world.frame(id).points[index];
            if fp.prev.is_some() && !fp.inlier {
                self.world.unlink_prev(FramepointRef { frame: id, index });
            }
        }

        if let Some(left) = left {
            let extractor = BriefExtractor::new(left);
            report.recovered = recover_correspondences(
                &mut self.world,
                prev,
                &matches.unmatched,
                id,
                &extractor,
                &self.rig,
                &self.cfg.mapper,
            );
        }
        update_observed_landmarks(&mut self.world, id, &self.cfg.mapper);
        report.new_landmarks = promote_landmarks(&mut self.world, id, &self.cfg.mapper).len();
        self.finish_frame(id, &mut report);
        Ok(report)
    }

    fn finish_frame(&mut self, id: FrameId, report: &mut FrameReport) {
        self.pending.push(id);
        let Some(map) = maybe_create_local_map(&mut self.world, &mut self.pending, &self.cfg.mapper) else { return };
        report.local_map = Some(map);
        if !self.cfg.relocalization {
            return;
        }
        let closures = self.relocalizer.process(&self.world, map);
        if closures.is_empty() {
            return;
        }
        for c in &closures {
            self.world.graph.add_closure_edge(c).expect("closure nodes exist");
        }
        if self.world.graph.optimize(self.cfg.graph.iterations).is_ok() {
            broadcast_poses(&mut self.world);
            report.closures = closures.len();
            self.closures.extend(closures);
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("{source}")]
    Halted {
        source: TrackingHalted,
        /// Poses of every frame processed before the halt.
        trajectory: Vec<Isometry3>,
    },
    #[error("writing results: {0}")]
    Output(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub trajectory: Vec<Isometry3>,
    pub frames: Vec<FrameReport>,
    /// Wall-clock seconds spent in [`Slam::process`] per frame.
    pub durations: Vec<f64>,
    pub report: MetricsReport,
}

/// Accuracy metrics against ground truth. Straight-line trajectories cannot be aligned
/// rigidly; their ATE is reported without alignment.
pub fn accuracy_metrics(estimate: &[Isometry3], truth: &[Isometry3], report: &mut MetricsReport) {
    if let Ok(segments) = kitti_relative_errors(estimate, truth) {
        report.segments = segments;
    }
    report.ate_rmse = match ate_rmse(estimate, truth, true) {
        Err(EvalError::Degenerate) => ate_rmse(estimate, truth, false).ok(),
        other => other.ok(),
    };
}

/// Runs every stereo pair of a sequence through a fresh [`Slam`] instance.
pub fn run_pipeline(manifest: &SequenceManifest, cfg: &SlamConfig) -> Result<PipelineOutput, PipelineError> {
    let mut slam = Slam::new(manifest.rig, *cfg);
    let mut frames = Vec::with_capacity(manifest.len());
    let mut durations = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        let (left, right) = manifest.load_pair(i)?;
        let start = Instant::now();
        let outcome = slam.process(&left, &right, manifest.timestamps[i]);
        durations.push(start.elapsed().as_secs_f64());
        match outcome {
            Ok(r) => frames.push(r),
            Err(source) => return Err(PipelineError::Halted { source, trajectory: slam.trajectory() }),
        }
    }
    let trajectory = slam.trajectory();
    let mut report = MetricsReport {
        timing: timing_stats(&durations),
        frames_processed: frames.len(),
        local_maps: slam.world.local_maps.len(),
        closures_accepted: slam.closures_accepted(),
        ..Default::default()
    };
    if let Some(gt) = &manifest.ground_truth {
        accuracy_metrics(&trajectory, gt, &mut report);
    }
    Ok(PipelineOutput { trajectory, frames, durations, report })
}

/// Per-frame CSV for plotting: timing, tracking counts and, with ground truth, position error.
pub fn frames_csv(output: &PipelineOutput, truth: Option<&[Isometry3]>) -> String {
    let mut s = String::from("frame,duration_s,status,framepoints,tracked,inliers,recovered,new_landmarks,local_map,closures,position_error_m\n");
    for (r, d) in output.frames.iter().zip(&output.durations) {
        let status = match r.status {
            TrackingStatus::Initialized => "initialized",
            TrackingStatus::Tracked => "tracked",
            TrackingStatus::Lost => "lost",
        };
        let error = truth
            .and_then(|gt| gt.get(r.frame.0))
            .map(|gt| (output.trajectory[r.frame.0].translation.vector - gt.translation.vector).norm().to_string())
            .unwrap_or_default();
        let map = r.local_map.map(|m| m.0.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{d},{status},{},{},{},{},{},{map},{},{error}",
            r.frame.0, r.framepoints, r.tracked, r.inliers, r.recovered, r.new_landmarks, r.closures
        );
    }
    s
}

/// Writes `trajectory.txt`, `metrics.txt`, `metrics.csv` and `frames.csv` into `dir`.
pub fn write_outputs(output: &PipelineOutput, truth: Option<&[Isometry3]>, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_trajectory(&output.trajectory, &dir.join("trajectory.txt"))?;
    std::fs::write(dir.join("metrics.txt"), output.report.to_table())?;
    std::fs::write(dir.join("metrics.csv"), output.report.to_csv())?;
    std::fs::write(dir.join("frames.csv"), frames_csv(output, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, render_frame, RenderOptions, SceneSpec};

    fn run_keypoints(spec: &SceneSpec, cfg: SlamConfig) -> (Vec<Isometry3>, Vec<Isometry3>, Vec<FrameReport>) {
        let scene = generate_scene(spec);
        let mut slam = Slam::new(spec.rig, cfg);
        let opts = RenderOptions { quantize: false, images: false };
        let reports = scene
            .poses
            .iter()
            .enumerate()
            .map(|(k, pose)| {
                let f = render_frame(&scene, pose, spec, k, opts);
                slam.process_pairs(&f.stereo_pairs(spec.seed), scene.timestamps[k], None).unwrap()
            })
            .collect();
        (slam.trajectory(), scene.poses, reports)
    }

    #[test]
    fn black_images_halt_after_lost_streak() {
        let rig = crate::synth::default_rig();
        let cfg = SlamConfig { max_lost_frames: 3, ..Default::default() };
        let mut slam = Slam::new(rig, cfg);
        let img = GrayImage::new(rig.width(), rig.height());
        assert_eq!(slam.process(&img, &img, 0.0).unwrap().status, TrackingStatus::Initialized);
        for k in 1..=3 {
            assert_eq!(slam.process(&img, &img, k as f64).unwrap().status, TrackingStatus::Lost);
        }
        assert_eq!(slam.process(&img, &img, 4.0), Err(TrackingHalted { frame: 4, lost: 4 }));
    }

    #[test]
    fn noise_free_straight_run_is_exact() {
        let (est, gt, reports) = run_keypoints(&SceneSpec::default(), SlamConfig::default());
        assert_eq!(est.len(), 101);
        assert!(reports[1..].iter().all(|r| r.status == TrackingStatus::Tracked));
        let err = (est[100].translation.vector - gt[100].translation.vector).norm();
        assert!(err < 1e-3, "final error {err}");
    }

    #[test]
    fn runs_are_bit_identical() {
        let spec = SceneSpec { length: 40.0, noise_sigma: 0.3, ..Default::default() };
        let (a, _, _) = run_keypoints(&spec, SlamConfig::default());
        let (b, _, _) = run_keypoints(&spec, SlamConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn rendered_images_track_a_short_run() {
        let spec = SceneSpec { length: 30.0, point_count: 1500, ..Default::default() };
        let scene = generate_scene(&spec);
        let mut slam = Slam::new(spec.rig, SlamConfig::default());
        for (k, pose) in scene.poses.iter().enumerate() {
            let f = render_frame(&scene, pose, &spec, k, RenderOptions::default());
            let r = slam.process(f.left.as_ref().unwrap(), f.right.as_ref().unwrap(), scene.timestamps[k]).unwrap();
            assert_ne!(r.status, TrackingStatus::Lost, "frame {k}");
        }
        // Integer keypoints limit accuracy to a few tenths of a percent of the path.
        let err = (slam.trajectory()[30].translation.vector - scene.poses[30].translation.vector).norm();
        assert!(err < 0.5, "final error {err}");
    }
}
