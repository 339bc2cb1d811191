//! Map management: correspondence recovery, landmark promotion and filtering, and local map
//! generation.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Vector3};

use crate::frontend::{hamming_distance, BriefExtractor};
use crate::geometry::{rotation_angle, ImagePoint, Isometry3, StereoRig};
use crate::map::{
    transform_point, FrameId, Framepoint, FramepointRef, KeypointWD, Landmark, LandmarkId, LocalMap, LocalMapId,
    WorldMap,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapperConfig {
    pub recovery_max_distance: u32,
    pub min_track_for_landmark: usize,
    pub map_translation_threshold: f64,
    pub map_rotation_threshold: f64,
    /// Landmark measurement standard deviation at 1 m depth (m); grows linearly with depth.
    pub measurement_sigma: f64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            recovery_max_distance: 25,
            min_track_for_landmark: 3,
            map_translation_threshold: 5.0,
            map_rotation_threshold: 0.5,
            measurement_sigma: 0.05,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.recovery_max_distance > 0
            && self.min_track_for_landmark > 0
            && self.map_translation_threshold > 0.0
            && self.map_rotation_threshold > 0.0
            && self.measurement_sigma > 0.0;
        ok.then_some(()).ok_or_else(|| "mapper parameters must all be positive".to_string())
    }
}

/// Looks for unmatched previous framepoints in the current left image at their projection
/// under the refined pose. A hit creates a linked framepoint whose right keypoint is
/// synthesized from the projected disparity. Returns the number recovered.
pub fn recover_correspondences(
    world: &mut WorldMap,
    prev: FrameId,
    unmatched: &[usize],
    curr: FrameId,
    left_image: &BriefExtractor,
    rig: &StereoRig,
    cfg: &MapperConfig,
) -> usize {
    let t_w2c = world.frame(curr).t_w2c();
    let t_c2w = world.frame(curr).t_c2w();
    let mut occupied: BTreeSet<(i64, i64)> =
        world.frame(curr).points.iter().map(|fp| (fp.k_l.r as i64, fp.k_l.c as i64)).collect();

    let mut recovered = 0;
    for &i in unmatched {
        let prev_ref = FramepointRef { frame: prev, index: i };
        let prev_fp = world.framepoint(prev_ref).expect("unmatched index out of range").clone();
        if prev_fp.next.is_some() {
            continue;
        }
        let p_w = prev_fp.landmark.map_or(prev_fp.p_w, |l| world.landmark(l).p_w);
        let p_c = transform_point(&t_w2c, &p_w);
        let Ok(proj) = rig.left.project(&p_c) else { continue };
        if !proj.in_view {
            continue;
        }
        let (r, c) = (proj.point.r.round(), proj.point.c.round());
        if occupied.contains(&(r as i64, c as i64)) {
            continue;
        }
        let Ok(descriptor) = left_image.extract(r as isize, c as isize) else { continue };
        if hamming_distance(&descriptor, &prev_fp.k_l.d) > cfg.recovery_max_distance {
            continue;
        }
        let disparity = rig.baseline / p_c.z;
        let k_l = KeypointWD::new(r, c, prev_fp.k_l.response).with_descriptor(descriptor);
        let k_r = KeypointWD::new(r, c - disparity, prev_fp.k_r.response).with_descriptor(prev_fp.k_r.d);
        let Ok(p_c_new) = rig.triangulate(ImagePoint::new(r, c), ImagePoint::new(r, c - disparity)) else {
            continue;
        };
        let mut fp = Framepoint::new(k_l, k_r, p_c_new, &t_c2w);
        fp.inlier = true;
        let frame = world.frame_mut(curr);
        frame.points.push(fp);
        let curr_ref = FramepointRef { frame: curr, index: frame.points.len() - 1 };
        world.link_track(prev_ref, curr_ref).expect("fresh framepoint links cleanly");
        occupied.insert((r as i64, c as i64));
        recovered += 1;
    }
    recovered
}

/// Folds one world-frame measurement into the landmark's information filter.
pub fn update_landmark_filter(lm: &mut Landmark, p_w_measured: &Vector3<f64>, depth: f64, cfg: &MapperConfig) {
    debug_assert!(depth > 0.0);
    let sigma = cfg.measurement_sigma * depth;
    let weight = 1.0 / (sigma * sigma);
    lm.omega += Matrix3::from_diagonal_element(weight);
    lm.nu += weight * p_w_measured;
    lm.p_w = lm.omega.try_inverse().map_or(*p_w_measured, |inv| inv * lm.nu);
    lm.observation_count += 1;
}

/// Refines every landmark observed by an inlier framepoint of `frame`.
pub fn update_observed_landmarks(world: &mut WorldMap, frame: FrameId, cfg: &MapperConfig) -> usize {
    let observations: Vec<_> = world
        .frame(frame)
        .points
        .iter()
        .filter(|fp| fp.inlier && fp.prev.is_some())
        .filter_map(|fp| fp.landmark.map(|l| (l, fp.p_w, fp.p_c.z, fp.k_l.d)))
        .collect();
    for (l, p_w, depth, d) in &observations {
        let lm = world.landmark_mut(*l);
        update_landmark_filter(lm, p_w, *depth, cfg);
        lm.add_descriptor(*d);
    }
    observations.len()
}

/// Creates landmarks for inlier framepoints whose track just became long enough.
pub fn promote_landmarks(world: &mut WorldMap, frame: FrameId, cfg: &MapperConfig) -> Vec<LandmarkId> {
    let mut created = Vec::new();
    for index in 0..world.frame(frame).points.len() {
        let here = FramepointRef { frame, index };
        let fp = &world.frame(frame).points[index];
        if fp.landmark.is_some() || !fp.inlier || fp.prev.is_none() {
            continue;
        }
        let (p_w, depth) = (fp.p_w, fp.p_c.z);
        let Ok(length) = world.track_length(here) else { continue };
        if length < cfg.min_track_for_landmark {
            continue;
        }
        let origin = world.track_origin(here).expect("track walked above");
        let mut lm = Landmark::empty(LandmarkId(0), origin);
        update_landmark_filter(&mut lm, &p_w, depth, cfg);
        let id = world.push_landmark(lm);

        let mut cursor = Some(here);
        while let Some(r) = cursor {
            let fp = world.framepoint_mut(r).expect("track member exists");
            fp.landmark = Some(id);
            let d = fp.k_l.d;
            cursor = fp.prev;
            world.landmark_mut(id).add_descriptor(d);
        }
        created.push(id);
    }
    created
}

/// Relative motion of `current` with respect to the last local map (or the world origin).
pub fn displacement_since_last_map(world: &WorldMap, current_c2w: &Isometry3) -> (f64, f64) {
    let reference = world.local_maps.last().map_or(world.origin, |m| m.t_c2w());
    let relative = reference.inverse() * current_c2w;
    (relative.translation.vector.norm(), rotation_angle(&relative))
}

/// Bundles the pending frames into a new local map when the last one has moved or turned
/// far enough from the previous local map. The map takes the pose of the newest frame and
/// becomes a pose-graph node chained to its predecessor.
pub fn maybe_create_local_map(world: &mut WorldMap, pending: &mut Vec<FrameId>, cfg: &MapperConfig) -> Option<LocalMapId> {
    let &last = pending.last()?;
    let pose = world.frame(last).t_c2w();
    let (translation, rotation) = displacement_since_last_map(world, &pose);
    if translation <= cfg.map_translation_threshold && rotation <= cfg.map_rotation_threshold {
        return None;
    }

    let id = LocalMapId(world.local_maps.len());
    let frames = std::mem::take(pending);
    let t_w2c = pose.inverse();
    let relative: Vec<_> = frames.iter().map(|&f| t_w2c * world.frame(f).t_c2w()).collect();
    let landmarks: BTreeSet<LandmarkId> = frames
        .iter()
        .flat_map(|&f| world.frame(f).points.iter().filter_map(|fp| fp.landmark))
        .collect();
    for &l in &landmarks {
        world.landmark_mut(l).last_map = Some(id);
    }
    world.local_maps.push(LocalMap::new(id, pose, frames, landmarks.into_iter().collect(), relative));

    world.graph.add_node(id, pose);
    if id.0 > 0 {
        world.graph.add_odometry_edge(LocalMapId(id.0 - 1), id).expect("both nodes exist");
    }
    Some(id)
}
