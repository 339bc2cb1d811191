//! Persistent SLAM records: keypoints, framepoints, frames, landmarks, local maps and the
//! world map that owns them.
//!
//! Records refer to each other through integer handles resolved by [`WorldMap`]; nothing
//! holds a pointer into another record.

use nalgebra::{Matrix3, Vector3};

use crate::frontend::Descriptor;
use crate::geometry::{ImagePoint, Isometry3};
use crate::posegraph::PoseGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LandmarkId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LocalMapId(pub usize);

/// Handle to a framepoint: owning frame plus index into its point list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FramepointRef {
    pub frame: FrameId,
    pub index: usize,
}

/// Keypoint with descriptor. Detected keypoints sit on integer pixels; synthesized ones
/// (recovered correspondences, synthetic renders) may be sub-pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointWD {
    pub r: f64,
    pub c: f64,
    pub response: f64,
    /// Zero until the descriptor is extracted.
    pub d: Descriptor,
}

impl KeypointWD {
    pub fn new(r: f64, c: f64, response: f64) -> Self {
        Self { r, c, response, d: Descriptor::default() }
    }

    pub fn with_descriptor(mut self, d: Descriptor) -> Self {
        self.d = d;
        self
    }

    pub fn point(&self) -> ImagePoint {
        ImagePoint::new(self.r, self.c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Framepoint {
    pub k_l: KeypointWD,
    pub k_r: KeypointWD,
    /// Camera coordinates (m).
    pub p_c: Vector3<f64>,
    /// World coordinates (m), the owning frame's pose applied to `p_c`.
    pub p_w: Vector3<f64>,
    pub prev: Option<FramepointRef>,
    pub next: Option<FramepointRef>,
    pub landmark: Option<LandmarkId>,
    pub inlier: bool,
}

impl Framepoint {
    pub fn new(k_l: KeypointWD, k_r: KeypointWD, p_c: Vector3<f64>, t_c2w: &Isometry3) -> Self {
        Self {
            k_l,
            k_r,
            p_c,
            p_w: transform_point(t_c2w, &p_c),
            prev: None,
            next: None,
            landmark: None,
            inlier: false,
        }
    }
}

/// Applies a rigid transform to a point given as a plain vector.
pub fn transform_point(t: &Isometry3, p: &Vector3<f64>) -> Vector3<f64> {
    t.rotation * p + t.translation.vector
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub id: FrameId,
    t_c2w: Isometry3,
    pub points: Vec<Framepoint>,
    pub timestamp: f64,
    /// Set when triangulation produced no framepoints.
    pub degenerate: bool,
}

impl Frame {
    pub fn new(id: FrameId, t_c2w: Isometry3, timestamp: f64) -> Self {
        Self { id, t_c2w, points: Vec::new(), timestamp, degenerate: false }
    }

    pub fn t_c2w(&self) -> Isometry3 {
        self.t_c2w
    }

    pub fn t_w2c(&self) -> Isometry3 {
        self.t_c2w.inverse()
    }

    pub fn set_t_c2w(&mut self, t_c2w: Isometry3) {
        self.t_c2w = t_c2w;
    }

    /// Sets the pose and re-derives every framepoint's world position from it.
    pub fn set_pose_and_refresh(&mut self, t_c2w: Isometry3) {
        self.t_c2w = t_c2w;
        for fp in &mut self.points {
            fp.p_w = transform_point(&t_c2w, &fp.p_c);
        }
    }

    pub fn point_ref(&self, index: usize) -> FramepointRef {
        FramepointRef { frame: self.id, index }
    }
}

/// Persistent 3-D point refined by an information filter over its observations.
#[derive(Clone, Debug)]
pub struct Landmark {
    pub id: LandmarkId,
    pub p_w: Vector3<f64>,
    pub origin: FramepointRef,
    pub omega: Matrix3<f64>,
    pub nu: Vector3<f64>,
    pub observation_count: usize,
    /// Distinct left descriptors seen along the track.
    pub descriptors: Vec<Descriptor>,
    /// Most recent local map that contains this landmark.
    pub last_map: Option<LocalMapId>,
}

impl Landmark {
    /// A landmark with an empty filter; callers apply the first measurement.
    pub fn empty(id: LandmarkId, origin: FramepointRef) -> Self {
        Self {
            id,
            p_w: Vector3::zeros(),
            origin,
            omega: Matrix3::zeros(),
            nu: Vector3::zeros(),
            observation_count: 0,
            descriptors: Vec::new(),
            last_map: None,
        }
    }

    pub fn add_descriptor(&mut self, d: Descriptor) {
        if !self.descriptors.contains(&d) {
            self.descriptors.push(d);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LocalMap {
    pub id: LocalMapId,
    t_c2w: Isometry3,
    pub frames: Vec<FrameId>,
    pub landmarks: Vec<LandmarkId>,
    /// Frame poses expressed in the local map's coordinates, parallel to `frames`.
    pub relative_frame_poses: Vec<Isometry3>,
}

impl LocalMap {
    pub fn new(
        id: LocalMapId,
        t_c2w: Isometry3,
        frames: Vec<FrameId>,
        landmarks: Vec<LandmarkId>,
        relative_frame_poses: Vec<Isometry3>,
    ) -> Self {
        Self { id, t_c2w, frames, landmarks, relative_frame_poses }
    }

    pub fn t_c2w(&self) -> Isometry3 {
        self.t_c2w
    }

    pub fn t_w2c(&self) -> Isometry3 {
        self.t_c2w.inverse()
    }

    pub fn set_t_c2w(&mut self, t_c2w: Isometry3) {
        self.t_c2w = t_c2w;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MapError {
    #[error("framepoint {0:?} is already linked")]
    AlreadyLinked(FramepointRef),
    #[error("unknown framepoint {0:?}")]
    UnknownFramepoint(FramepointRef),
    #[error("track through {0:?} contains a cycle")]
    CyclicTrack(FramepointRef),
    #[error("ownership violated: {0}")]
    Ownership(String),
}

/// Root of the map: defines the world frame and owns every frame, local map and landmark.
#[derive(Clone, Debug, Default)]
pub struct WorldMap {
    pub origin: Isometry3,
    pub frames: Vec<Frame>,
    pub local_maps: Vec<LocalMap>,
    pub landmarks: Vec<Landmark>,
    pub graph: PoseGraph,
}

impl WorldMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frame(&self, id: FrameId) -> &Frame {
        &self.frames[id.0]
    }

    pub fn frame_mut(&mut self, id: FrameId) -> &mut Frame {
        &mut self.frames[id.0]
    }

    pub fn landmark(&self, id: LandmarkId) -> &Landmark {
        &self.landmarks[id.0]
    }

    pub fn landmark_mut(&mut self, id: LandmarkId) -> &mut Landmark {
        &mut self.landmarks[id.0]
    }

    pub fn local_map(&self, id: LocalMapId) -> &LocalMap {
        &self.local_maps[id.0]
    }

    /// Appends a frame, assigning it the next identifier.
    pub fn push_frame(&mut self, mut frame: Frame) -> FrameId {
        let id = FrameId(self.frames.len());
        frame.id = id;
        self.frames.push(frame);
        id
    }

    pub fn next_frame_id(&self) -> FrameId {
        FrameId(self.frames.len())
    }

    pub fn push_landmark(&mut self, mut landmark: Landmark) -> LandmarkId {
        let id = LandmarkId(self.landmarks.len());
        landmark.id = id;
        self.landmarks.push(landmark);
        id
    }

    pub fn framepoint(&self, r: FramepointRef) -> Option<&Framepoint> {
        self.frames.get(r.frame.0)?.points.get(r.index)
    }

    pub fn framepoint_mut(&mut self, r: FramepointRef) -> Option<&mut Framepoint> {
        self.frames.get_mut(r.frame.0)?.points.get_mut(r.index)
    }

    /// Links `curr` to its predecessor `prev`, propagating the predecessor's landmark.
    pub fn link_track(&mut self, prev: FramepointRef, curr: FramepointRef) -> Result<(), MapError> {
        let prev_fp = self.framepoint(prev).ok_or(MapError::UnknownFramepoint(prev))?;
        if prev_fp.next.is_some() {
            return Err(MapError::AlreadyLinked(prev));
        }
        let landmark = prev_fp.landmark;
        let curr_fp = self.framepoint(curr).ok_or(MapError::UnknownFramepoint(curr))?;
        if curr_fp.prev.is_some() {
            return Err(MapError::AlreadyLinked(curr));
        }
        if prev == curr {
            return Err(MapError::CyclicTrack(curr));
        }
        let curr_fp = self.framepoint_mut(curr).expect("checked above");
        curr_fp.prev = Some(prev);
        if landmark.is_some() {
            curr_fp.landmark = landmark;
        }
        self.framepoint_mut(prev).expect("checked above").next = Some(curr);
        Ok(())
    }

    /// Removes the backward link of `curr` (and the matching forward link).
    pub fn unlink_prev(&mut self, curr: FramepointRef) {
        let Some(fp) = self.framepoint_mut(curr) else { return };
        let prev = fp.prev.take();
        fp.landmark = None;
        if let Some(prev) = prev {
            if let Some(p) = self.framepoint_mut(prev) {
                p.next = None;
            }
        }
    }

    /// Number of framepoints on the track ending at `fp`, inclusive.
    pub fn track_length(&self, fp: FramepointRef) -> Result<usize, MapError> {
        self.track_origin_with_length(fp).map(|(_, n)| n)
    }

    /// First framepoint of the track ending at `fp`.
    pub fn track_origin(&self, fp: FramepointRef) -> Result<FramepointRef, MapError> {
        self.track_origin_with_length(fp).map(|(o, _)| o)
    }

    fn track_origin_with_length(&self, fp: FramepointRef) -> Result<(FramepointRef, usize), MapError> {
        let mut current = fp;
        let mut length = 1;
        let mut point = self.framepoint(fp).ok_or(MapError::UnknownFramepoint(fp))?;
        while let Some(prev) = point.prev {
            if length > self.frames.len() {
                return Err(MapError::CyclicTrack(fp));
            }
            point = self.framepoint(prev).ok_or(MapError::UnknownFramepoint(prev))?;
            current = prev;
            length += 1;
        }
        Ok((current, length))
    }

    /// Checks the ownership and linkage rules across the whole map.
    pub fn audit(&self) -> Result<(), MapError> {
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.id.0 != i {
                return Err(MapError::Ownership(format!("frame slot {i} holds id {:?}", frame.id)));
            }
            for (j, fp) in frame.points.iter().enumerate() {
                let this = frame.point_ref(j);
                if let Some(prev) = fp.prev {
                    let p = self.framepoint(prev).ok_or(MapError::UnknownFramepoint(prev))?;
                    if p.next != Some(this) || prev.frame >= frame.id {
                        return Err(MapError::Ownership(format!("broken backward link at {this:?}")));
                    }
                }
                if let Some(next) = fp.next {
                    let n = self.framepoint(next).ok_or(MapError::UnknownFramepoint(next))?;
                    if n.prev != Some(this) {
                        return Err(MapError::Ownership(format!("broken forward link at {this:?}")));
                    }
                }
                if let Some(lm) = fp.landmark {
                    if lm.0 >= self.landmarks.len() {
                        return Err(MapError::Ownership(format!("dangling landmark {lm:?}")));
                    }
                }
            }
        }
        let mut owner = vec![None; self.frames.len()];
        for (i, map) in self.local_maps.iter().enumerate() {
            if map.id.0 != i || map.frames.len() != map.relative_frame_poses.len() {
                return Err(MapError::Ownership(format!("local map slot {i} is inconsistent")));
            }
            for f in &map.frames {
                match owner.get_mut(f.0) {
                    Some(slot @ None) => *slot = Some(map.id),
                    Some(Some(other)) => {
                        return Err(MapError::Ownership(format!("{f:?} owned by {other:?} and {:?}", map.id)))
                    }
                    None => return Err(MapError::Ownership(format!("{:?} references missing {f:?}", map.id))),
                }
            }
            let mut sorted = map.landmarks.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != map.landmarks.len() || sorted.iter().any(|l| l.0 >= self.landmarks.len()) {
                return Err(MapError::Ownership(format!("{:?} landmark list is invalid", map.id)));
            }
        }
        for (i, lm) in self.landmarks.iter().enumerate() {
            if lm.id.0 != i {
                return Err(MapError::Ownership(format!("landmark slot {i} holds id {:?}", lm.id)));
            }
        }
        Ok(())
    }
}
