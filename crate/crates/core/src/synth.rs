//! Synthetic stereo worlds with exact ground truth: point corridors along planar
//! trajectories, keypoint-level rendering with labels, and rasterized stereo images.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Rotation3, Translation3, Vector3};

use crate::geometry::{ImagePoint, Isometry3, StereoRig};
use crate::gray::GrayImage;
use crate::io::{write_pgm, write_trajectory};
use crate::frontend::Descriptor;
use crate::map::{transform_point, KeypointWD};
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryKind {
    Straight,
    /// Constant curvature turning by `arc_angle` over the whole length.
    Arc,
    /// Closed circle whose circumference is the trajectory length.
    Loop,
    /// Straight stretches joined by quarter turns of alternating direction.
    Winding,
}

impl std::str::FromStr for TrajectoryKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "straight" => Ok(Self::Straight),
            "arc" => Ok(Self::Arc),
            "loop" => Ok(Self::Loop),
            "winding" => Ok(Self::Winding),
            _ => Err(format!("unknown trajectory kind {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub point_count: usize,
    /// Distance range of points left and right of the path (m).
    pub lateral: (f64, f64),
    /// Height range of points; camera y points down (m).
    pub vertical: (f64, f64),
    pub trajectory: TrajectoryKind,
    pub length: f64,
    pub speed: f64,
    pub rate: f64,
    pub arc_angle: f64,
    pub straight_stretch: f64,
    pub turn_radius: f64,
    /// Times a loop trajectory goes round; the circumference is `length / laps`.
    pub laps: usize,
    pub rig: StereoRig,
    /// Pixel noise standard deviation.
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub occlusion: bool,
}

/// KITTI-like 1241x376 rig with a 0.54 m baseline.
pub fn default_rig() -> StereoRig {
    let fx = 718.856;
    StereoRig::new(fx, fx, 607.1928, 185.2157, fx * 0.537_165_7, 1241, 376).expect("valid constants")
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            point_count: 2000,
            lateral: (3.0, 25.0),
            vertical: (-6.0, 1.5),
            trajectory: TrajectoryKind::Straight,
            length: 100.0,
            speed: 10.0,
            rate: 10.0,
            arc_angle: std::f64::consts::FRAC_PI_2,
            straight_stretch: 80.0,
            turn_radius: 25.0,
            laps: 1,
            rig: default_rig(),
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            occlusion: true,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.point_count == 0 {
            return Err("point_count must be at least 1".into());
        }
        if self.laps == 0 {
            return Err("laps must be at least 1".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return Err("noise_sigma must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err("outlier_fraction must lie in [0, 1)".into());
        }
        if !(self.length > 0.0 && self.speed > 0.0 && self.rate > 0.0) {
            return Err("length, speed and rate must be positive".into());
        }
        if self.lateral.0 > self.lateral.1 || self.vertical.0 > self.vertical.1 || self.lateral.0 < 0.0 {
            return Err("bounds must be ordered ranges".into());
        }
        Ok(())
    }

    /// Path length of one lap of a loop; the full length for other kinds.
    pub fn circumference(&self) -> f64 {
        match self.trajectory {
            TrajectoryKind::Loop => self.length / self.laps as f64,
            _ => self.length,
        }
    }

    /// Distance travelled between frames.
    pub fn step(&self) -> f64 {
        self.speed / self.rate
    }

    /// Parses `key = value` lines over the defaults. Rig keys: `fx`, `fy`, `cx`, `cy`,
    /// `baseline` (m), `width`, `height`.
    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut s = Self::default();
        let (mut fx, mut fy, mut cx, mut cy) = (s.rig.left.fx, s.rig.left.fy, s.rig.left.cx, s.rig.left.cy);
        let mut baseline_m = s.rig.baseline / fx;
        let (mut w, mut h) = (s.rig.width(), s.rig.height());
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || format!("line {}: bad value {v:?} for {k}", i + 1);
            let num = || v.parse::<f64>().map_err(|_| bad());
            let pair = || -> Result<(f64, f64), String> {
                let (a, b) = v.split_once(',').ok_or_else(bad)?;
                Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
            };
            match k {
                "seed" => s.seed = v.parse().map_err(|_| bad())?,
                "point_count" => s.point_count = v.parse().map_err(|_| bad())?,
                "lateral" => s.lateral = pair()?,
                "vertical" => s.vertical = pair()?,
                "trajectory" => s.trajectory = v.parse()?,
                "length" => s.length = num()?,
                "speed" => s.speed = num()?,
                "rate" => s.rate = num()?,
                "arc_angle" => s.arc_angle = num()?,
                "straight_stretch" => s.straight_stretch = num()?,
                "turn_radius" => s.turn_radius = num()?,
                "laps" => s.laps = v.parse().map_err(|_| bad())?,
                "noise_sigma" => s.noise_sigma = num()?,
                "outlier_fraction" => s.outlier_fraction = num()?,
                "occlusion" => s.occlusion = v.parse().map_err(|_| bad())?,
                "fx" => fx = num()?,
                "fy" => fy = num()?,
                "cx" => cx = num()?,
                "cy" => cy = num()?,
                "baseline" => baseline_m = num()?,
                "width" => w = v.parse().map_err(|_| bad())?,
                "height" => h = v.parse().map_err(|_| bad())?,
                _ => return Err(format!("line {}: unknown key {k:?}", i + 1)),
            }
        }
        s.rig = StereoRig::new(fx, fy, cx, cy, fx * baseline_m, w, h).map_err(|e| e.to_string())?;
        s.validate()?;
        Ok(s)
    }
}

/// Planar path built from constant-curvature pieces: `(length, curvature)`.
fn segments(spec: &SceneSpec) -> Vec<(f64, f64)> {
    match spec.trajectory {
        TrajectoryKind::Straight => vec![(spec.length, 0.0)],
        TrajectoryKind::Arc => vec![(spec.length, spec.arc_angle / spec.length)],
        TrajectoryKind::Loop => {
            let circumference = spec.circumference();
            vec![(circumference, std::f64::consts::TAU / circumference)]
        }
        TrajectoryKind::Winding => {
            let turn = spec.turn_radius * std::f64::consts::FRAC_PI_2;
            let mut out = Vec::new();
            let mut left = spec.length;
            let mut sign = 1.0;
            while left > 0.0 {
                let straight = spec.straight_stretch.min(left);
                out.push((straight, 0.0));
                left -= straight;
                if left > 0.0 {
                    let t = turn.min(left);
                    out.push((t, sign / spec.turn_radius));
                    left -= t;
                    sign = -sign;
                }
            }
            out
        }
    }
}

/// Position `(x, z)` and heading at arc length `s`. Beyond the ends the path continues
/// straight, except loops, which wrap.
fn path_state(segs: &[(f64, f64)], spec: &SceneSpec, s: f64) -> (f64, f64, f64) {
    let s = if spec.trajectory == TrajectoryKind::Loop { s.rem_euclid(spec.circumference()) } else { s };
    if s < 0.0 {
        return (0.0, s, 0.0);
    }
    let (mut x, mut z, mut psi) = (0.0f64, 0.0f64, 0.0f64);
    let mut remaining = s;
    for &(len, kappa) in segs {
        let ds = remaining.min(len);
        if kappa == 0.0 {
            x += ds * psi.sin();
            z += ds * psi.cos();
        } else {
            let next = psi + kappa * ds;
            x += (psi.cos() - next.cos()) / kappa;
            z += (next.sin() - psi.sin()) / kappa;
            psi = next;
        }
        remaining -= ds;
        if remaining <= 0.0 {
            return (x, z, psi);
        }
    }
    // Past the end: continue straight.
    (x + remaining * psi.sin(), z + remaining * psi.cos(), psi)
}

fn pose_at(x: f64, z: f64, psi: f64) -> Isometry3 {
    Isometry3::from_parts(Translation3::new(x, 0.0, z), Rotation3::from_axis_angle(&Vector3::y_axis(), psi))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub points: Vec<Vector3<f64>>,
    /// 5x5 intensity pattern of each point, row-major.
    pub patterns: Vec<[u8; 25]>,
    /// Camera-to-world ground truth per frame.
    pub poses: Vec<Isometry3>,
    pub timestamps: Vec<f64>,
}

const PATTERN_STREAM: u64 = 0x5041_5454;
pub const BACKGROUND: u8 = 128;

pub fn generate_scene(spec: &SceneSpec) -> Scene {
    let segs = segments(spec);
    let step = spec.step();
    let frames = (spec.length / step).round() as usize;
    let poses: Vec<Isometry3> = (0..=frames)
        .map(|k| {
            let s = if k == frames { spec.length } else { k as f64 * step };
            let (x, z, psi) = path_state(&segs, spec, s);
            pose_at(x, z, psi)
        })
        .collect();
    let timestamps = (0..poses.len()).map(|k| k as f64 / spec.rate).collect();

    let mut rng = SplitMix64::new(spec.seed);
    // Loops wrap, so their corridor needs no extension past the ends.
    let margin = if spec.trajectory == TrajectoryKind::Loop { 0.0 } else { 80.0 };
    let points = (0..spec.point_count)
        .map(|_| {
            let s = rng.uniform(-margin, spec.circumference() + margin);
            let (x, z, psi) = path_state(&segs, spec, s);
            let side = if rng.bool(0.5) { 1.0 } else { -1.0 };
            let d = side * rng.uniform(spec.lateral.0, spec.lateral.1);
            let y = rng.uniform(spec.vertical.0, spec.vertical.1);
            // Right-hand direction of the path at s is (cos ψ, 0, −sin ψ).
            Vector3::new(x + d * psi.cos(), y, z - d * psi.sin())
        })
        .collect();
    let patterns = (0..spec.point_count).map(|i| point_pattern(spec.seed, i)).collect();
    Scene { points, patterns, poses, timestamps }
}

/// Bright center over a random texture, unique per point.
fn point_pattern(seed: u64, index: usize) -> [u8; 25] {
    let mut rng = SplitMix64::stream(seed ^ PATTERN_STREAM, index as u64);
    let mut p = [0u8; 25];
    for v in p.iter_mut() {
        *v = 48 + rng.below(161) as u8;
    }
    p[12] = 255;
    p
}

const DESCRIPTOR_STREAM: u64 = 0x5eed_de5c;

/// Random descriptor of a world point for the keypoint-level path, where no image is
/// described. Stable across frames, so exact matches have distance zero.
pub fn point_descriptor(seed: u64, point: usize) -> Descriptor {
    let mut rng = SplitMix64::stream(seed ^ DESCRIPTOR_STREAM, point as u64);
    Descriptor([rng.next_u64(), rng.next_u64(), rng.next_u64(), rng.next_u64()])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderedKeypoint {
    pub point: usize,
    pub left: ImagePoint,
    pub right: ImagePoint,
    /// Depth in the camera frame.
    pub depth: f64,
    /// The measurement was replaced by a random one.
    pub outlier: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub keypoints: Vec<RenderedKeypoint>,
    pub left: Option<GrayImage>,
    pub right: Option<GrayImage>,
}

impl RenderedFrame {
    /// Stereo pairs as a matcher would return them, each side carrying [`point_descriptor`].
    pub fn stereo_pairs(&self, seed: u64) -> Vec<(KeypointWD, KeypointWD)> {
        self.keypoints
            .iter()
            .map(|k| {
                let d = point_descriptor(seed, k.point);
                (
                    KeypointWD::new(k.left.r, k.left.c, 1.0).with_descriptor(d),
                    KeypointWD::new(k.right.r, k.right.c, 1.0).with_descriptor(d),
                )
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderOptions {
    /// Round keypoints to integer pixels, as a detector would report them.
    pub quantize: bool,
    pub images: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { quantize: true, images: true }
    }
}

const HALF: isize = 2;

fn footprint_free(occupied: &[bool], w: usize, h: usize, r: isize, c: isize) -> bool {
    for y in r - HALF..=r + HALF {
        for x in c - HALF..=c + HALF {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && occupied[y as usize * w + x as usize] {
                return false;
            }
        }
    }
    true
}

fn mark(occupied: &mut [bool], w: usize, h: usize, r: isize, c: isize) {
    for y in r - HALF..=r + HALF {
        for x in c - HALF..=c + HALF {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                occupied[y as usize * w + x as usize] = true;
            }
        }
    }
}

fn paint(img: &mut GrayImage, pattern: &[u8; 25], r: isize, c: isize) {
    let (w, h) = (img.width() as isize, img.height() as isize);
    for dy in -HALF..=HALF {
        for dx in -HALF..=HALF {
            let (y, x) = (r + dy, c + dx);
            if y >= 0 && x >= 0 && y < h && x < w {
                img.set(y as usize, x as usize, pattern[((dy + HALF) * 5 + dx + HALF) as usize]);
            }
        }
    }
}

/// Projects the scene into both cameras at `t_c2w`. Pixel noise (shared row, independent
/// columns) and outlier draws come from a generator seeded by the scene seed and
/// `frame_index`. Points behind the camera, outside either image or (with occlusion) whose
/// footprint touches that of a nearer point are dropped. Images show every kept point as
/// its pattern at the rounded noisy position.
pub fn render_frame(scene: &Scene, t_c2w: &Isometry3, spec: &SceneSpec, frame_index: usize, opts: RenderOptions) -> RenderedFrame {
    let rig = &spec.rig;
    let (w, h) = (rig.width(), rig.height());
    let t_w2c = t_c2w.inverse();
    let mut rng = SplitMix64::stream(spec.seed, frame_index as u64 + 1);

    struct Candidate {
        point: usize,
        depth: f64,
        left: ImagePoint,
        right: ImagePoint,
        noise: (f64, f64, f64),
    }
    let mut candidates = Vec::new();
    for (i, p) in scene.points.iter().enumerate() {
        let p_c = transform_point(&t_w2c, p);
        if p_c.z <= 0.1 {
            continue;
        }
        let (Ok(l), Ok(r)) = (rig.left.project(&p_c), rig.right.project(&p_c)) else { continue };
        let inside = |q: &ImagePoint| q.r >= 0.0 && q.c >= 0.0 && q.r <= (h - 1) as f64 && q.c <= (w - 1) as f64;
        if !(inside(&l.point) && inside(&r.point)) {
            continue;
        }
        candidates.push(Candidate { point: i, depth: p_c.z, left: l.point, right: r.point, noise: (0.0, 0.0, 0.0) });
    }
    // Draw noise in point order so it does not depend on the visibility sort below.
    for c in &mut candidates {
        if spec.noise_sigma > 0.0 {
            c.noise = (rng.gaussian(spec.noise_sigma), rng.gaussian(spec.noise_sigma), rng.gaussian(spec.noise_sigma));
        }
    }
    candidates.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.point.cmp(&b.point)));

    let clamp = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
    let mut occ_l = vec![false; w * h];
    let mut occ_r = vec![false; w * h];
    let mut kept = Vec::new();
    for c in candidates {
        let row = clamp(c.left.r + c.noise.0, h);
        let left = ImagePoint::new(row, clamp(c.left.c + c.noise.1, w));
        let right = ImagePoint::new(row, clamp(c.right.c + c.noise.2, w));
        let (lr, lc, rc) = (left.r.round() as isize, left.c.round() as isize, right.c.round() as isize);
        if spec.occlusion {
            if !footprint_free(&occ_l, w, h, lr, lc) || !footprint_free(&occ_r, w, h, lr, rc) {
                continue;
            }
            mark(&mut occ_l, w, h, lr, lc);
            mark(&mut occ_r, w, h, lr, rc);
        }
        kept.push((c.point, c.depth, left, right));
    }

    let (mut left_img, mut right_img) = if opts.images {
        (Some(GrayImage::filled(w, h, BACKGROUND)), Some(GrayImage::filled(w, h, BACKGROUND)))
    } else {
        (None, None)
    };
    // Far to near, so nearer patterns win where occlusion is off.
    if let (Some(li), Some(ri)) = (left_img.as_mut(), right_img.as_mut()) {
        for &(point, _, left, right) in kept.iter().rev() {
            let r = left.r.round() as isize;
            paint(li, &scene.patterns[point], r, left.c.round() as isize);
            paint(ri, &scene.patterns[point], r, right.c.round() as isize);
        }
    }

    kept.sort_by_key(|k| k.0);
    let keypoints = kept
        .into_iter()
        .map(|(point, depth, mut left, mut right)| {
            let outlier = spec.outlier_fraction > 0.0 && rng.bool(spec.outlier_fraction);
            if outlier {
                let shift = rng.uniform(20.0, 60.0) * if rng.bool(0.5) { 1.0 } else { -1.0 };
                left.c = clamp(left.c + shift, w);
                right.c = clamp(right.c + shift, w);
            }
            if opts.quantize {
                left = ImagePoint::new(left.r.round(), left.c.round());
                right = ImagePoint::new(right.r.round(), right.c.round());
            }
            RenderedKeypoint { point, left, right, depth, outlier }
        })
        .collect();
    RenderedFrame { keypoints, left: left_img, right: right_img }
}

/// Writes a KITTI-layout sequence: `sequences/<id>/{image_0,image_1}/NNNNNN.pgm`,
/// `calib.txt`, `times.txt` and `poses/<id>.txt`.
pub fn write_dataset(scene: &Scene, spec: &SceneSpec, root: &Path, sequence: &str) -> std::io::Result<()> {
    let seq = root.join("sequences").join(sequence);
    std::fs::create_dir_all(seq.join("image_0"))?;
    std::fs::create_dir_all(seq.join("image_1"))?;
    std::fs::create_dir_all(root.join("poses"))?;
    for (k, pose) in scene.poses.iter().enumerate() {
        let frame = render_frame(scene, pose, spec, k, RenderOptions { quantize: true, images: true });
        let name = format!("{k:06}.pgm");
        write_pgm(frame.left.as_ref().expect("images requested"), &seq.join("image_0").join(&name))?;
        write_pgm(frame.right.as_ref().expect("images requested"), &seq.join("image_1").join(&name))?;
    }
    let rig = &spec.rig;
    let row = |tx: f64| {
        format!("{:e} 0 {:e} {:e} 0 {:e} {:e} 0 0 0 1 0", rig.left.fx, rig.left.cx, tx, rig.left.fy, rig.left.cy)
    };
    std::fs::write(seq.join("calib.txt"), format!("P0: {}\nP1: {}\n", row(0.0), row(-rig.baseline)))?;
    let mut times = String::new();
    for t in &scene.timestamps {
        let _ = writeln!(times, "{t:e}");
    }
    std::fs::write(seq.join("times.txt"), times)?;
    write_trajectory(&scene.poses, &root.join("poses").join(format!("{sequence}.txt")))
}
