//! Stereo keypoint search along rectified epipolar lines and frame assembly.

use crate::frontend::{detect_fast, hamming_distance, regularize_grid, BriefExtractor, DetectorState};
use crate::geometry::{Isometry3, StereoRig};
use crate::gray::GrayImage;
use crate::map::{Frame, FrameId, Framepoint, KeypointWD};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangulationConfig {
    /// Matches need a Hamming distance strictly below this.
    pub max_distance: u32,
    /// Grid cell size for left-image regularization (pixels).
    pub bin_size: usize,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self { max_distance: 25, bin_size: 24 }
    }
}

fn row_major(a: &KeypointWD, b: &KeypointWD) -> std::cmp::Ordering {
    a.r.total_cmp(&b.r).then(a.c.total_cmp(&b.c))
}

/// Indices of `k` in stable row-major order. Image rows are bounded, so indices are
/// bucketed by integer row first and only each bucket is comparison-sorted.
fn row_major_order(k: &[KeypointWD]) -> Vec<u32> {
    let by_key = |a: &u32, b: &u32| row_major(&k[*a as usize], &k[*b as usize]);
    let span = k.iter().try_fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        p.r.is_finite().then(|| (lo.min(p.r.floor()), hi.max(p.r.floor())))
    });
    let (lo, buckets) = match span {
        Some((lo, hi)) if !k.is_empty() && hi - lo <= (4 * k.len() + 4096) as f64 => (lo, (hi - lo) as usize + 1),
        _ => {
            let mut order: Vec<u32> = (0..k.len() as u32).collect();
            order.sort_by(by_key);
            return order;
        }
    };
    let bucket = |p: &KeypointWD| (p.r.floor() - lo) as usize;
    let mut start = vec![0u32; buckets + 1];
    for p in k {
        start[bucket(p) + 1] += 1;
    }
    for i in 0..buckets {
        start[i + 1] += start[i];
    }
    let mut next = start.clone();
    let mut order = vec![0u32; k.len()];
    for (i, p) in k.iter().enumerate() {
        let b = bucket(p);
        order[next[b] as usize] = i as u32;
        next[b] += 1;
    }
    for w in start.windows(2) {
        if w[1] - w[0] > 1 {
            order[w[0] as usize..w[1] as usize].sort_by(by_key);
        }
    }
    order
}

/// Pairs left keypoints with right keypoints on the same row and a smaller column.
///
/// Both lists are visited in row-major order and scanned once. For each left keypoint the
/// right candidates from the current scan position up to its column are compared; the first
/// minimum-distance candidate below `max_distance` is taken and the scan position moves
/// past it, so pairs are one-to-one and column-monotone within a row.
pub fn match_stereo(left: &[KeypointWD], right: &[KeypointWD], max_distance: u32) -> Vec<(KeypointWD, KeypointWD)> {
    let order_r = row_major_order(right);
    let k_r = |i: usize| &right[order_r[i] as usize];

    let mut pairs = Vec::new();
    let mut idx_r = 0;
    for l in row_major_order(left) {
        let kl = &left[l as usize];
        while idx_r < order_r.len() && k_r(idx_r).r < kl.r {
            idx_r += 1;
        }
        if idx_r == order_r.len() {
            break;
        }
        if k_r(idx_r).r > kl.r {
            continue;
        }
        let mut best: Option<(usize, u32)> = None;
        let mut scan = idx_r;
        while scan < order_r.len() && k_r(scan).r == kl.r && k_r(scan).c < kl.c {
            let dist = hamming_distance(&kl.d, &k_r(scan).d);
            if dist < best.map_or(max_distance, |(_, d)| d) {
                best = Some((scan, dist));
            }
            scan += 1;
        }
        if let Some((found, _)) = best {
            pairs.push((*kl, *k_r(found)));
            idx_r = found + 1;
        }
    }
    pairs
}

/// Keypoints of one image with descriptors; those too close to the border are dropped.
pub fn describe(image: &GrayImage, keypoints: Vec<KeypointWD>) -> Vec<KeypointWD> {
    let extractor = BriefExtractor::new(image);
    keypoints
        .into_iter()
        .filter_map(|k| extractor.extract(k.r as isize, k.c as isize).ok().map(|d| k.with_descriptor(d)))
        .collect()
}

/// Output of [`build_frame`] besides the frame itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TriangulationStats {
    pub detected_left: usize,
    pub detected_right: usize,
    pub regularized_left: usize,
    pub stereo_pairs: usize,
}

/// Detect, regularize (left only), describe, match and triangulate one stereo pair into a
/// frame placed at `prior_c2w`. The detector threshold is adapted with the left detection
/// count before regularization.
pub fn build_frame(
    left: &GrayImage,
    right: &GrayImage,
    rig: &StereoRig,
    detector: &mut DetectorState,
    cfg: &TriangulationConfig,
    id: FrameId,
    prior_c2w: Isometry3,
    timestamp: f64,
) -> (Frame, TriangulationStats) {
    let raw_left = detect_fast(left, detector.threshold);
    let raw_right = detect_fast(right, detector.threshold);
    let detected_left = raw_left.len();
    let detected_right = raw_right.len();
    *detector = detector.adapt(detected_left);

    let regularized = regularize_grid(&raw_left, cfg.bin_size, left.width(), left.height());
    let regularized_left = regularized.len();
    let k_l = describe(left, regularized);
    let k_r = describe(right, raw_right);
    let pairs = match_stereo(&k_l, &k_r, cfg.max_distance);
    let stereo_pairs = pairs.len();

    let frame = frame_from_pairs(&pairs, rig, id, prior_c2w, timestamp);
    (frame, TriangulationStats { detected_left, detected_right, regularized_left, stereo_pairs })
}

/// Triangulates matched stereo pairs into a frame placed at `prior_c2w`. Pairs that do not
/// triangulate (non-positive disparity) are skipped.
pub fn frame_from_pairs(
    pairs: &[(KeypointWD, KeypointWD)],
    rig: &StereoRig,
    id: FrameId,
    prior_c2w: Isometry3,
    timestamp: f64,
) -> Frame {
    let mut frame = Frame::new(id, prior_c2w, timestamp);
    for (kl, kr) in pairs {
        if let Ok(p_c) = rig.triangulate(kl.point(), kr.point()) {
            frame.points.push(Framepoint::new(*kl, *kr, p_c, &prior_c2w));
        }
    }
    frame.degenerate = frame.points.is_empty();
    frame
}
