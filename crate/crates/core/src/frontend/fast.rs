//! FAST-9 segment-test detector with arc-sum response and 3x3 non-maximum suppression.

use crate::gray::GrayImage;
use crate::map::KeypointWD;

/// Bresenham circle of radius 3, clockwise from the top, as (row, col) offsets.
pub const CIRCLE: [(isize, isize); 16] = [
    (-3, 0),
    (-3, 1),
    (-2, 2),
    (-1, 3),
    (0, 3),
    (1, 3),
    (2, 2),
    (3, 1),
    (3, 0),
    (3, -1),
    (2, -2),
    (1, -3),
    (0, -3),
    (-1, -3),
    (-2, -2),
    (-3, -1),
];

pub const ARC_LENGTH: usize = 9;
pub const BORDER: usize = 3;

/// Segment-test response at `(r, c)`: the summed absolute difference along the qualifying
/// arc, or `None` when no arc of [`ARC_LENGTH`] contiguous pixels passes.
#[inline]
fn segment_response(image: &GrayImage, offsets: &[isize; 16], index: usize, threshold: i32) -> Option<u32> {
    let data = image.as_raw();
    let center = data[index] as i32;
    let at = |k: usize| data[(index as isize + offsets[k]) as usize] as i32;

    let mut bright = 0;
    let mut dark = 0;
    for k in [0, 4, 8, 12] {
        let v = at(k);
        bright += (v > center + threshold) as u32;
        dark += (v < center - threshold) as u32;
    }
    if bright < 2 && dark < 2 {
        return None;
    }

    let mut diffs = [0i32; 16];
    for (k, d) in diffs.iter_mut().enumerate() {
        *d = at(k) - center;
    }
    if bright >= 2 {
        if let Some(r) = arc_sum(&diffs, |d| d > threshold) {
            return Some(r);
        }
    }
    if dark >= 2 {
        if let Some(r) = arc_sum(&diffs, |d| d < -threshold) {
            return Some(r);
        }
    }
    None
}

/// Sum of |diff| over the longest circular run satisfying `pass`, if it reaches the arc length.
#[inline]
fn arc_sum(diffs: &[i32; 16], pass: impl Fn(i32) -> bool) -> Option<u32> {
    let flags: [bool; 16] = std::array::from_fn(|k| pass(diffs[k]));
    if flags.iter().all(|&f| f) {
        return Some(diffs.iter().map(|d| d.unsigned_abs()).sum());
    }
    // Start scanning right after a failing position so runs never straddle the seam.
    let start = flags.iter().position(|&f| !f)? + 1;
    let (mut run, mut sum) = (0usize, 0u32);
    let (mut best_run, mut best_sum) = (0usize, 0u32);
    for step in 0..16 {
        let k = (start + step) % 16;
        if flags[k] {
            run += 1;
            sum += diffs[k].unsigned_abs();
            if run > best_run {
                best_run = run;
                best_sum = sum;
            }
        } else {
            run = 0;
            sum = 0;
        }
    }
    (best_run >= ARC_LENGTH).then_some(best_sum)
}

/// Runs the segment test on every pixel at least [`BORDER`] pixels inside the image and
/// keeps 3x3 local maxima of the response (ties go to the earlier pixel in raster order).
pub fn detect_fast(image: &GrayImage, threshold: u8) -> Vec<KeypointWD> {
    let (w, h) = (image.width(), image.height());
    if w < 2 * BORDER + 1 || h < 2 * BORDER + 1 {
        return Vec::new();
    }
    let offsets: [isize; 16] = CIRCLE.map(|(dr, dc)| dr * w as isize + dc);
    let threshold = threshold as i32;

    let mut response = vec![0u32; w * h];
    let mut candidates = Vec::new();
    for r in BORDER..h - BORDER {
        for c in BORDER..w - BORDER {
            let index = r * w + c;
            if let Some(score) = segment_response(image, &offsets, index, threshold) {
                // Responses are at least 9 * (threshold + 1) > 0, so zero marks "no corner".
                response[index] = score;
                candidates.push(index);
            }
        }
    }

    candidates
        .into_iter()
        .filter(|&index| {
            let score = response[index];
            let neighbors = [
                index - w - 1,
                index - w,
                index - w + 1,
                index - 1,
                index + 1,
                index + w - 1,
                index + w,
                index + w + 1,
            ];
            neighbors.iter().all(|&n| {
                let other = response[n];
                other < score || (other == score && n > index)
            })
        })
        .map(|index| KeypointWD::new((index / w) as f64, (index % w) as f64, response[index] as f64))
        .collect()
}
