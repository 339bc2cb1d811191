//! Keypoint detection, adaptive thresholding, grid regularization and binary descriptors.

mod brief;
mod descriptor;
mod fast;

pub use brief::{extract_brief, generate_pattern, BriefExtractor, Unextractable, BRIEF_BORDER, PATTERN, PATTERN_SEED};
pub use descriptor::{hamming_distance, Descriptor};
pub use fast::detect_fast;

use crate::map::KeypointWD;

/// Runtime state of the self-tuning FAST threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorState {
    pub threshold: u8,
    pub target_count: usize,
    /// Tolerated relative deviation from `target_count` before the threshold moves.
    pub band: f64,
    pub min_threshold: u8,
    pub max_threshold: u8,
}

impl Default for DetectorState {
    fn default() -> Self {
        Self { threshold: 20, target_count: 700, band: 0.2, min_threshold: 5, max_threshold: 100 }
    }
}

const THRESHOLD_STEP: u8 = 2;

impl DetectorState {
    /// Raises the threshold when too many keypoints were found, lowers it when too few.
    pub fn adapt(self, detected: usize) -> Self {
        let target = self.target_count as f64;
        let detected = detected as f64;
        let threshold = if detected > target * (1.0 + self.band) {
            self.threshold.saturating_add(THRESHOLD_STEP)
        } else if detected < target * (1.0 - self.band) {
            self.threshold.saturating_sub(THRESHOLD_STEP)
        } else {
            self.threshold
        };
        Self { threshold: threshold.clamp(self.min_threshold, self.max_threshold), ..self }
    }
}

/// Keeps the strongest keypoint of every `bin_size` square cell. Ties go to the smaller
/// `(r, c)`. The result is sorted by `(r, c)`.
pub fn regularize_grid(keypoints: &[KeypointWD], bin_size: usize, width: usize, height: usize) -> Vec<KeypointWD> {
    assert!(bin_size >= 1, "bin size must be positive");
    let cols = width.div_ceil(bin_size);
    let rows = height.div_ceil(bin_size);
    let mut best: Vec<Option<KeypointWD>> = vec![None; cols * rows];
    for kp in keypoints {
        let cell = (kp.r as usize / bin_size).min(rows - 1) * cols + (kp.c as usize / bin_size).min(cols - 1);
        let slot = &mut best[cell];
        let better = match slot {
            None => true,
            Some(cur) => {
                kp.response > cur.response
                    || (kp.response == cur.response && (kp.r, kp.c) < (cur.r, cur.c))
            }
        };
        if better {
            *slot = Some(*kp);
        }
    }
    let mut out: Vec<KeypointWD> = best.into_iter().flatten().collect();
    out.sort_by(|a, b| a.r.total_cmp(&b.r).then(a.c.total_cmp(&b.c)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn threshold_rises_when_flooded() {
        let s = DetectorState::default();
        assert!(s.adapt(1400).threshold > s.threshold);
        assert!(s.adapt(100).threshold < s.threshold);
        assert_eq!(s.adapt(700).threshold, s.threshold);
        assert_eq!(s.adapt(800).threshold, s.threshold);
    }

    #[test]
    fn threshold_clamps() {
        let top = DetectorState { threshold: 100, ..Default::default() };
        assert_eq!(top.adapt(1400).threshold, 100);
        let bottom = DetectorState { threshold: 5, ..Default::default() };
        assert_eq!(bottom.adapt(0).threshold, 5);
        let odd = DetectorState { threshold: 99, ..Default::default() };
        assert_eq!(odd.adapt(5000).threshold, 100);
    }

    proptest! {
        #[test]
        fn adapt_is_monotone_in_count(t in 5u8..=100, a in 0usize..3000, b in 0usize..3000) {
            let s = DetectorState { threshold: t, ..Default::default() };
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(s.adapt(hi).threshold >= s.adapt(lo).threshold);
            let next = s.adapt(hi).threshold;
            prop_assert!((5..=100).contains(&next));
        }
    }

    #[test]
    fn keeps_strongest_per_bin() {
        let kps = [KeypointWD::new(1.0, 1.0, 5.0), KeypointWD::new(3.0, 4.0, 9.0)];
        let out = regularize_grid(&kps, 10, 100, 100);
        assert_eq!(out, vec![kps[1]]);
    }

    #[test]
    fn distinct_bins_pass_through() {
        let kps = [KeypointWD::new(1.0, 1.0, 5.0), KeypointWD::new(15.0, 4.0, 1.0), KeypointWD::new(1.0, 55.0, 2.0)];
        let mut expected = kps.to_vec();
        expected.sort_by(|a, b| a.r.total_cmp(&b.r).then(a.c.total_cmp(&b.c)));
        assert_eq!(regularize_grid(&kps, 10, 100, 100), expected);
    }

    #[test]
    fn ties_prefer_smallest_position() {
        let kps = [KeypointWD::new(5.0, 5.0, 3.0), KeypointWD::new(2.0, 8.0, 3.0), KeypointWD::new(2.0, 7.0, 3.0)];
        assert_eq!(regularize_grid(&kps, 10, 20, 20), vec![kps[2]]);
    }

    #[test]
    fn matches_per_cell_argmax_oracle() {
        let mut rng = SplitMix64::new(99);
        for _ in 0..50 {
            let (w, h, bin) = (100 + rng.below(50) as usize, 60 + rng.below(40) as usize, 1 + rng.below(30) as usize);
            let n = rng.below(200) as usize;
            let kps: Vec<_> = (0..n)
                .map(|_| {
                    KeypointWD::new(rng.below(h as u64) as f64, rng.below(w as u64) as f64, rng.below(6) as f64)
                })
                .collect();
            let out = regularize_grid(&kps, bin, w, h);

            let mut oracle = Vec::new();
            for cr in 0..h.div_ceil(bin) {
                for cc in 0..w.div_ceil(bin) {
                    let best = kps
                        .iter()
                        .filter(|k| k.r as usize / bin == cr && k.c as usize / bin == cc)
                        .max_by(|a, b| {
                            a.response.total_cmp(&b.response).then(b.r.total_cmp(&a.r)).then(b.c.total_cmp(&a.c))
                        });
                    oracle.extend(best.copied());
                }
            }
            oracle.sort_by(|a, b| a.r.total_cmp(&b.r).then(a.c.total_cmp(&b.c)));
            assert_eq!(out, oracle);
            assert!(out.len() <= w.div_ceil(bin) * h.div_ceil(bin));
            assert!(out.iter().all(|k| kps.contains(k)));
        }
    }
}
