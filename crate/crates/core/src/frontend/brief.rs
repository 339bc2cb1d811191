//! BRIEF-style 256-bit descriptors over a 31x31 patch of 5x5 box-smoothed intensities.

use super::descriptor::Descriptor;
use crate::gray::GrayImage;
use crate::rng::SplitMix64;

/// Minimum distance between a keypoint and every image border.
pub const BRIEF_BORDER: usize = 20;
const PATCH_HALF: i32 = 15;
const BOX_HALF: isize = 2;

/// Seed of the sampling pattern in [`PATTERN`].
pub const PATTERN_SEED: u64 = 0x42_5249_4546;

/// Test pairs `(ra, ca, rb, cb)`: bit `i` is set when the smoothed intensity at offset
/// `a` is below the one at `b`. Drawn from an isotropic Gaussian with sigma 31/5, rounded
/// and clipped to the patch; see [`generate_pattern`].
#[rustfmt::skip]
pub const PATTERN: [[i8; 4]; 256] = include!("brief_pattern.in");

/// Regenerates [`PATTERN`] from a seed. Pairs with coincident points are redrawn.
pub fn generate_pattern(seed: u64) -> [[i8; 4]; 256] {
    let mut rng = SplitMix64::new(seed);
    let sigma = 31.0 / 5.0;
    let draw = |rng: &mut SplitMix64| -> i8 {
        (rng.gaussian(sigma).round() as i32).clamp(-PATCH_HALF, PATCH_HALF) as i8
    };
    let mut out = [[0i8; 4]; 256];
    for pair in out.iter_mut() {
        loop {
            let p = [draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng)];
            if (p[0], p[1]) != (p[2], p[3]) {
                *pair = p;
                break;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("keypoint ({r}, {c}) is closer than {BRIEF_BORDER} px to the border")]
pub struct Unextractable {
    pub r: isize,
    pub c: isize,
}

fn check_border(width: usize, height: usize, r: isize, c: isize) -> Result<(usize, usize), Unextractable> {
    let b = BRIEF_BORDER as isize;
    if r < b || c < b || r + b >= height as isize || c + b >= width as isize {
        return Err(Unextractable { r, c });
    }
    Ok((r as usize, c as usize))
}

/// Descriptor at an integer pixel, summing the smoothing boxes directly.
pub fn extract_brief(image: &GrayImage, r: isize, c: isize) -> Result<Descriptor, Unextractable> {
    let (r, c) = check_border(image.width(), image.height(), r, c)?;
    let box_sum = |dr: i8, dc: i8| -> u32 {
        let (rr, cc) = (r as isize + dr as isize, c as isize + dc as isize);
        let mut sum = 0u32;
        for y in rr - BOX_HALF..=rr + BOX_HALF {
            for x in cc - BOX_HALF..=cc + BOX_HALF {
                sum += image.get(y as usize, x as usize) as u32;
            }
        }
        sum
    };
    let mut d = Descriptor::default();
    for (i, p) in PATTERN.iter().enumerate() {
        d.set_bit(i, box_sum(p[0], p[1]) < box_sum(p[2], p[3]));
    }
    Ok(d)
}

/// Descriptor extraction backed by an integral image, for many keypoints on one image.
pub struct BriefExtractor {
    width: usize,
    height: usize,
    /// `(width + 1) x (height + 1)` summed-area table.
    integral: Vec<u32>,
}

impl BriefExtractor {
    pub fn new(image: &GrayImage) -> Self {
        let (w, h) = (image.width(), image.height());
        let stride = w + 1;
        let mut integral = vec![0u32; stride * (h + 1)];
        for r in 0..h {
            let mut row_sum = 0u32;
            let row = image.row(r);
            for c in 0..w {
                row_sum += row[c] as u32;
                integral[(r + 1) * stride + c + 1] = integral[r * stride + c + 1] + row_sum;
            }
        }
        Self { width: w, height: h, integral }
    }

    #[inline]
    fn box_sum(&self, r: usize, c: usize) -> u32 {
        let stride = self.width + 1;
        let (top, left) = (r - 2, c - 2);
        let (bottom, right) = (r + 3, c + 3);
        self.integral[bottom * stride + right] + self.integral[top * stride + left]
            - self.integral[top * stride + right]
            - self.integral[bottom * stride + left]
    }

    pub fn extract(&self, r: isize, c: isize) -> Result<Descriptor, Unextractable> {
        let (r, c) = check_border(self.width, self.height, r, c)?;
        let mut words = [0u64; 4];
        for (i, p) in PATTERN.iter().enumerate() {
            let a = self.box_sum((r as isize + p[0] as isize) as usize, (c as isize + p[1] as isize) as usize);
            let b = self.box_sum((r as isize + p[2] as isize) as usize, (c as isize + p[3] as isize) as usize);
            words[i / 64] |= ((a < b) as u64) << (i % 64);
        }
        Ok(Descriptor(words))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::hamming_distance;

    fn random_image(seed: u64, w: usize, h: usize) -> GrayImage {
        let mut rng = SplitMix64::new(seed);
        let data = (0..w * h).map(|_| rng.below(256) as u8).collect();
        GrayImage::from_raw(w, h, data).unwrap()
    }

    #[test]
    fn shipped_pattern_matches_generator() {
        assert_eq!(PATTERN, generate_pattern(PATTERN_SEED));
    }

    #[test]
    fn pattern_stays_inside_patch() {
        for p in PATTERN {
            assert!(p.iter().all(|&v| (-15..=15).contains(&v)));
            assert_ne!((p[0], p[1]), (p[2], p[3]));
        }
    }

    #[test]
    fn integral_and_direct_agree() {
        let img = random_image(5, 90, 70);
        let ex = BriefExtractor::new(&img);
        for r in 20..50 {
            for c in [20isize, 33, 69] {
                assert_eq!(ex.extract(r, c).unwrap(), extract_brief(&img, r, c).unwrap());
            }
        }
    }

    #[test]
    fn identical_patches_have_zero_distance() {
        let img = random_image(6, 80, 80);
        let mut shifted = GrayImage::new(80, 80);
        for r in 0..80 {
            for c in 0..70 {
                shifted.set(r, c + 10, img.get(r, c));
            }
        }
        let a = extract_brief(&img, 40, 30).unwrap();
        let b = extract_brief(&shifted, 40, 40).unwrap();
        assert_eq!(hamming_distance(&a, &b), 0);
    }

    #[test]
    fn far_pixels_do_not_matter() {
        let mut img = random_image(7, 100, 100);
        let before = extract_brief(&img, 30, 30).unwrap();
        img.set(30, 70, img.get(30, 70).wrapping_add(97));
        img.set(70, 70, img.get(70, 70).wrapping_add(13));
        assert_eq!(before, extract_brief(&img, 30, 30).unwrap());
        // Inside the support it can change.
        let mut touched = img.clone();
        for r in 25..36 {
            for c in 25..36 {
                touched.set(r, c, 255 - touched.get(r, c));
            }
        }
        assert_ne!(extract_brief(&img, 30, 30).unwrap(), extract_brief(&touched, 30, 30).unwrap());
    }

    #[test]
    fn negated_patch_flips_every_bit() {
        let img = random_image(8, 60, 60);
        let ex = BriefExtractor::new(&img);
        let (r, c) = (30usize, 30usize);
        let no_ties = PATTERN.iter().all(|p| {
            let a = ex.box_sum((r as isize + p[0] as isize) as usize, (c as isize + p[1] as isize) as usize);
            let b = ex.box_sum((r as isize + p[2] as isize) as usize, (c as isize + p[3] as isize) as usize);
            a != b
        });
        assert!(no_ties, "fixture must have distinct smoothed values at every test pair");
        let negated = GrayImage::from_raw(60, 60, img.as_raw().iter().map(|v| 255 - v).collect()).unwrap();
        let a = extract_brief(&img, 30, 30).unwrap();
        let b = extract_brief(&negated, 30, 30).unwrap();
        assert_eq!(hamming_distance(&a, &b), 256);
    }

    #[test]
    fn border_keypoints_are_rejected() {
        let img = random_image(9, 60, 60);
        assert!(extract_brief(&img, 19, 30).is_err());
        assert!(extract_brief(&img, 30, 40).is_err());
        assert!(extract_brief(&img, 20, 39).is_ok());
        assert!(BriefExtractor::new(&img).extract(-3, 30).is_err());
    }
}
