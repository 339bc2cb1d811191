//! KITTI odometry layout: `sequences/<id>/{image_0,image_1,calib.txt,times.txt}` and an
//! optional `poses/<id>.txt`.

use std::path::{Path, PathBuf};

use nalgebra::Matrix3x4;

use super::{read_pgm, read_trajectory, LoadError};
use crate::geometry::{GeometryError, Isometry3, StereoRig};
use crate::gray::GrayImage;

#[derive(Clone, Debug)]
pub struct SequenceManifest {
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub timestamps: Vec<f64>,
    pub rig: StereoRig,
    pub ground_truth: Option<Vec<Isometry3>>,
}

impl SequenceManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load_pair(&self, index: usize) -> Result<(GrayImage, GrayImage), LoadError> {
        let (l, r) = &self.pairs[index];
        Ok((load_image(l)?, load_image(r)?))
    }
}

/// Reads a grayscale image by extension: `.pgm` natively, `.png` through the `image` crate.
pub fn load_image(path: &Path) -> Result<GrayImage, LoadError> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") => read_pgm(path),
        Some("png") => {
            let img = image::open(path).map_err(|e| match e {
                image::ImageError::IoError(io) => LoadError::io(path, io),
                other => LoadError::Format { path: path.to_path_buf(), message: other.to_string() },
            })?;
            let gray = img.into_luma8();
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            Ok(GrayImage::from_raw(w, h, gray.into_raw()).expect("decoder returns a full raster"))
        }
        _ => Err(LoadError::Format { path: path.to_path_buf(), message: "unsupported image format".into() }),
    }
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("pgm" | "png"))
}

fn read_text(path: &Path) -> Result<String, LoadError> {
    std::fs::read_to_string(path).map_err(|e| LoadError::io(path, e))
}

/// `P0`/`P1` rows of `calib.txt` as 3x4 projection matrices.
pub fn parse_calibration(text: &str, path: &Path) -> Result<(Matrix3x4<f64>, Matrix3x4<f64>), LoadError> {
    let fmt = |message: String| LoadError::Format { path: path.to_path_buf(), message };
    let find = |key: &str| -> Result<Matrix3x4<f64>, LoadError> {
        let line = text
            .lines()
            .find_map(|l| l.trim().strip_prefix(key).and_then(|rest| rest.strip_prefix(':')))
            .ok_or_else(|| fmt(format!("no {key} entry")))?;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| fmt(format!("bad number {v:?} in {key}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != 12 {
            return Err(fmt(format!("{key} has {} values, expected 12", values.len())));
        }
        Ok(Matrix3x4::from_row_slice(&values))
    };
    Ok((find("P0")?, find("P1")?))
}

fn sequence_dir(root: &Path, sequence: &str) -> PathBuf {
    let nested = root.join("sequences").join(sequence);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

pub fn load_kitti_sequence(root: &Path, sequence: &str) -> Result<SequenceManifest, LoadError> {
    let dir = sequence_dir(root, sequence);
    let left_dir = dir.join("image_0");
    let right_dir = dir.join("image_1");
    for (what, d) in [("left image directory", &left_dir), ("right image directory", &right_dir)] {
        if !d.is_dir() {
            return Err(LoadError::Missing { what: what.into(), path: d.clone() });
        }
    }
    let mut left: Vec<PathBuf> = std::fs::read_dir(&left_dir)
        .map_err(|e| LoadError::io(&left_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    left.sort();
    if left.is_empty() {
        return Err(LoadError::Missing { what: "left images".into(), path: left_dir });
    }
    let mut pairs = Vec::with_capacity(left.len());
    for (i, l) in left.into_iter().enumerate() {
        let r = right_dir.join(l.file_name().expect("listed files have names"));
        if !r.is_file() {
            return Err(LoadError::Missing { what: format!("right image for frame {i}"), path: r });
        }
        pairs.push((l, r));
    }

    let times_path = dir.join("times.txt");
    let timestamps: Vec<f64> = read_text(&times_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim().parse::<f64>().map_err(|_| LoadError::Format { path: times_path.clone(), message: format!("bad timestamp {l:?}") })
        })
        .collect::<Result<_, _>>()?;
    if timestamps.len() != pairs.len() {
        return Err(LoadError::Inconsistent(format!(
            "{} lists {} timestamps for {} image pairs",
            times_path.display(),
            timestamps.len(),
            pairs.len()
        )));
    }
    if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
        return Err(LoadError::Inconsistent(format!("timestamps not increasing at frame {}", i + 1)));
    }

    let calib_path = dir.join("calib.txt");
    let (p0, p1) = parse_calibration(&read_text(&calib_path)?, &calib_path)?;
    let first = load_image(&pairs[0].0)?;
    let rig = StereoRig::from_projections(&p0, &p1, first.width(), first.height()).map_err(|e| match e {
        GeometryError::NotRectified => LoadError::NotRectified(format!("{}: P0 and P1 intrinsics differ", calib_path.display())),
        other => LoadError::Format { path: calib_path.clone(), message: other.to_string() },
    })?;

    let candidates = [root.join("poses").join(format!("{sequence}.txt")), dir.join("poses.txt")];
    let ground_truth = match candidates.iter().find(|p| p.is_file()) {
        Some(p) => {
            let poses = read_trajectory(p)?;
            if poses.len() != pairs.len() {
                return Err(LoadError::Inconsistent(format!(
                    "{} has {} poses for {} frames",
                    p.display(),
                    poses.len(),
                    pairs.len()
                )));
            }
            Some(poses)
        }
        None => None,
    };
    Ok(SequenceManifest { pairs, timestamps, rig, ground_truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_pgm, write_trajectory};

    const CALIB: &str = "P0: 700 0 20 0 0 700 15 0 0 0 1 0\nP1: 700 0 20 -350 0 700 15 0 0 0 1 0\n";

    fn fixture(dir: &Path, frames: usize) {
        let seq = dir.join("sequences").join("00");
        std::fs::create_dir_all(seq.join("image_0")).unwrap();
        std::fs::create_dir_all(seq.join("image_1")).unwrap();
        let img = GrayImage::filled(40, 30, 9);
        for i in 0..frames {
            write_pgm(&img, &seq.join("image_0").join(format!("{i:06}.pgm"))).unwrap();
            write_pgm(&img, &seq.join("image_1").join(format!("{i:06}.pgm"))).unwrap();
        }
        std::fs::write(seq.join("calib.txt"), CALIB).unwrap();
        let times: String = (0..frames).map(|i| format!("{:e}\n", i as f64 * 0.1)).collect();
        std::fs::write(seq.join("times.txt"), times).unwrap();
        std::fs::create_dir_all(dir.join("poses")).unwrap();
        let poses: Vec<_> = (0..frames).map(|i| Isometry3::translation(0.0, 0.0, i as f64)).collect();
        write_trajectory(&poses, &dir.join("poses").join("00.txt")).unwrap();
    }

    #[test]
    fn loads_well_formed_fixture() {
        let tmp = tempfile::tempdir().unwrap();
        fixture(tmp.path(), 5);
        let m = load_kitti_sequence(tmp.path(), "00").unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.rig.baseline, 350.0);
        assert_eq!((m.rig.width(), m.rig.height()), (40, 30));
        assert_eq!(m.rig.left.fx, 700.0);
        assert_eq!(m.ground_truth.as_ref().unwrap().len(), 5);
        let (l, _) = m.load_pair(3).unwrap();
        assert_eq!(l.get(0, 0), 9);
    }

    #[test]
    fn missing_right_image_names_index() {
        let tmp = tempfile::tempdir().unwrap();
        fixture(tmp.path(), 5);
        std::fs::remove_file(tmp.path().join("sequences/00/image_1/000002.pgm")).unwrap();
        let err = load_kitti_sequence(tmp.path(), "00").unwrap_err().to_string();
        assert!(err.contains("frame 2"), "{err}");
    }

    #[test]
    fn short_times_file_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        fixture(tmp.path(), 5);
        std::fs::write(tmp.path().join("sequences/00/times.txt"), "0\n0.1\n").unwrap();
        assert!(matches!(load_kitti_sequence(tmp.path(), "00"), Err(LoadError::Inconsistent(_))));
    }

    #[test]
    fn unrectified_calibration_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        fixture(tmp.path(), 2);
        std::fs::write(
            tmp.path().join("sequences/00/calib.txt"),
            "P0: 700 0 20 0 0 700 15 0 0 0 1 0\nP1: 710 0 20 -350 0 710 15 0 0 0 1 0\n",
        )
        .unwrap();
        assert!(matches!(load_kitti_sequence(tmp.path(), "00"), Err(LoadError::NotRectified(_))));
    }

    #[test]
    fn missing_directory() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load_kitti_sequence(tmp.path(), "07"), Err(LoadError::Missing { .. })));
    }
}
