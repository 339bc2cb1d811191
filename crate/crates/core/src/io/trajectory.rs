//! KITTI pose files: one row-major 3x4 `T_c2w` per line.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Translation3, Vector3};

use super::LoadError;
use crate::geometry::Isometry3;

pub fn format_pose(t: &Isometry3) -> String {
    let m = t.to_homogeneous();
    let mut fields = Vec::with_capacity(12);
    for r in 0..3 {
        for c in 0..4 {
            // `{:?}` prints the shortest string that reads back to the same f64.
            let v = m[(r, c)];
            fields.push(if v == 0.0 { "0".to_string() } else if v.fract() == 0.0 && v.abs() < 1e15 { format!("{}", v as i64) } else { format!("{v:?}") });
        }
    }
    fields.join(" ")
}

pub fn parse_pose_line(line: &str) -> Result<Isometry3, String> {
    let v: Vec<f64> = line.split_whitespace().map(|s| s.parse::<f64>().map_err(|_| format!("bad number {s:?}"))).collect::<Result<_, _>>()?;
    if v.len() != 12 {
        return Err(format!("expected 12 values, found {}", v.len()));
    }
    let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let t = Vector3::new(v[3], v[7], v[11]);
    Ok(Isometry3::from_parts(Translation3::from(t), Rotation3::from_matrix_unchecked(r)))
}

pub fn write_trajectory(poses: &[Isometry3], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in poses {
        writeln!(f, "{}", format_pose(p))?;
    }
    f.flush()
}

pub fn read_trajectory(path: &Path) -> Result<Vec<Isometry3>, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|e| LoadError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_pose_line(l).map_err(|m| LoadError::Format { path: path.to_path_buf(), message: format!("line {}: {m}", i + 1) })
        })
        .collect()
}
