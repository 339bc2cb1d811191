//! Trajectory accuracy metrics and timing statistics.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3, SVD};

use crate::geometry::{rotation_angle, Isometry3};

pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentError {
    pub length: f64,
    /// Translation error in percent of the segment length.
    pub translation_percent: f64,
    /// Rotation error in degrees per 100 m.
    pub rotation_deg_per_100m: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("trajectories differ in length ({estimate} vs {truth})")]
    LengthMismatch { estimate: usize, truth: usize },
    #[error("need at least {needed} poses, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("alignment degenerate: points are collinear or coincident")]
    Degenerate,
}

/// Cumulative ground-truth path length at every frame.
pub fn path_distances(poses: &[Isometry3]) -> Vec<f64> {
    let mut d = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            acc += (p.translation.vector - poses[i - 1].translation.vector).norm();
        }
        d.push(acc);
    }
    d
}

/// Relative errors over windows starting at every frame, averaged per segment length.
/// Lengths with no complete window are omitted.
pub fn kitti_relative_errors(estimate: &[Isometry3], truth: &[Isometry3]) -> Result<Vec<SegmentError>, EvalError> {
    kitti_relative_errors_for(estimate, truth, &SEGMENT_LENGTHS)
}

pub fn kitti_relative_errors_for(estimate: &[Isometry3], truth: &[Isometry3], lengths: &[f64]) -> Result<Vec<SegmentError>, EvalError> {
    if estimate.len() != truth.len() {
        return Err(EvalError::LengthMismatch { estimate: estimate.len(), truth: truth.len() });
    }
    if truth.len() < 2 {
        return Err(EvalError::TooShort { needed: 2, got: truth.len() });
    }
    let dist = path_distances(truth);
    let mut out = Vec::new();
    for &length in lengths {
        let (mut t_sum, mut r_sum, mut n) = (0.0, 0.0, 0usize);
        for first in 0..truth.len() {
            let Some(last) = (first..truth.len()).find(|&j| dist[j] >= dist[first] + length) else { break };
            let gt_rel = truth[first].inverse() * truth[last];
            let est_rel = estimate[first].inverse() * estimate[last];
            let e = gt_rel.inverse() * est_rel;
            t_sum += e.translation.vector.norm() / length * 100.0;
            r_sum += rotation_angle(&e).to_degrees() / length * 100.0;
            n += 1;
        }
        if n > 0 {
            out.push(SegmentError {
                length,
                translation_percent: t_sum / n as f64,
                rotation_deg_per_100m: r_sum / n as f64,
                windows: n,
            });
        }
    }
    Ok(out)
}

/// Mean translation and rotation error over all segment lengths and windows.
pub fn average_relative_error(errors: &[SegmentError]) -> Option<(f64, f64)> {
    let n: usize = errors.iter().map(|e| e.windows).sum();
    (n > 0).then(|| {
        let t: f64 = errors.iter().map(|e| e.translation_percent * e.windows as f64).sum();
        let r: f64 = errors.iter().map(|e| e.rotation_deg_per_100m * e.windows as f64).sum();
        (t / n as f64, r / n as f64)
    })
}

/// Least-squares rigid transform (no scale) taking `from` onto `to`.
pub fn rigid_alignment(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Result<Isometry3, EvalError> {
    if from.len() < 3 {
        return Err(EvalError::TooShort { needed: 3, got: from.len() });
    }
    let n = from.len() as f64;
    let mu_a = from.iter().sum::<Vector3<f64>>() / n;
    let mu_b = to.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (a, b) in from.iter().zip(to) {
        cov += (b - mu_b) * (a - mu_a).transpose();
        spread += (a - mu_a) * (a - mu_a).transpose();
    }
    let ev = spread.symmetric_eigenvalues();
    let mut sorted = [ev[0], ev[1], ev[2]];
    sorted.sort_by(f64::total_cmp);
    if sorted[1] <= 1e-12 * sorted[2].max(1e-300) {
        return Err(EvalError::Degenerate);
    }
    let svd = SVD::new(cov, true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let t = mu_b - r * mu_a;
    Ok(Isometry3::from_parts(t.into(), nalgebra::Rotation3::from_matrix_unchecked(r)))
}

/// Root-mean-square position error, optionally after rigid alignment of the estimate.
pub fn ate_rmse(estimate: &[Isometry3], truth: &[Isometry3], align: bool) -> Result<f64, EvalError> {
    if estimate.len() != truth.len() {
        return Err(EvalError::LengthMismatch { estimate: estimate.len(), truth: truth.len() });
    }
    if estimate.len() < 3 {
        return Err(EvalError::TooShort { needed: 3, got: estimate.len() });
    }
    let a: Vec<Vector3<f64>> = estimate.iter().map(|p| p.translation.vector).collect();
    let b: Vec<Vector3<f64>> = truth.iter().map(|p| p.translation.vector).collect();
    let t = if align { rigid_alignment(&a, &b)? } else { Isometry3::identity() };
    let sum: f64 = a.iter().zip(&b).map(|(p, q)| (t * nalgebra::Point3::from(*p) - nalgebra::Point3::from(*q)).norm_squared()).sum();
    Ok((sum / a.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TimingStats {
    pub mean: f64,
    pub stddev: f64,
    pub max: f64,
}

pub fn timing_stats(durations: &[f64]) -> TimingStats {
    if durations.is_empty() {
        return TimingStats::default();
    }
    let n = durations.len() as f64;
    let mean = durations.iter().sum::<f64>() / n;
    let var = durations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    TimingStats { mean, stddev: var.sqrt(), max: durations.iter().copied().fold(0.0, f64::max) }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub segments: Vec<SegmentError>,
    pub ate_rmse: Option<f64>,
    pub timing: TimingStats,
    pub frames_processed: usize,
    pub local_maps: usize,
    pub closures_accepted: usize,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames processed   {}", self.frames_processed);
        let _ = writeln!(s, "local maps         {}", self.local_maps);
        let _ = writeln!(s, "closures accepted  {}", self.closures_accepted);
        let _ = writeln!(s, "frame time (s)     mean {:.4} stddev {:.4} max {:.4}", self.timing.mean, self.timing.stddev, self.timing.max);
        s + &self.accuracy_table()
    }

    /// ATE and the relative-error rows only.
    pub fn accuracy_table(&self) -> String {
        let mut s = String::new();
        if let Some(ate) = self.ate_rmse {
            let _ = writeln!(s, "ATE RMSE (m)       {ate:.4}");
        }
        if !self.segments.is_empty() {
            let _ = writeln!(s, "length(m)  trans(%)  rot(deg/100m)  windows");
            for e in &self.segments {
                let _ = writeln!(s, "{:>9}  {:>8.4}  {:>13.4}  {:>7}", e.length, e.translation_percent, e.rotation_deg_per_100m, e.windows);
            }
            if let Some((t, r)) = average_relative_error(&self.segments) {
                let _ = writeln!(s, "{:>9}  {t:>8.4}  {r:>13.4}", "average");
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,length,value\n");
        for e in &self.segments {
            let _ = writeln!(s, "translation_percent,{},{}", e.length, e.translation_percent);
            let _ = writeln!(s, "rotation_deg_per_100m,{},{}", e.length, e.rotation_deg_per_100m);
        }
        if let Some(a) = self.ate_rmse {
            let _ = writeln!(s, "ate_rmse,,{a}");
        }
        let _ = writeln!(s, "frame_time_mean,,{}", self.timing.mean);
        let _ = writeln!(s, "frame_time_stddev,,{}", self.timing.stddev);
        let _ = writeln!(s, "frames_processed,,{}", self.frames_processed);
        let _ = writeln!(s, "local_maps,,{}", self.local_maps);
        let _ = writeln!(s, "closures_accepted,,{}", self.closures_accepted);
        s
    }
}
