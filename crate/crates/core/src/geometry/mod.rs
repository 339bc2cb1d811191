//! Rigid-body math, the pinhole stereo model, triangulation and the stereo reprojection
//! Jacobian.

mod camera;
mod se3;

pub use camera::{stereo_jacobian, Camera, ImagePoint, Projection, StereoRig};
pub use se3::{
    adjoint, orthonormality_error, renormalized, rotation_angle, rotation_part, se3_exp, se3_log, skew,
    so3_log, translation_part, v2t, Isometry3, Twist,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("disparity {disparity} below one pixel: point at infinity")]
    PointAtInfinity { disparity: f64 },
    #[error("stereo rows differ ({left} vs {right})")]
    RowMismatch { left: f64, right: f64 },
    #[error("logarithm at cut locus (rotation angle {angle})")]
    CutLocus { angle: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("calibration is not rectified: focal lengths or principal points differ")]
    NotRectified,
}
