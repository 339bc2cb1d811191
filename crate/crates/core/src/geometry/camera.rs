use nalgebra::{Matrix2x3, Matrix3x4, Matrix4x6, Vector3, Vector4};

use super::se3::skew;
use super::GeometryError;

/// Sub-pixel image location, row first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagePoint {
    pub r: f64,
    pub c: f64,
}

impl ImagePoint {
    pub fn new(r: f64, c: f64) -> Self {
        Self { r, c }
    }
}

/// Result of projecting a camera-frame point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub point: ImagePoint,
    pub in_view: bool,
}

/// Pinhole camera of a rectified rig.
///
/// `tx` is the `P[0,3]` entry of the projection matrix: zero for the left camera and `-B`
/// for the right one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub tx: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        tx: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let valid = fx > 0.0
            && fy > 0.0
            && (0.0..width as f64).contains(&cx)
            && (0.0..height as f64).contains(&cy)
            && tx.is_finite();
        if !valid {
            return Err(GeometryError::InvalidCamera(format!(
                "fx={fx} fy={fy} cx={cx} cy={cy} for a {width}x{height} image"
            )));
        }
        Ok(Self { fx, fy, cx, cy, tx, width, height })
    }

    #[rustfmt::skip]
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        Matrix3x4::new(
            self.fx, 0.0,     self.cx, self.tx,
            0.0,     self.fy, self.cy, 0.0,
            0.0,     0.0,     1.0,     0.0,
        )
    }

    pub fn contains(&self, p: &ImagePoint) -> bool {
        p.r >= 0.0 && p.c >= 0.0 && p.r < self.height as f64 && p.c < self.width as f64
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project(&self, p_c: &Vector3<f64>) -> Result<Projection, GeometryError> {
        if p_c.z <= 0.0 {
            return Err(GeometryError::BehindCamera { depth: p_c.z });
        }
        let c = (self.fx * p_c.x + self.tx) / p_c.z + self.cx;
        let r = self.fy * p_c.y / p_c.z + self.cy;
        let point = ImagePoint::new(r, c);
        Ok(Projection { point, in_view: self.contains(&point) })
    }
}

/// Rectified stereo pair. `baseline` is `fx` times the metric baseline (pixels x meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoRig {
    pub left: Camera,
    pub right: Camera,
    pub baseline: f64,
}

impl StereoRig {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        baseline: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(baseline > 0.0) {
            return Err(GeometryError::InvalidCamera(format!("baseline term {baseline} must be positive")));
        }
        let left = Camera::new(fx, fy, cx, cy, 0.0, width, height)?;
        let right = Camera::new(fx, fy, cx, cy, -baseline, width, height)?;
        Ok(Self { left, right, baseline })
    }

    /// Builds a rig from the two 3x4 projection matrices of a rectified pair.
    pub fn from_projections(
        p_left: &Matrix3x4<f64>,
        p_right: &Matrix3x4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
        let rectified = close(p_left[(0, 0)], p_right[(0, 0)])
            && close(p_left[(1, 1)], p_right[(1, 1)])
            && close(p_left[(1, 2)], p_right[(1, 2)])
            && close(p_left[(0, 2)], p_right[(0, 2)]);
        if !rectified {
            return Err(GeometryError::NotRectified);
        }
        // Some calibrations carry a nonzero left offset; the baseline is the difference.
        let baseline = p_left[(0, 3)] - p_right[(0, 3)];
        Self::new(
            p_left[(0, 0)],
            p_left[(1, 1)],
            p_left[(0, 2)],
            p_left[(1, 2)],
            baseline,
            width,
            height,
        )
    }

    pub fn width(&self) -> usize {
        self.left.width
    }

    pub fn height(&self) -> usize {
        self.left.height
    }

    /// Depth and camera coordinates of a rectified stereo measurement.
    pub fn triangulate(&self, left: ImagePoint, right: ImagePoint) -> Result<Vector3<f64>, GeometryError> {
        if (left.r - right.r).abs() > 1e-6 {
            return Err(GeometryError::RowMismatch { left: left.r, right: right.r });
        }
        let disparity = left.c - right.c;
        if !(disparity >= 1.0) {
            return Err(GeometryError::PointAtInfinity { disparity });
        }
        let z = self.baseline / disparity;
        let cam = &self.left;
        Ok(Vector3::new(z / cam.fx * (left.c - cam.cx), z / cam.fy * (left.r - cam.cy), z))
    }

    /// Stacked left/right projection `(c_L, r_L, c_R, r_R)` of a camera-frame point.
    pub fn project_stereo(&self, p_c: &Vector3<f64>) -> Result<Vector4<f64>, GeometryError> {
        let l = self.left.project(p_c)?.point;
        let r = self.right.project(p_c)?.point;
        Ok(Vector4::new(l.c, l.r, r.c, r.r))
    }
}

/// Jacobian of [`StereoRig::project_stereo`] with respect to a [`super::v2t`] increment
/// applied on the left of the world-to-camera transform. Rows are ordered
/// `(c_L, r_L, c_R, r_R)`, columns `(translation, rotation)`.
pub fn stereo_jacobian(p_c: &Vector3<f64>, rig: &StereoRig) -> Result<Matrix4x6<f64>, GeometryError> {
    let homogeneous = p_c.push(1.0);
    let mut j_t = nalgebra::Matrix4x6::<f64>::zeros();
    j_t.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    j_t.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-2.0 * skew(p_c)));

    let mut j = Matrix4x6::zeros();
    for (row, cam) in [(0, &rig.left), (2, &rig.right)] {
        let projection = cam.projection_matrix();
        let abc = projection * homogeneous;
        let (a, b, c) = (abc.x, abc.y, abc.z);
        if c <= 0.0 {
            return Err(GeometryError::BehindCamera { depth: c });
        }
        let j_div = Matrix2x3::new(1.0 / c, 0.0, -a / (c * c), 0.0, 1.0 / c, -b / (c * c));
        j.fixed_view_mut::<2, 6>(row, 0).copy_from(&(j_div * projection * j_t));
    }
    Ok(j)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kitti_like() -> StereoRig {
        StereoRig::new(700.0, 700.0, 600.0, 180.0, 386.0, 1241, 376).unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let rig = kitti_like();
        for z in [0.5, 3.0, 80.0] {
            let p = rig.left.project(&Vector3::new(0.0, 0.0, z)).unwrap();
            assert_eq!(p.point, ImagePoint::new(180.0, 600.0));
            assert!(p.in_view);
        }
    }

    #[test]
    fn pinhole_arithmetic() {
        let rig = kitti_like();
        let p = rig.left.project(&Vector3::new(1.0, 0.0, 10.0)).unwrap();
        assert_eq!(p.point.c, 670.0);
    }

    #[test]
    fn projection_rejects_points_behind() {
        let rig = kitti_like();
        assert!(matches!(
            rig.left.project(&Vector3::new(0.0, 0.0, 0.0)),
            Err(GeometryError::BehindCamera { .. })
        ));
        let far_left = rig.left.project(&Vector3::new(-100.0, 0.0, 1.0)).unwrap();
        assert!(!far_left.in_view);
    }

    #[test]
    fn triangulation_arithmetic() {
        let rig = StereoRig::new(700.0, 700.0, 30.0, 20.0, 100.0, 64, 48).unwrap();
        let p = rig.triangulate(ImagePoint::new(5.0, 50.0), ImagePoint::new(5.0, 40.0)).unwrap();
        assert_eq!(p.z, 10.0);

        let rig = kitti_like();
        let p = rig.triangulate(ImagePoint::new(180.0, 600.0), ImagePoint::new(180.0, 590.0)).unwrap();
        assert!((p - Vector3::new(0.0, 0.0, 38.6)).abs().max() < 1e-12);
    }

    #[test]
    fn triangulation_rejects_small_disparity() {
        let rig = kitti_like();
        let err = rig.triangulate(ImagePoint::new(10.0, 100.0), ImagePoint::new(10.0, 99.5));
        assert!(matches!(err, Err(GeometryError::PointAtInfinity { .. })));
        let err = rig.triangulate(ImagePoint::new(10.0, 100.0), ImagePoint::new(11.0, 90.0));
        assert!(matches!(err, Err(GeometryError::RowMismatch { .. })));
    }

    #[test]
    fn right_camera_shifts_by_disparity() {
        let rig = kitti_like();
        let p = Vector3::new(0.7, -0.3, 12.0);
        let l = rig.left.project(&p).unwrap().point;
        let r = rig.right.project(&p).unwrap().point;
        assert_eq!(l.r, r.r);
        assert!((l.c - r.c - rig.baseline / 12.0).abs() < 1e-12);
    }

    #[test]
    fn rig_from_projection_rows() {
        let p0 = Matrix3x4::new(700.0, 0.0, 600.0, 0.0, 0.0, 700.0, 180.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let mut p1 = p0;
        p1[(0, 3)] = -386.0;
        let rig = StereoRig::from_projections(&p0, &p1, 1241, 376).unwrap();
        assert_eq!(rig.baseline, 386.0);
        p1[(0, 0)] = 701.0;
        assert!(matches!(
            StereoRig::from_projections(&p0, &p1, 1241, 376),
            Err(GeometryError::NotRectified)
        ));
    }

    #[test]
    fn camera_invariants_enforced() {
        assert!(Camera::new(0.0, 1.0, 1.0, 1.0, 0.0, 10, 10).is_err());
        assert!(Camera::new(1.0, 1.0, 10.0, 1.0, 0.0, 10, 10).is_err());
        assert!(StereoRig::new(1.0, 1.0, 1.0, 1.0, 0.0, 10, 10).is_err());
    }

    #[test]
    fn jacobian_on_axis_translation_entry() {
        let rig = kitti_like();
        let z = 8.0;
        let j = stereo_jacobian(&Vector3::new(0.0, 0.0, z), &rig).unwrap();
        assert!((j[(0, 0)] - rig.left.fx / z).abs() < 1e-12);
        assert!((j[(1, 1)] - rig.left.fy / z).abs() < 1e-12);
    }

    #[test]
    fn jacobian_translation_block_scales_inversely_with_depth() {
        let rig = kitti_like();
        let near = stereo_jacobian(&Vector3::new(0.0, 0.0, 5.0), &rig).unwrap();
        let far = stereo_jacobian(&Vector3::new(0.0, 0.0, 10.0), &rig).unwrap();
        for row in 0..4 {
            for col in 0..2 {
                assert!((near[(row, col)] - 2.0 * far[(row, col)]).abs() < 1e-12);
            }
        }
    }
}
