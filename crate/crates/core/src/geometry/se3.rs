//! Rigid-body transforms and their 6-D tangent parameterizations.
//!
//! Twists are ordered translation first, rotation last: `(vx, vy, vz, wx, wy, wz)`.

use nalgebra::{Matrix3, Quaternion, Rotation3, Translation3, UnitQuaternion, Vector3, Vector6};

use super::GeometryError;

/// Rigid transform with an explicit 3x3 rotation matrix.
pub type Isometry3 = nalgebra::IsometryMatrix3<f64>;

/// Minimal 6-D perturbation of an [`Isometry3`].
pub type Twist = Vector6<f64>;

const TAYLOR_THRESHOLD: f64 = 1e-8;
/// Below this angle the translational coupling coefficients use their power series.
const SERIES_THRESHOLD: f64 = 1e-2;

/// Rotation angle beyond which the logarithm is refused.
const CUT_LOCUS_MARGIN: f64 = 1e-6;

#[rustfmt::skip]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
         0.0, -v.z,  v.y,
         v.z,  0.0, -v.x,
        -v.y,  v.x,  0.0,
    )
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

pub fn translation_part(xi: &Twist) -> Vector3<f64> {
    xi.fixed_rows::<3>(0).into_owned()
}

pub fn rotation_part(xi: &Twist) -> Vector3<f64> {
    xi.fixed_rows::<3>(3).into_owned()
}

/// Exponential map from se(3) to SE(3) (Rodrigues rotation, left-Jacobian coupled translation).
pub fn se3_exp(xi: &Twist) -> Isometry3 {
    let v = translation_part(xi);
    let w = rotation_part(xi);
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let wx = skew(&w);
    let wx2 = wx * wx;

    let (a, b) = if theta < TAYLOR_THRESHOLD {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        let half = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * half * half / theta_sq)
    };
    // (θ - sin θ)/θ³ cancels badly for small θ; the series is exact to rounding there.
    let c = if theta < SERIES_THRESHOLD {
        1.0 / 6.0 - theta_sq / 120.0 + theta_sq * theta_sq / 5040.0
    } else {
        (theta - theta.sin()) / (theta_sq * theta)
    };
    let rotation = Matrix3::identity() + a * wx + b * wx2;
    let coupling = Matrix3::identity() + b * wx + c * wx2;
    Isometry3::from_parts(
        Translation3::from(coupling * v),
        Rotation3::from_matrix_unchecked(rotation),
    )
}

/// Rotation vector of `r` together with its angle.
pub fn so3_log(r: &Rotation3<f64>) -> (Vector3<f64>, f64) {
    let m = r.matrix();
    let axis_sin = vee(&(m - m.transpose())) * 0.5;
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = axis_sin.norm();
    let theta = sin.atan2(cos);
    let scale = if theta < TAYLOR_THRESHOLD {
        1.0 + theta * theta / 6.0
    } else {
        theta / sin
    };
    (axis_sin * scale, theta)
}

/// Rotation angle of a transform, in radians.
pub fn rotation_angle(t: &Isometry3) -> f64 {
    so3_log(&t.rotation).1
}

/// Logarithm map from SE(3) to se(3). Inverse of [`se3_exp`] away from the cut locus.
pub fn se3_log(t: &Isometry3) -> Result<Twist, GeometryError> {
    let (w, theta) = so3_log(&t.rotation);
    if theta >= std::f64::consts::PI - CUT_LOCUS_MARGIN {
        return Err(GeometryError::CutLocus { angle: theta });
    }
    let wx = skew(&w);
    let theta_sq = theta * theta;
    let coeff = if theta < SERIES_THRESHOLD {
        1.0 / 12.0 + theta_sq / 720.0 + theta_sq * theta_sq / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / theta_sq
    };
    let coupling_inv = Matrix3::identity() - 0.5 * wx + coeff * wx * wx;
    let v = coupling_inv * t.translation.vector;
    Ok(Twist::new(v.x, v.y, v.z, w.x, w.y, w.z))
}

/// Pose increment used by the iterative solvers: translation taken as-is, rotation from the
/// vector part of a unit quaternion. The rotational derivative at zero is `2·[·]×`, which is
/// the factor carried by [`super::stereo_jacobian`].
pub fn v2t(dx: &Twist) -> Isometry3 {
    let q = rotation_part(dx);
    let n2 = q.norm_squared();
    let quat = if n2 < 1.0 {
        Quaternion::new((1.0 - n2).sqrt(), q.x, q.y, q.z)
    } else {
        let q = q / n2.sqrt();
        Quaternion::new(0.0, q.x, q.y, q.z)
    };
    let rotation = UnitQuaternion::new_unchecked(quat).to_rotation_matrix();
    Isometry3::from_parts(Translation3::from(translation_part(dx)), rotation)
}

/// Re-orthonormalizes the rotation after long chains of compositions.
pub fn renormalized(mut t: Isometry3) -> Isometry3 {
    t.rotation.renormalize();
    t
}

/// Adjoint of `t` acting on twists ordered (translation, rotation).
pub fn adjoint(t: &Isometry3) -> nalgebra::Matrix6<f64> {
    let r = t.rotation.matrix();
    let tx = skew(&t.translation.vector) * r;
    let mut ad = nalgebra::Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&tx);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    ad
}

/// Frobenius deviation of the rotation from orthonormality and its determinant.
pub fn orthonormality_error(t: &Isometry3) -> (f64, f64) {
    let r = t.rotation.matrix();
    ((r.transpose() * r - Matrix3::identity()).norm(), r.determinant())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn exp_of_zero_is_identity() {
        let t = se3_exp(&Twist::zeros());
        assert_eq!(t.rotation.matrix(), &Matrix3::identity());
        assert_eq!(t.translation.vector, Vector3::zeros());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let t = se3_exp(&Twist::new(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2));
        let expected = Rotation3::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        assert!((t.rotation.matrix() - expected.matrix()).abs().max() < 1e-12);
        assert!(t.translation.vector.norm() < 1e-12);
    }

    #[test]
    fn log_of_simple_transforms() {
        let id = se3_log(&Isometry3::identity()).unwrap();
        assert_eq!(id, Twist::zeros());

        let pure = Isometry3::translation(1.0, 2.0, 3.0);
        let xi = se3_log(&pure).unwrap();
        assert!((xi - Twist::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0)).abs().max() < 1e-15);

        let rz = Isometry3::from_parts(
            Translation3::identity(),
            Rotation3::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2),
        );
        let xi = se3_log(&rz).unwrap();
        assert!((rotation_part(&xi) - Vector3::new(0.0, 0.0, FRAC_PI_2)).abs().max() < 1e-12);
    }

    #[test]
    fn log_refuses_half_turn() {
        let half = Isometry3::from_parts(
            Translation3::identity(),
            Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI),
        );
        assert!(matches!(se3_log(&half), Err(GeometryError::CutLocus { .. })));
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        for &angle in &[1e-9, 1e-8, 1.1e-8, 1e-6, 6e-3, 7e-3, 0.2] {
            let xi = Twist::new(0.3, -0.2, 0.1, angle, -angle, 0.5 * angle);
            let back = se3_log(&se3_exp(&xi)).unwrap();
            assert!((back - xi).abs().max() < 1e-12, "angle {angle}: {}", (back - xi).abs().max());
        }
    }

    #[test]
    fn v2t_matches_half_angle_quaternion() {
        let dx = Twist::new(0.1, 0.2, 0.3, 0.0, 0.0, (0.25f64).sin());
        let t = v2t(&dx);
        assert!((rotation_angle(&t) - 0.5).abs() < 1e-12);
        assert_eq!(t.translation.vector, Vector3::new(0.1, 0.2, 0.3));
        let (ortho, det) = orthonormality_error(&t);
        assert!(ortho < 1e-12 && (det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn v2t_saturates_outside_unit_ball() {
        let t = v2t(&Twist::new(0.0, 0.0, 0.0, 0.0, 3.0, 0.0));
        assert!((rotation_angle(&t) - std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn adjoint_transports_exponentials() {
        let t = se3_exp(&Twist::new(0.4, -1.0, 2.0, 0.3, 0.1, -0.7));
        let xi = Twist::new(0.01, 0.02, -0.03, 0.004, -0.002, 0.001);
        let lhs = t * se3_exp(&xi) * t.inverse();
        let rhs = se3_exp(&(adjoint(&t) * xi));
        assert!((lhs.to_homogeneous() - rhs.to_homogeneous()).abs().max() < 1e-12);
    }
}
