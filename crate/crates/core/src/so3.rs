//! Quaternion and rotation-matrix primitives.
//!
//! Quaternions follow the Hamilton convention with scalar-first component
//! order `(w, x, y, z)`. A quaternion `q` of frame `S` in world `W` maps
//! segment-frame vectors into the world frame, and its rotation matrix has the
//! segment basis vectors `r_x, r_y, r_z` (expressed in `W`) as columns.

use nalgebra::{Matrix3, Quaternion, Vector3};

pub use nalgebra::{Rotation3, UnitQuaternion};

pub type Quat = UnitQuaternion<f64>;
pub type Rot = Rotation3<f64>;
pub type Vec3 = Vector3<f64>;

/// Builds a unit quaternion from scalar-first components, normalizing.
pub fn quat(w: f64, x: f64, y: f64, z: f64) -> Quat {
    Quat::new_normalize(Quaternion::new(w, x, y, z))
}

/// Scalar-first components `[w, x, y, z]`.
pub fn quat_components(q: &Quat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

pub fn quat_from_axis_angle(axis: &Vec3, angle: f64) -> Quat {
    let half = 0.5 * angle;
    let a = axis.normalize() * half.sin();
    quat(half.cos(), a.x, a.y, a.z)
}

/// Hamilton product `a ⊗ b`, renormalized so long products do not drift.
pub fn quat_multiply(a: &Quat, b: &Quat) -> Quat {
    Quat::new_normalize(a.quaternion() * b.quaternion())
}

pub fn quat_inverse(q: &Quat) -> Quat {
    q.conjugate()
}

pub fn quat_to_rotation(q: &Quat) -> Rot {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let m = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    Rot::from_matrix_unchecked(m)
}

/// Inverse of [`quat_to_rotation`] (Shepperd's method, largest-pivot branch).
pub fn rotation_to_quat(r: &Rot) -> Quat {
    let m = r.matrix();
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > m[(0, 0)] && trace > m[(1, 1)] && trace > m[(2, 2)] {
        let s = 2.0 * (1.0 + trace).sqrt();
        Quaternion::new(
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
        Quaternion::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] >= m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
        Quaternion::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
        Quaternion::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    // Canonical hemisphere keeps outputs comparable.
    let q = if q.w < 0.0 { -q } else { q };
    Quat::new_normalize(q)
}

/// Sandwich product `q ⊗ [0, v] ⊗ q⁻¹`, returning the vector part.
pub fn rotate_vector(q: &Quat, v: &Vec3) -> Vec3 {
    let p = Quaternion::from_imag(*v);
    let r = q.quaternion() * p * q.quaternion().conjugate();
    r.imag()
}

/// Rotation with orthonormal columns built from a (nearly) orthonormal basis.
///
/// The `z` column is kept, `y` is made orthogonal to it, and `x = y × z`.
pub fn rotation_from_basis(y: &Vec3, z: &Vec3) -> Rot {
    let z = z.normalize();
    let y = (y - z * z.dot(y)).normalize();
    let x = y.cross(&z);
    Rot::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]))
}

fn vee(m: &Matrix3<f64>) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Logarithm map: axis-angle vector with norm in `[0, π]`.
pub fn so3_log(r: &Rot) -> Vec3 {
    let m = r.matrix();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let skew = vee(&(m - m.transpose())); // = 2 sin(θ) a
    if theta < 1e-6 {
        // θ / (2 sin θ) ≈ 1/2 + θ²/12
        return skew * (0.5 + theta * theta / 12.0);
    }
    if theta < 3.0 * std::f64::consts::FRAC_PI_4 {
        return skew * (theta / (2.0 * theta.sin()));
    }
    // Near π the sine is tiny; recover the axis from the symmetric part
    // B = (1 - cos θ) a aᵀ using its largest diagonal entry.
    let b = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
    let (mut col, mut best) = (0, b[(0, 0)]);
    for i in 1..3 {
        if b[(i, i)] > best {
            best = b[(i, i)];
            col = i;
        }
    }
    let mut axis = b.column(col).into_owned().normalize();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Exponential map from an axis-angle vector.
pub fn so3_exp(v: &Vec3) -> Rot {
    Rot::from_scaled_axis(*v)
}

/// Rotation angle of a unit quaternion, in `[0, π]`.
pub fn quat_angle(q: &Quat) -> f64 {
    2.0 * q.imag().norm().atan2(q.w.abs())
}

/// Angle of the rotation taking `b` to `a`, in `[0, π]`.
pub fn quat_distance(a: &Quat, b: &Quat) -> f64 {
    quat_angle(&quat_multiply(a, &quat_inverse(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

    fn rz90() -> Quat {
        quat_from_axis_angle(&Vec3::z(), FRAC_PI_2)
    }

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn multiply_identity_and_inverse() {
        let q = quat(0.3, -0.2, 0.9, 0.1);
        let id = Quat::identity();
        assert!(quat_multiply(&id, &q).angle_to(&q) < 1e-12);
        let r = quat_multiply(&q, &quat_inverse(&q));
        assert!(r.angle() < 1e-12);
    }

    #[test]
    fn two_quarter_turns_make_half_turn() {
        let q = quat_multiply(&rz90(), &rz90());
        // Oracle: compose matrices and compare.
        let m = quat_to_rotation(&rz90()).matrix() * quat_to_rotation(&rz90()).matrix();
        let expected = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((m - expected).norm() < 1e-12);
        assert!((quat_to_rotation(&q).matrix() - expected).norm() < 1e-12);
    }

    #[test]
    fn inverse_is_conjugate() {
        let q = quat(0.5, 0.5, -0.5, 0.5);
        let c = quat_components(&quat_inverse(&q));
        assert_eq!(c, [0.5, -0.5, 0.5, -0.5]);
        assert_eq!(quat_components(&quat_inverse(&Quat::identity())), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn quarter_turn_matrix_columns() {
        let r = quat_to_rotation(&rz90());
        let m = r.matrix();
        assert!(close(&m.column(0).into_owned(), &Vec3::new(0.0, 1.0, 0.0), 1e-12));
        assert!(close(&m.column(1).into_owned(), &Vec3::new(-1.0, 0.0, 0.0), 1e-12));
        assert!(close(&m.column(2).into_owned(), &Vec3::new(0.0, 0.0, 1.0), 1e-12));
        assert_eq!(*quat_to_rotation(&Quat::identity()).matrix(), Matrix3::identity());
    }

    #[test]
    fn rotate_quarter_turn() {
        let v = rotate_vector(&rz90(), &Vec3::x());
        assert!(close(&v, &Vec3::y(), 1e-12));
        assert_eq!(rotate_vector(&Quat::identity(), &Vec3::new(1.0, 2.0, 3.0)), Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn log_of_identity_and_thirty_degrees() {
        assert_eq!(so3_log(&Rot::identity()), Vec3::zeros());
        let r = quat_to_rotation(&quat_from_axis_angle(&Vec3::x(), FRAC_PI_6));
        assert!(close(&so3_log(&r), &Vec3::new(FRAC_PI_6, 0.0, 0.0), 1e-12));
    }

    #[test]
    fn log_near_and_at_pi() {
        let axis = Vec3::new(1.0, -2.0, 0.5).normalize();
        for angle in [PI - 1e-9, PI - 1e-4, PI, 2.5] {
            let r = quat_to_rotation(&quat_from_axis_angle(&axis, angle));
            let v = so3_log(&r);
            assert!((v.norm() - angle).abs() < 1e-7, "angle {angle}");
            // at exactly π the sign of the axis is ambiguous
            let rec = so3_exp(&v);
            assert!((rec.matrix() - r.matrix()).norm() < 1e-7);
        }
    }

    fn arb_quat() -> impl Strategy<Value = Quat> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| quat(w, x, y, z))
    }

    fn arb_vec() -> impl Strategy<Value = Vec3> {
        (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn sandwich_matches_matrix(q in arb_quat(), v in arb_vec()) {
            let a = rotate_vector(&q, &v);
            let b = quat_to_rotation(&q).matrix() * v;
            prop_assert!((a - b).norm() < 1e-9);
            prop_assert!((a.norm() - v.norm()).abs() < 1e-9);
        }

        #[test]
        fn multiply_associative(a in arb_quat(), b in arb_quat(), c in arb_quat()) {
            let l = quat_multiply(&quat_multiply(&a, &b), &c);
            let r = quat_multiply(&a, &quat_multiply(&b, &c));
            let d = (l.quaternion() - r.quaternion()).norm().min((l.quaternion() + r.quaternion()).norm());
            prop_assert!(d < 1e-9);
            prop_assert!((l.quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn rotation_is_orthonormal_and_round_trips(q in arb_quat()) {
            let r = quat_to_rotation(&q);
            let m = r.matrix();
            prop_assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-9);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
            let back = quat_to_rotation(&rotation_to_quat(&r));
            prop_assert!((back.matrix() - m).norm() < 1e-9);
        }

        #[test]
        fn log_matches_angle_and_exp_round_trip(axis in arb_vec(), angle in 1e-4..(175.0f64.to_radians())) {
            prop_assume!(axis.norm() > 1e-3);
            let q = quat_from_axis_angle(&axis, angle);
            let r = quat_to_rotation(&q);
            let v = so3_log(&r);
            prop_assert!((v.norm() - angle).abs() < 1e-7);
            // independent route: nalgebra's own logarithm
            prop_assert!((v - q.scaled_axis()).norm() < 1e-7);
            prop_assert!((so3_exp(&v).matrix() - r.matrix()).norm() < 1e-7);
        }
    }
}
