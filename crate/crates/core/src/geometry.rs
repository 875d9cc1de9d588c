//! SO(3) and SE(3) primitives for the error-state formulation.
//!
//! Attitude errors are right perturbations: a true rotation is
//! `R = R̂ · Exp(δθ)`. Every Jacobian in this crate uses the same convention.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Body-to-world (or frame-to-frame) rotation. `Rotation3` keeps the matrix
/// orthonormal; construct it through [`exp_so3`] or `Rotation3` constructors.
pub type Rotation = Rotation3<f64>;

/// Below this angle `exp_so3`/`log_so3` switch to their series expansions.
pub const SMALL_ANGLE: f64 = 1e-7;

/// Skew-symmetric matrix `[v]×` such that `[v]× w = v × w`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] for a skew-symmetric input.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Exponential map from a rotation vector (radians) to SO(3).
pub fn exp_so3(theta: &Vec3) -> Rotation {
    let angle_sq = theta.norm_squared();
    let k = skew(theta);
    let k2 = k * k;
    let m = if angle_sq < SMALL_ANGLE * SMALL_ANGLE {
        // sin(a)/a ≈ 1 - a²/6, (1 - cos a)/a² ≈ 1/2 - a²/24
        Mat3::identity() + k * (1.0 - angle_sq / 6.0) + k2 * (0.5 - angle_sq / 24.0)
    } else {
        let angle = angle_sq.sqrt();
        Mat3::identity() + k * (angle.sin() / angle) + k2 * ((1.0 - angle.cos()) / angle_sq)
    };
    Rotation::from_matrix_unchecked(m)
}

/// Logarithm map SO(3) → rotation vector with angle in `[0, π]`.
pub fn log_so3(r: &Rotation) -> Vec3 {
    let m = r.matrix();
    let cos_angle = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos_angle.acos();
    let antisym = vee(&(m - m.transpose())) * 0.5;

    if angle < SMALL_ANGLE {
        return antisym * (1.0 + angle * angle / 6.0);
    }
    if std::f64::consts::PI - angle < 1e-6 {
        // sin(angle) ≈ 0: recover the axis from the symmetric part R + I = 2aaᵀ + O(π - angle).
        let b = (m + Mat3::identity()) * 0.5;
        let col = (0..3)
            .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
            .unwrap_or(0);
        let mut axis: Vec3 = b.column(col).into_owned();
        axis /= axis.norm();
        if axis.dot(&antisym) < 0.0 {
            axis = -axis;
        }
        return axis * angle;
    }
    antisym * (angle / angle.sin())
}

/// Rotation angle in radians, `‖Log(R)‖`.
pub fn rotation_angle(r: &Rotation) -> f64 {
    let cos_angle = ((r.matrix().trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    cos_angle.acos()
}

/// Yaw rotation about the world z axis.
pub fn rot_z(yaw: f64) -> Rotation {
    exp_so3(&Vec3::new(0.0, 0.0, yaw))
}

/// Checks `RᵀR = I` and `det R = +1` within `tol`.
pub fn is_rotation(m: &Mat3, tol: f64) -> bool {
    (m.transpose() * m - Mat3::identity()).abs().max() <= tol
        && (m.determinant() - 1.0).abs() <= tol
}

/// Rigid transform mapping points from a child frame into a parent frame:
/// `x_parent = R · x_child + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Rotation::identity(), translation)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(r_inv, -(r_inv * self.translation))
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Relative pose `self⁻¹ ∘ other`, i.e. `other` expressed in `self`'s frame.
    pub fn between(&self, other: &Pose) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose::new(
            r_inv * other.rotation,
            r_inv * (other.translation - self.translation),
        )
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// A state element with an additive error parameterization.
///
/// `boxplus` folds an error vector into the estimate; `boxminus` is its local
/// inverse, `(x ⊞ δ) ⊟ x = δ` for small `δ`.
pub trait Manifold: Sized {
    const DOF: usize;

    fn boxplus(&self, delta: &[f64]) -> Result<Self>;

    /// Error vector `δ` such that `base ⊞ δ = self`.
    fn boxminus(&self, base: &Self) -> Vec<f64>;
}

fn check_len(delta: &[f64], expected: usize) -> Result<()> {
    if delta.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: delta.len(),
        });
    }
    Ok(())
}

impl Manifold for f64 {
    const DOF: usize = 1;

    fn boxplus(&self, delta: &[f64]) -> Result<Self> {
        check_len(delta, 1)?;
        Ok(self + delta[0])
    }

    fn boxminus(&self, base: &Self) -> Vec<f64> {
        vec![self - base]
    }
}

impl Manifold for Vec3 {
    const DOF: usize = 3;

    fn boxplus(&self, delta: &[f64]) -> Result<Self> {
        check_len(delta, 3)?;
        Ok(self + Vec3::from_column_slice(delta))
    }

    fn boxminus(&self, base: &Self) -> Vec<f64> {
        (self - base).as_slice().to_vec()
    }
}

impl Manifold for Rotation {
    const DOF: usize = 3;

    fn boxplus(&self, delta: &[f64]) -> Result<Self> {
        check_len(delta, 3)?;
        Ok(self * exp_so3(&Vec3::from_column_slice(delta)))
    }

    fn boxminus(&self, base: &Self) -> Vec<f64> {
        log_so3(&(base.inverse() * self)).as_slice().to_vec()
    }
}

/// Pose errors are ordered `[δθ, δp]`.
impl Manifold for Pose {
    const DOF: usize = 6;

    fn boxplus(&self, delta: &[f64]) -> Result<Self> {
        check_len(delta, 6)?;
        Ok(Pose::new(
            self.rotation.boxplus(&delta[..3])?,
            self.translation.boxplus(&delta[3..])?,
        ))
    }

    fn boxminus(&self, base: &Self) -> Vec<f64> {
        let mut out = self.rotation.boxminus(&base.rotation);
        out.extend(self.translation.boxminus(&base.translation));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ) * scale
    }

    /// Random rotation vector with norm strictly below `max_angle`.
    fn random_rotvec(rng: &mut ChaCha8Rng, max_angle: f64) -> Vec3 {
        let axis = loop {
            let v = random_vec(rng, 1.0);
            if v.norm() > 1e-3 {
                break v.normalize();
            }
        };
        axis * rng.random_range(0.0..max_angle)
    }

    #[test]
    fn skew_examples() {
        assert_eq!(skew(&Vec3::zeros()), Mat3::zeros());
        let e3 = Vec3::z();
        assert_eq!(skew(&e3) * Vec3::x(), Vec3::y());
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(skew(&v) * v, Vec3::zeros());
        assert_eq!(skew(&v), -skew(&v).transpose());
        assert_eq!(vee(&skew(&v)), v);
    }

    #[test]
    fn exp_examples() {
        assert_eq!(*exp_so3(&Vec3::zeros()).matrix(), Mat3::identity());
        let r = exp_so3(&Vec3::new(0.0, 0.0, FRAC_PI_2));
        assert!((r * Vec3::x() - Vec3::y()).norm() < 1e-12);
    }

    #[test]
    fn exp_small_angle_matches_first_order() {
        let theta = Vec3::new(1e-9, -2e-9, 3e-9);
        let r = exp_so3(&theta);
        let first_order = Mat3::identity() + skew(&theta);
        assert!((r.matrix() - first_order).abs().max() < 1e-17);
        // the series branch and Rodrigues agree across the threshold
        let just_above = Vec3::new(0.0, 0.0, 1.01 * SMALL_ANGLE);
        let just_below = Vec3::new(0.0, 0.0, 0.99 * SMALL_ANGLE);
        let a = exp_so3(&just_above);
        let b = exp_so3(&just_below);
        assert!((a.matrix() - b.matrix()).abs().max() < 1e-8);
    }

    #[test]
    fn exp_outputs_valid_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let theta = random_vec(&mut rng, 4.0);
            assert!(is_rotation(exp_so3(&theta).matrix(), 1e-9));
        }
    }

    #[test]
    fn log_inverts_exp_against_independent_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2_000 {
            let theta = random_rotvec(&mut rng, PI - 1e-3);
            let r = exp_so3(&theta);
            // nalgebra's axis-angle extraction is the independent oracle
            let oracle = r.scaled_axis();
            assert!((oracle - theta).norm() < 1e-9, "{theta} vs {oracle}");
            assert!((log_so3(&r) - theta).norm() < 1e-9);
        }
    }

    #[test]
    fn log_near_pi_and_zero() {
        let axis = Vec3::new(1.0, 2.0, -0.5).normalize();
        let theta = axis * (PI - 1e-9);
        let back = log_so3(&exp_so3(&theta));
        assert!((back - theta).norm() < 1e-6);
        let tiny = Vec3::new(3e-9, 0.0, -1e-9);
        assert!((log_so3(&exp_so3(&tiny)) - tiny).norm() < 1e-18);
    }

    #[test]
    fn boxplus_identity_and_euclidean() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(p.boxplus(&[0.0; 3]).unwrap(), p);
        assert_eq!(
            p.boxplus(&[0.1, 0.0, 0.0]).unwrap(),
            Vec3::new(1.1, 2.0, 3.0)
        );
        let r = exp_so3(&Vec3::new(0.3, -0.2, 0.9));
        assert_eq!(r.boxplus(&[0.0; 3]).unwrap(), r);
        assert!(matches!(
            r.boxplus(&[0.0; 2]),
            Err(Error::DimensionMismatch {
                expected: 3,
                got: 2
            })
        ));
        assert_eq!(2.5.boxplus(&[0.5]).unwrap(), 3.0);
    }

    #[test]
    fn rotation_boxplus_matches_product_of_exponentials() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1_000 {
            let base = random_rotvec(&mut rng, 3.0);
            let delta = random_rotvec(&mut rng, 1.0);
            let r_hat = exp_so3(&base);
            let ours = r_hat.boxplus(delta.as_slice()).unwrap();
            let oracle = Rotation3::new(base) * Rotation3::new(delta);
            assert!((ours.matrix() - oracle.matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn boxplus_is_locally_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2_000 {
            let x = Pose::new(
                exp_so3(&random_rotvec(&mut rng, 3.0)),
                random_vec(&mut rng, 10.0),
            );
            let mut delta = random_rotvec(&mut rng, 0.5).as_slice().to_vec();
            delta.extend(random_vec(&mut rng, 2.0).iter());
            let back = x.boxplus(&delta).unwrap().boxminus(&x);
            for (a, b) in back.iter().zip(&delta) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pose_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Pose::new(
            exp_so3(&random_rotvec(&mut rng, 3.0)),
            random_vec(&mut rng, 5.0),
        );
        let b = Pose::new(
            exp_so3(&random_rotvec(&mut rng, 3.0)),
            random_vec(&mut rng, 5.0),
        );
        let p = random_vec(&mut rng, 3.0);
        let via_compose = (a * b).transform_point(&p);
        let stepwise = a.transform_point(&b.transform_point(&p));
        assert!((via_compose - stepwise).norm() < 1e-12);
        let rel = a.between(&b);
        let oracle = a.inverse() * b;
        assert!((rel.translation - oracle.translation).norm() < 1e-12);
        assert!(
            (rel.rotation.matrix() - oracle.rotation.matrix())
                .abs()
                .max()
                < 1e-12
        );
        assert!((rotation_angle(&rot_z(0.3)) - 0.3).abs() < 1e-12);
    }
}
