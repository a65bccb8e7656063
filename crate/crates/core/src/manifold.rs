//! Rotation-group and sphere primitives.
//!
//! Attitudes live on `SO(3)` and cable directions on `S^2`. Both are advanced
//! with the exponential map so that the outputs stay on the manifold to
//! machine precision.

use nalgebra as na;
use thiserror::Error;

use crate::scalar::{lit, Real};

pub type Vec3<T> = na::Vector3<T>;
pub type Mat3<T> = na::Matrix3<T>;

/// Below this rotation angle the Rodrigues coefficients switch to their
/// Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("matrix is not skew-symmetric (|M + M^T| = {0:e})")]
    NonSkew(f64),
    #[error("matrix is not a rotation (orthogonality defect {defect:e}, det {det})")]
    NotRotation { defect: f64, det: f64 },
    #[error("cannot normalize a zero or non-finite vector")]
    ZeroVector,
}

/// Cross-product matrix: `hat(v) * w == v.cross(&w)`.
pub fn hat<T: Real>(v: &Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    Mat3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Inverse of [`hat`]. Fails when `|M + M^T|_F >= 1e-9`.
pub fn vee<T: Real>(m: &Mat3<T>) -> Result<Vec3<T>, ManifoldError> {
    let defect = (m + m.transpose()).norm();
    if !(defect < lit(1e-9)) {
        return Err(ManifoldError::NonSkew(crate::scalar::to_f64(defect)));
    }
    Ok(vee_unchecked(m))
}

/// Vee of the skew part of `m`, without checking.
pub fn vee_unchecked<T: Real>(m: &Mat3<T>) -> Vec3<T> {
    let half: T = lit(0.5);
    Vec3::new(
        (m[(2, 1)] - m[(1, 2)]) * half,
        (m[(0, 2)] - m[(2, 0)]) * half,
        (m[(1, 0)] - m[(0, 1)]) * half,
    )
}

/// An element of `SO(3)` stored as a 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation<T: Real>(Mat3<T>);

impl<T: Real> Rotation<T> {
    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    /// Accepts `m` if it is orthonormal with unit determinant within `1e-9`.
    pub fn from_matrix(m: Mat3<T>) -> Result<Self, ManifoldError> {
        let defect = crate::scalar::to_f64((m.transpose() * m - Mat3::identity()).norm());
        let det = crate::scalar::to_f64(m.determinant());
        if defect > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(ManifoldError::NotRotation { defect, det });
        }
        Ok(Self(m))
    }

    /// Projects an approximately orthonormal matrix onto `SO(3)`.
    pub fn orthonormalized(m: Mat3<T>) -> Self {
        Self(project_to_so3(m))
    }

    pub fn from_axis_angle(axis: &Vec3<T>, angle: T) -> Self {
        let n = axis.norm();
        if n == T::zero() {
            return Self::identity();
        }
        exp_rotation(&(axis * (angle / n)))
    }

    /// Unit quaternion `(w, x, y, z)` to rotation; the input is normalized.
    pub fn from_quaternion(q: [T; 4]) -> Result<Self, ManifoldError> {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if !(n > T::zero()) {
            return Err(ManifoldError::ZeroVector);
        }
        let uq = na::UnitQuaternion::from_quaternion(na::Quaternion::new(
            q[0] / n,
            q[1] / n,
            q[2] / n,
            q[3] / n,
        ));
        Ok(Self::orthonormalized(*uq.to_rotation_matrix().matrix()))
    }

    /// Quaternion `(w, x, y, z)` with `w >= 0`.
    pub fn to_quaternion(&self) -> [T; 4] {
        let rot = na::Rotation3::from_matrix_unchecked(self.0);
        let q = na::UnitQuaternion::from_rotation_matrix(&rot);
        let mut c = [q.w, q.i, q.j, q.k];
        if c[0] < T::zero() {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        c
    }

    pub fn matrix(&self) -> &Mat3<T> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vec3<T>) -> Vec3<T> {
        self.0 * v
    }

    /// Third column, i.e. the image of `e3`.
    pub fn e3(&self) -> Vec3<T> {
        self.0.column(2).into_owned()
    }

    /// `|R^T R - I|_F`.
    pub fn orthogonality_defect(&self) -> T {
        (self.0.transpose() * self.0 - Mat3::identity()).norm()
    }
}

impl<T: Real> Default for Rotation<T> {
    fn default() -> Self {
        Self::identity()
    }
}

/// A point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVector<T: Real>(Vec3<T>);

impl<T: Real> UnitVector<T> {
    pub fn new(v: Vec3<T>) -> Result<Self, ManifoldError> {
        let n = v.norm();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(ManifoldError::ZeroVector);
        }
        Ok(Self(v / n))
    }

    pub fn e3() -> Self {
        Self(Vec3::z())
    }

    pub fn neg_e3() -> Self {
        Self(-Vec3::z())
    }

    pub fn as_vec(&self) -> &Vec3<T> {
        &self.0
    }

    pub fn into_inner(self) -> Vec3<T> {
        self.0
    }
}

fn project_to_so3<T: Real>(m: Mat3<T>) -> Mat3<T> {
    // Gram-Schmidt on the columns keeps the result exactly orthonormal and
    // leaves an already orthonormal input unchanged up to rounding.
    let c0 = m.column(0).into_owned();
    let c1 = m.column(1).into_owned();
    let b0 = c0.normalize();
    let b1 = (c1 - b0 * b0.dot(&c1)).normalize();
    let b2 = b0.cross(&b1);
    Mat3::from_columns(&[b0, b1, b2])
}

/// Rodrigues formula `exp(hat(omega))`.
pub fn exp_rotation<T: Real>(omega: &Vec3<T>) -> Rotation<T> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < lit(SMALL_ANGLE) {
        (
            T::one() - theta2 / lit(6.0),
            lit::<T>(0.5) - theta2 / lit(24.0),
        )
    } else {
        (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
    };
    let w = hat(omega);
    Rotation(Mat3::identity() + w * a + w * w * b)
}

/// Principal logarithm of a rotation, returned as a rotation vector.
pub fn log_rotation<T: Real>(r: &Rotation<T>) -> Vec3<T> {
    let rot = na::Rotation3::from_matrix_unchecked(r.0);
    rot.scaled_axis()
}

/// Advances `R' = R hat(Omega)` with constant body rate over `dt`.
pub fn integrate_attitude<T: Real>(r: &Rotation<T>, omega: &Vec3<T>, dt: T) -> Rotation<T> {
    let step = exp_rotation(&(omega * dt));
    Rotation::orthonormalized(r.0 * step.0)
}

/// Advances `q' = omega x q` with constant spatial rate over `dt`.
pub fn integrate_sphere<T: Real>(q: &UnitVector<T>, omega: &Vec3<T>, dt: T) -> UnitVector<T> {
    let moved = exp_rotation(&(omega * dt)).0 * q.0;
    UnitVector(moved / moved.norm())
}

/// Rotation error `0.5 * vee(Rd^T R - R^T Rd)`.
pub fn attitude_error<T: Real>(r: &Rotation<T>, rd: &Rotation<T>) -> Vec3<T> {
    let m = rd.0.transpose() * r.0 - r.0.transpose() * rd.0;
    vee_unchecked(&m) * lit::<T>(0.5)
}

/// Inverse of the right-trivialised differential of `exp`, truncated after the
/// second Bernoulli term. Used by the Lie-group Runge-Kutta stages.
pub(crate) fn dexp_inv_right<T: Real>(theta: &Vec3<T>, rate: &Vec3<T>) -> Vec3<T> {
    let c = theta.cross(rate);
    rate + c * lit::<T>(0.5) + theta.cross(&c) / lit::<T>(12.0)
}

/// Same as [`dexp_inv_right`] for the left trivialisation (spatial rates).
pub(crate) fn dexp_inv_left<T: Real>(theta: &Vec3<T>, rate: &Vec3<T>) -> Vec3<T> {
    let c = theta.cross(rate);
    rate - c * lit::<T>(0.5) + theta.cross(&c) / lit::<T>(12.0)
}
