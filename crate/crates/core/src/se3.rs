//! SE(3) rigid transforms and their tangent-space parametrization.
//!
//! Twists are 6-vectors `[rho, omega]` with the translational part first,
//! rotation second. `exp`/`log` use the closed-form Rodrigues expressions with
//! Taylor fallbacks near zero and the stable axis-extraction branch near
//! `theta = pi`.

use nalgebra::{Matrix3, Vector3, Vector6};

use crate::error::{Error, Result};

/// Compositions tolerated before the rotation is projected back onto SO(3).
const REORTHONORMALIZE_EVERY: u32 = 64;

/// Rigid transform: `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    // Compositions since the rotation was last projected onto SO(3).
    compositions: u32,
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        // Flip the last singular direction to stay in SO(3).
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            compositions: 0,
        }
    }

    /// Builds a pose from parts, validating the rotation invariants.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let max_dev = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_dev >= 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "rotation is not orthonormal (deviation {max_dev:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() >= 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(Self { rotation, translation, compositions: 0 })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Applies the transform to a point.
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Exponential map of a twist `[rho, omega]`.
    pub fn exp(twist: &Vector6<f64>) -> Self {
        let rho = Vector3::new(twist[0], twist[1], twist[2]);
        let omega = Vector3::new(twist[3], twist[4], twist[5]);
        let theta = omega.norm();
        let wx = skew(&omega);
        let wx2 = wx * wx;

        let (a, b, c) = if theta < 1e-8 {
            let t2 = theta * theta;
            // sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3 by series.
            (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
        } else {
            let t2 = theta * theta;
            (
                theta.sin() / theta,
                (1.0 - theta.cos()) / t2,
                (theta - theta.sin()) / (t2 * theta),
            )
        };

        let rotation = Matrix3::identity() + wx * a + wx2 * b;
        let v = Matrix3::identity() + wx * b + wx2 * c;
        Self {
            rotation,
            translation: v * rho,
            compositions: 0,
        }
    }

    /// Logarithm map, returning `[rho, omega]`.
    ///
    /// Near `theta = pi` the rotation axis is recovered from the diagonal of
    /// `R`, with its sign fixed by the off-diagonal terms.
    pub fn log(&self) -> Vector6<f64> {
        let r = &self.rotation;
        let cos_theta = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        let vee = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );

        let omega = if theta < 1e-8 {
            vee * 0.5 * (1.0 + theta * theta / 6.0)
        } else if theta < std::f64::consts::PI - 1e-6 {
            vee * (theta / (2.0 * theta.sin()))
        } else {
            // Axis magnitudes from the diagonal of R = 2 n n^T - I + ...
            let n = Vector3::new(
                ((r[(0, 0)] + 1.0) / 2.0).max(0.0).sqrt(),
                ((r[(1, 1)] + 1.0) / 2.0).max(0.0).sqrt(),
                ((r[(2, 2)] + 1.0) / 2.0).max(0.0).sqrt(),
            );
            // Fix relative signs using the symmetric off-diagonal part.
            let mut n = n;
            let k = if n.x >= n.y && n.x >= n.z {
                0
            } else if n.y >= n.z {
                1
            } else {
                2
            };
            let sym = (r + r.transpose()) * 0.5;
            for i in 0..3 {
                if i != k && sym[(k, i)] < 0.0 {
                    n[i] = -n[i];
                }
            }
            // Overall sign from the antisymmetric part (vee ~ 2 sin(theta) n).
            if vee.dot(&n) < 0.0 {
                n = -n;
            }
            n.normalize() * theta
        };

        let wx = skew(&omega);
        let wx2 = wx * wx;
        let v_inv = if theta < 1e-8 {
            Matrix3::identity() - wx * 0.5 + wx2 * (1.0 / 12.0)
        } else {
            let coeff = 1.0 / (theta * theta)
                - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
            Matrix3::identity() - wx * 0.5 + wx2 * coeff
        };
        let rho = v_inv * self.translation;

        Vector6::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z)
    }

    /// Group composition `self * other` (apply `other` first).
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let compositions = self.compositions.max(other.compositions) + 1;
        let mut pose = PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            compositions,
        };
        if compositions >= REORTHONORMALIZE_EVERY {
            pose.rotation = nearest_rotation(&pose.rotation);
            pose.compositions = 0;
        }
        pose
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
            compositions: self.compositions,
        }
    }

    /// Relative transform taking `other`-frame points into `self`-frame:
    /// `self^-1 * other`.
    pub fn relative_to(&self, other: &PoseSE3) -> PoseSE3 {
        self.inverse().compose(other)
    }
}
