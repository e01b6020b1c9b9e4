//! Error-state extended Kalman filter over camera pose measurements.
//!
//! The nominal state is position, velocity and a unit quaternion; the 9-dim
//! error state `(dp, dv, dtheta)` carries the covariance, which sidesteps
//! the quaternion normalization constraint. The process model is constant
//! velocity (the pipeline fuses camera poses only), measurements are full
//! 6-dof poses or positions, and covariance updates use the Joseph form.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::se3::PoseSE3;

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix6 = SMatrix<f64, 6, 6>;
pub type Vector6 = SVector<f64, 6>;

/// Process and default measurement noise densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Process acceleration noise, m/s^2/sqrt(Hz).
    pub sigma_accel: f64,
    /// Process orientation random-walk noise, rad/s/sqrt(Hz).
    pub sigma_gyro: f64,
    /// Default measurement position noise, m.
    pub sigma_meas_pos: f64,
    /// Default measurement rotation noise, rad.
    pub sigma_meas_rot: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_accel: 0.5,
            sigma_gyro: 0.05,
            sigma_meas_pos: 0.02,
            sigma_meas_rot: 0.01,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_accel, self.sigma_gyro, self.sigma_meas_pos, self.sigma_meas_rot];
        if all.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidConfig("noise parameters must be positive".into()));
        }
        Ok(())
    }

    /// Default 6x6 measurement covariance built from the noise config.
    pub fn measurement_cov(&self) -> Matrix6 {
        let mut r = Matrix6::zeros();
        for i in 0..3 {
            r[(i, i)] = self.sigma_meas_pos * self.sigma_meas_pos;
            r[(i + 3, i + 3)] = self.sigma_meas_rot * self.sigma_meas_rot;
        }
        r
    }
}

/// Filter state: mean plus error-state covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    /// Covariance over `(dp, dv, dtheta)`.
    pub covariance: Matrix9,
}

impl EkfState {
    /// State at a known pose with isotropic initial uncertainty.
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>, initial_var: f64) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            orientation,
            covariance: Matrix9::identity() * initial_var,
        }
    }

    pub fn pose(&self) -> PoseSE3 {
        PoseSE3::from_parts(self.orientation.to_rotation_matrix().into_inner(), self.position)
            .expect("unit quaternion gives a valid rotation")
    }
}

fn symmetrize9(m: &Matrix9) -> Matrix9 {
    (m + m.transpose()) * 0.5
}

fn renormalized(mut q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    q.renormalize_fast();
    q
}

/// Constant-velocity prediction over `dt` seconds.
///
/// Mean: `p += v dt`; velocity and orientation are unchanged. Covariance is
/// propagated by the model Jacobian plus continuous-white-noise process
/// covariance, so its trace never decreases.
pub fn predict(state: &EkfState, dt: f64, noise: &NoiseConfig) -> Result<EkfState> {
    if dt <= 0.0 {
        return Err(Error::NonPositiveDt(dt));
    }
    noise.validate()?;

    let mut f = Matrix9::identity();
    for i in 0..3 {
        f[(i, i + 3)] = dt;
    }

    let qa = noise.sigma_accel * noise.sigma_accel;
    let qg = noise.sigma_gyro * noise.sigma_gyro;
    let mut q = Matrix9::zeros();
    for i in 0..3 {
        q[(i, i)] = qa * dt * dt * dt / 3.0;
        q[(i, i + 3)] = qa * dt * dt / 2.0;
        q[(i + 3, i)] = qa * dt * dt / 2.0;
        q[(i + 3, i + 3)] = qa * dt;
        q[(i + 6, i + 6)] = qg * dt;
    }

    Ok(EkfState {
        position: state.position + state.velocity * dt,
        velocity: state.velocity,
        orientation: state.orientation,
        covariance: symmetrize9(&(f * state.covariance * f.transpose() + q)),
    })
}

/// Innovation and its covariance, reported by the update for gating.
#[derive(Debug, Clone)]
pub struct InnovationStats {
    pub innovation: Vector6,
    pub covariance: Matrix6,
}

/// Full 6-dof pose update.
///
/// Innovation is `(p_meas - p, log(R_meas R_state^T))`; the error-state
/// correction is folded into the mean and the quaternion renormalized.
/// `meas_cov = None` uses the covariance from the noise config.
pub fn update(
    state: &EkfState,
    measurement: &PoseSE3,
    meas_cov: Option<&Matrix6>,
    noise: &NoiseConfig,
) -> Result<(EkfState, InnovationStats)> {
    noise.validate()?;
    let default_r = noise.measurement_cov();
    let r = meas_cov.unwrap_or(&default_r);
    if (r - r.transpose()).norm() > 1e-9 {
        return Err(Error::InvalidConfig("measurement covariance must be symmetric".into()));
    }

    let q_meas = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(
        *measurement.rotation(),
    ));
    let q_err = q_meas * state.orientation.inverse();
    let y_rot = q_err.scaled_axis();
    let y_pos = measurement.translation() - state.position;
    let mut y = Vector6::zeros();
    for i in 0..3 {
        y[i] = y_pos[i];
        y[i + 3] = y_rot[i];
    }

    // H = [I 0 0; 0 0 I]
    let mut h = SMatrix::<f64, 6, 9>::zeros();
    for i in 0..3 {
        h[(i, i)] = 1.0;
        h[(i + 3, i + 6)] = 1.0;
    }

    let p = &state.covariance;
    let s = h * p * h.transpose() + r;
    let s_inv = s.try_inverse().ok_or(Error::SingularInnovationCovariance)?;
    let k = p * h.transpose() * s_inv;

    let delta = k * y;
    let dp = Vector3::new(delta[0], delta[1], delta[2]);
    let dv = Vector3::new(delta[3], delta[4], delta[5]);
    let dtheta = Vector3::new(delta[6], delta[7], delta[8]);

    // Joseph form keeps the covariance PSD under any gain.
    let i_kh = Matrix9::identity() - k * h;
    let cov = i_kh * p * i_kh.transpose() + k * r * k.transpose();

    let state = EkfState {
        position: state.position + dp,
        velocity: state.velocity + dv,
        orientation: renormalized(UnitQuaternion::from_scaled_axis(dtheta) * state.orientation),
        covariance: symmetrize9(&cov),
    };
    Ok((state, InnovationStats { innovation: y, covariance: s }))
}

/// Position-only update, the 3-dof reduction of [`update`].
pub fn update_position(
    state: &EkfState,
    position: &Vector3<f64>,
    meas_cov: &Matrix3<f64>,
) -> Result<EkfState> {
    let y = position - state.position;
    let mut h = SMatrix::<f64, 3, 9>::zeros();
    for i in 0..3 {
        h[(i, i)] = 1.0;
    }
    let p = &state.covariance;
    let s = h * p * h.transpose() + meas_cov;
    let s_inv = s.try_inverse().ok_or(Error::SingularInnovationCovariance)?;
    let k = p * h.transpose() * s_inv;
    let delta = k * y;
    let i_kh = Matrix9::identity() - k * h;
    let cov = i_kh * p * i_kh.transpose() + k * meas_cov * k.transpose();
    Ok(EkfState {
        position: state.position + Vector3::new(delta[0], delta[1], delta[2]),
        velocity: state.velocity + Vector3::new(delta[3], delta[4], delta[5]),
        orientation: renormalized(
            UnitQuaternion::from_scaled_axis(Vector3::new(delta[6], delta[7], delta[8]))
                * state.orientation,
        ),
        covariance: symmetrize9(&cov),
    })
}

/// A timestamped pose observation.
#[derive(Debug, Clone)]
pub struct PoseMeasurement {
    pub timestamp: f64,
    pub pose: PoseSE3,
    /// Per-measurement covariance; `None` uses the noise-config default.
    pub cov: Option<Matrix6>,
}

/// Runs the filter over a measurement stream, one output state per
/// measurement. The first measurement initializes the state.
pub fn run_filter(
    measurements: &[PoseMeasurement],
    noise: &NoiseConfig,
) -> Result<Vec<(f64, EkfState)>> {
    noise.validate()?;
    let mut out: Vec<(f64, EkfState)> = Vec::with_capacity(measurements.len());
    let mut state: Option<EkfState> = None;
    let mut last_t = f64::NEG_INFINITY;
    for (i, m) in measurements.iter().enumerate() {
        if m.timestamp <= last_t {
            return Err(Error::NonMonotonicTimestamps(i));
        }
        let next = match state.take() {
            None => {
                let q = UnitQuaternion::from_rotation_matrix(
                    &nalgebra::Rotation3::from_matrix_unchecked(*m.pose.rotation()),
                );
                let mut init = EkfState::new(*m.pose.translation(), q, 1e-2);
                // Velocity is unknown at start.
                for i in 3..6 {
                    init.covariance[(i, i)] = 1.0;
                }
                init
            }
            Some(prev) => {
                let predicted = predict(&prev, m.timestamp - last_t, noise)?;
                update(&predicted, &m.pose, m.cov.as_ref(), noise)?.0
            }
        };
        last_t = m.timestamp;
        out.push((m.timestamp, next.clone()));
        state = Some(next);
    }
    Ok(out)
}
