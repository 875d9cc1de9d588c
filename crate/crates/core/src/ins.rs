//! Strapdown mechanization and error-state covariance propagation.
//!
//! The world frame is local and gravity-aligned (`g = (0, 0, -g)`); Earth
//! rotation and Coriolis terms are ignored. IMU samples are held constant
//! over `[t, t + dt]`.

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, skew, Manifold, Mat3, Pose, Rotation, Vec3};
use crate::msckf::{layout, FilterState};

pub const STANDARD_GRAVITY: f64 = 9.80665;

/// One IMU sample; `angular_velocity` in rad/s, `specific_force` in m/s².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    pub angular_velocity: Vec3,
    pub specific_force: Vec3,
}

/// Navigation part of the estimate. Error ordering is
/// `[δθ, δp, δv, δb_g, δb_a]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    /// Body to world.
    pub attitude: Rotation,
    pub position: Vec3,
    pub velocity: Vec3,
    pub gyro_bias: Vec3,
    pub accel_bias: Vec3,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            attitude: Rotation::identity(),
            position: Vec3::zeros(),
            velocity: Vec3::zeros(),
            gyro_bias: Vec3::zeros(),
            accel_bias: Vec3::zeros(),
        }
    }
}

impl NavState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.attitude, self.position)
    }

    fn is_finite(&self) -> bool {
        self.attitude.matrix().iter().all(|x| x.is_finite())
            && self.position.iter().all(|x| x.is_finite())
            && self.velocity.iter().all(|x| x.is_finite())
            && self.gyro_bias.iter().all(|x| x.is_finite())
            && self.accel_bias.iter().all(|x| x.is_finite())
    }
}

impl Manifold for NavState {
    const DOF: usize = 15;

    fn boxplus(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != Self::DOF {
            return Err(Error::DimensionMismatch {
                expected: Self::DOF,
                got: delta.len(),
            });
        }
        Ok(Self {
            attitude: self.attitude.boxplus(&delta[0..3])?,
            position: self.position.boxplus(&delta[3..6])?,
            velocity: self.velocity.boxplus(&delta[6..9])?,
            gyro_bias: self.gyro_bias.boxplus(&delta[9..12])?,
            accel_bias: self.accel_bias.boxplus(&delta[12..15])?,
        })
    }

    fn boxminus(&self, base: &Self) -> Vec<f64> {
        let mut out = self.attitude.boxminus(&base.attitude);
        out.extend(self.position.boxminus(&base.position));
        out.extend(self.velocity.boxminus(&base.velocity));
        out.extend(self.gyro_bias.boxminus(&base.gyro_bias));
        out.extend(self.accel_bias.boxminus(&base.accel_bias));
        out
    }
}

/// Continuous-time IMU noise description. Defaults are in the range of a
/// tactical-grade MEMS unit; override them from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuNoiseModel {
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s²/√Hz
    pub gyro_bias_walk: f64,
    /// m/s³/√Hz
    pub accel_bias_walk: f64,
    /// m/s²
    pub gravity_magnitude: f64,
}

impl Default for ImuNoiseModel {
    fn default() -> Self {
        Self {
            gyro_noise_density: 1e-4,
            accel_noise_density: 2e-3,
            gyro_bias_walk: 1e-5,
            accel_bias_walk: 1e-4,
            gravity_magnitude: STANDARD_GRAVITY,
        }
    }
}

impl ImuNoiseModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("gyro_noise_density", self.gyro_noise_density),
            ("accel_noise_density", self.accel_noise_density),
            ("gyro_bias_walk", self.gyro_bias_walk),
            ("accel_bias_walk", self.accel_bias_walk),
            ("gravity_magnitude", self.gravity_magnitude),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::config(
                    format!("imu.{name}"),
                    "must be finite and nonnegative",
                ));
            }
        }
        Ok(())
    }

    pub fn gravity(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, -self.gravity_magnitude)
    }
}

/// Process noise for every block that has any: the IMU plus the per-anchor
/// range scale/bias random walks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessNoise {
    pub imu: ImuNoiseModel,
    /// 1/√s
    pub range_scale_walk: f64,
    /// m/√s
    pub range_bias_walk: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self {
            imu: ImuNoiseModel::default(),
            range_scale_walk: 1e-5,
            range_bias_walk: 1e-4,
        }
    }
}

/// Integrates one IMU sample over `dt` seconds.
pub fn mechanize(
    state: &NavState,
    sample: &ImuSample,
    dt: f64,
    model: &ImuNoiseModel,
) -> Result<NavState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::NonFinite("mechanization step"));
    }
    if !state.is_finite()
        || !sample.angular_velocity.iter().all(|x| x.is_finite())
        || !sample.specific_force.iter().all(|x| x.is_finite())
    {
        return Err(Error::NonFinite("mechanization input"));
    }
    let omega = sample.angular_velocity - state.gyro_bias;
    let force = sample.specific_force - state.accel_bias;
    let accel = state.attitude * force + model.gravity();

    Ok(NavState {
        attitude: state.attitude * exp_so3(&(omega * dt)),
        position: state.position + state.velocity * dt + accel * (0.5 * dt * dt),
        velocity: state.velocity + accel * dt,
        gyro_bias: state.gyro_bias,
        accel_bias: state.accel_bias,
    })
}

pub type NavMatrix = SMatrix<f64, 15, 15>;

/// First-order transition matrix `Φ = I + F·dt` of the navigation error.
pub fn nav_transition(state: &NavState, sample: &ImuSample, dt: f64) -> NavMatrix {
    let omega = sample.angular_velocity - state.gyro_bias;
    let force = sample.specific_force - state.accel_bias;
    let r = state.attitude.matrix();

    let mut f = NavMatrix::zeros();
    f.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&omega)));
    f.fixed_view_mut::<3, 3>(0, 9)
        .copy_from(&(-Mat3::identity()));
    f.fixed_view_mut::<3, 3>(3, 6).copy_from(&Mat3::identity());
    f.fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&(-r * skew(&force)));
    f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-r));
    NavMatrix::identity() + f * dt
}

/// Discrete process noise of the navigation error over `dt`.
pub fn nav_process_noise(model: &ImuNoiseModel, dt: f64) -> NavMatrix {
    let mut q = NavMatrix::zeros();
    let blocks = [
        (0, model.gyro_noise_density),
        (6, model.accel_noise_density),
        (9, model.gyro_bias_walk),
        (12, model.accel_bias_walk),
    ];
    for (offset, density) in blocks {
        for i in 0..3 {
            q[(offset + i, offset + i)] = density * density * dt;
        }
    }
    q
}

/// ESKF prediction: mechanizes the nominal navigation state and propagates
/// the full covariance. Clones and extrinsics have no dynamics; the range
/// scale/bias states are random walks.
///
/// A cheap necessary PSD condition (finite, nonnegative diagonal)
/// is checked on entry; use [`FilterState::min_eigenvalue`] for the full test.
pub fn propagate(
    state: &mut FilterState,
    sample: &ImuSample,
    dt: f64,
    noise: &ProcessNoise,
) -> Result<()> {
    if dt == 0.0 {
        return Ok(());
    }
    state.check_covariance_cheap()?;

    let phi = nav_transition(&state.nav, sample, dt);
    let nav = mechanize(&state.nav, sample, dt, &noise.imu)?;

    let n = state.covariance.nrows();
    let p = &mut state.covariance;
    let p_nn = p.fixed_view::<15, 15>(0, 0).into_owned();
    let p_nn_new = phi * p_nn * phi.transpose() + nav_process_noise(&noise.imu, dt);
    let rest = n - 15;
    if rest > 0 {
        let p_nc = p.view((0, 15), (15, rest)).into_owned();
        let p_nc_new = phi * p_nc;
        p.view_mut((0, 15), (15, rest)).copy_from(&p_nc_new);
        p.view_mut((15, 0), (rest, 15))
            .copy_from(&p_nc_new.transpose());
    }
    let sym = (p_nn_new + p_nn_new.transpose()) * 0.5;
    p.fixed_view_mut::<15, 15>(0, 0).copy_from(&sym);

    let q = state.anchor_models.len();
    let scale_var = noise.range_scale_walk * noise.range_scale_walk * dt;
    let bias_var = noise.range_bias_walk * noise.range_bias_walk * dt;
    for i in 0..q {
        if state.range_states_active {
            p[(layout::scale(i), layout::scale(i))] += scale_var;
            p[(layout::bias(q, i), layout::bias(q, i))] += bias_var;
        }
    }
    state.nav = nav;
    state.timestamp += dt;
    Ok(())
}
