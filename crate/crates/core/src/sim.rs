//! Deterministic scenario simulation: ground truth, IMU, LiDAR and UWB
//! streams.
//!
//! Every stream draws from its own ChaCha substream of the scenario seed, so
//! changing one sensor's configuration never perturbs another's noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{log_so3, rot_z, Pose, Rotation, Vec3};
use crate::ins::{ImuNoiseModel, ImuSample};
use crate::lidar::PointCloud;
use crate::uwb::{Anchor, AnchorTable, RangeMeasurement, TagExtrinsics};

pub const SCENARIO_SCHEMA: &str = "ulins-scenario/1";

const IMU_STREAM: u64 = 1;
const LIDAR_STREAM: u64 = 2;
const UWB_STREAM: u64 = 3;

/// Planar path shapes. All run at the platform height given by `center` /
/// `start` / the waypoint z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrajectorySpec {
    Line {
        start: Vec3,
        heading_deg: f64,
        speed: f64,
    },
    Circle {
        center: Vec3,
        radius: f64,
        speed: f64,
    },
    /// Lemniscate `x = a·sin(ωt)`, `y = (b/2)·sin(2ωt)`.
    FigureEight {
        center: Vec3,
        half_length: f64,
        width: f64,
        max_speed: f64,
    },
    /// C² quintic through the waypoints at roughly constant speed.
    Waypoints {
        points: Vec<Vec3>,
        speed: f64,
        #[serde(default)]
        closed: bool,
    },
}

/// Optional vertical oscillation added on top of the planar path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerticalMotion {
    pub amplitude: f64,
    pub period: f64,
}

/// Position and its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
}

#[derive(Debug, Clone, Copy)]
struct QuinticSegment {
    t0: f64,
    duration: f64,
    coeffs: [Vec3; 6],
}

impl QuinticSegment {
    /// Hermite quintic with given end positions and velocities and zero end
    /// accelerations.
    fn new(t0: f64, duration: f64, p0: Vec3, v0: Vec3, p1: Vec3, v1: Vec3) -> Self {
        let h = duration;
        let (v0, v1) = (v0 * h, v1 * h);
        let c0 = p0;
        let c1 = v0;
        let c2 = Vec3::zeros();
        let c3 = (p1 - p0) * 10.0 - v0 * 6.0 - v1 * 4.0;
        let c4 = (p0 - p1) * 15.0 + v0 * 8.0 + v1 * 7.0;
        let c5 = (p1 - p0) * 6.0 - (v0 + v1) * 3.0;
        Self {
            t0,
            duration,
            coeffs: [c0, c1, c2, c3, c4, c5],
        }
    }

    fn eval(&self, t: f64) -> Kinematics {
        let h = self.duration;
        let s = ((t - self.t0) / h).clamp(0.0, 1.0);
        let c = &self.coeffs;
        let mut p = Vec3::zeros();
        let mut v = Vec3::zeros();
        let mut a = Vec3::zeros();
        for (k, ck) in c.iter().enumerate() {
            p += ck * s.powi(k as i32);
            if k >= 1 {
                v += ck * (k as f64 * s.powi(k as i32 - 1));
            }
            if k >= 2 {
                a += ck * ((k * (k - 1)) as f64 * s.powi(k as i32 - 2));
            }
        }
        Kinematics {
            position: p,
            velocity: v / h,
            acceleration: a / (h * h),
        }
    }
}

/// Evaluable ground-truth trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    spec: TrajectorySpec,
    vertical: Option<VerticalMotion>,
    segments: Vec<QuinticSegment>,
}

impl Trajectory {
    pub fn new(spec: &TrajectorySpec, vertical: Option<VerticalMotion>) -> Result<Self> {
        let mut segments = Vec::new();
        match spec {
            TrajectorySpec::Line { speed, .. }
            | TrajectorySpec::Circle { speed, .. }
            | TrajectorySpec::Waypoints { speed, .. } => {
                if !(*speed > 0.0) {
                    return Err(Error::config("trajectory.speed", "must be positive"));
                }
            }
            TrajectorySpec::FigureEight {
                half_length,
                width,
                max_speed,
                ..
            } => {
                if !(*half_length > 0.0 && *width > 0.0 && *max_speed > 0.0) {
                    return Err(Error::config(
                        "trajectory",
                        "figure-eight dimensions must be positive",
                    ));
                }
            }
        }
        if let TrajectorySpec::Circle { radius, .. } = spec {
            if !(*radius > 0.0) {
                return Err(Error::config("trajectory.radius", "must be positive"));
            }
        }
        if let TrajectorySpec::Waypoints {
            points,
            speed,
            closed,
        } = spec
        {
            segments = waypoint_segments(points, *speed, *closed)?;
        }
        if let Some(v) = vertical {
            if !(v.period > 0.0) {
                return Err(Error::config("vertical.period", "must be positive"));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            vertical,
            segments,
        })
    }

    fn planar(&self, t: f64) -> Kinematics {
        match &self.spec {
            TrajectorySpec::Line {
                start,
                heading_deg,
                speed,
            } => {
                let dir = rot_z(heading_deg.to_radians()) * Vec3::x();
                Kinematics {
                    position: start + dir * (speed * t),
                    velocity: dir * *speed,
                    acceleration: Vec3::zeros(),
                }
            }
            TrajectorySpec::Circle {
                center,
                radius,
                speed,
            } => {
                let w = speed / radius;
                let (s, c) = (w * t).sin_cos();
                Kinematics {
                    position: center + Vec3::new(radius * c, radius * s, 0.0),
                    velocity: Vec3::new(-radius * w * s, radius * w * c, 0.0),
                    acceleration: Vec3::new(-radius * w * w * c, -radius * w * w * s, 0.0),
                }
            }
            TrajectorySpec::FigureEight {
                center,
                half_length,
                width,
                max_speed,
            } => {
                let (a, b) = (*half_length, *width);
                let w = max_speed / (a * a + b * b).sqrt();
                let (s1, c1) = (w * t).sin_cos();
                let (s2, c2) = (2.0 * w * t).sin_cos();
                Kinematics {
                    position: center + Vec3::new(a * s1, 0.5 * b * s2, 0.0),
                    velocity: Vec3::new(a * w * c1, b * w * c2, 0.0),
                    acceleration: Vec3::new(-a * w * w * s1, -2.0 * b * w * w * s2, 0.0),
                }
            }
            TrajectorySpec::Waypoints { .. } => {
                let total = self.segments.last().map_or(0.0, |s| s.t0 + s.duration);
                let closed = matches!(self.spec, TrajectorySpec::Waypoints { closed: true, .. });
                let t = if closed && total > 0.0 {
                    t.rem_euclid(total)
                } else {
                    t
                };
                let idx = self
                    .segments
                    .partition_point(|s| s.t0 + s.duration <= t)
                    .min(self.segments.len() - 1);
                self.segments[idx].eval(t)
            }
        }
    }

    pub fn kinematics(&self, t: f64) -> Kinematics {
        let mut k = self.planar(t);
        if let Some(v) = self.vertical {
            let w = 2.0 * PI / v.period;
            let (s, c) = (w * t).sin_cos();
            k.position.z += v.amplitude * s;
            k.velocity.z += v.amplitude * w * c;
            k.acceleration.z -= v.amplitude * w * w * s;
        }
        k
    }

    /// Body attitude: level, heading along the horizontal velocity.
    pub fn attitude(&self, t: f64) -> Rotation {
        let v = self.kinematics(t).velocity;
        rot_z(v.y.atan2(v.x))
    }

    pub fn pose(&self, t: f64) -> Pose {
        Pose::new(self.attitude(t), self.kinematics(t).position)
    }
}

fn waypoint_segments(points: &[Vec3], speed: f64, closed: bool) -> Result<Vec<QuinticSegment>> {
    if points.len() < 2 {
        return Err(Error::config(
            "trajectory.points",
            "need at least two waypoints",
        ));
    }
    let mut pts = points.to_vec();
    if closed {
        pts.push(points[0]);
    }
    let n = pts.len();
    for w in pts.windows(2) {
        if (w[1] - w[0]).norm() < 1e-6 {
            return Err(Error::config(
                "trajectory.points",
                "consecutive waypoints coincide",
            ));
        }
    }
    // Catmull-Rom style tangents scaled to the cruise speed.
    let tangent = |i: usize| -> Vec3 {
        let (prev, next) = if closed {
            let prev = if i == 0 { pts[n - 2] } else { pts[i - 1] };
            let next = if i == n - 1 { pts[1] } else { pts[i + 1] };
            (prev, next)
        } else {
            (pts[i.saturating_sub(1)], pts[(i + 1).min(n - 1)])
        };
        let d = next - prev;
        if d.norm() < 1e-9 {
            (pts[(i + 1).min(n - 1)] - pts[i.saturating_sub(1)]).normalize() * speed
        } else {
            d.normalize() * speed
        }
    };
    let mut t0 = 0.0;
    let mut out = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let duration = (pts[i + 1] - pts[i]).norm() / speed;
        out.push(QuinticSegment::new(
            t0,
            duration,
            pts[i],
            tangent(i),
            pts[i + 1],
            tangent(i + 1),
        ));
        t0 += duration;
    }
    Ok(out)
}

/// Bounded planar patch `corner + α·edge_u + β·edge_v`, `α, β ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rectangle {
    pub corner: Vec3,
    pub edge_u: Vec3,
    pub edge_v: Vec3,
}

impl Rectangle {
    pub fn normal(&self) -> Vec3 {
        self.edge_u.cross(&self.edge_v).normalize()
    }

    /// Ray parameter of the first hit, if any.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let n = self.edge_u.cross(&self.edge_v);
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.corner - origin)) / denom;
        if t <= 0.0 {
            return None;
        }
        let rel = origin + dir * t - self.corner;
        let a = rel.dot(&self.edge_u) / self.edge_u.norm_squared();
        let b = rel.dot(&self.edge_v) / self.edge_v.norm_squared();
        ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some(t)
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        self.normal().dot(&(p - self.corner))
    }

    /// Four vertical walls and a floor enclosing `[min, max]`.
    pub fn room(min: Vec3, max: Vec3) -> Vec<Rectangle> {
        let d = max - min;
        let x = Vec3::new(d.x, 0.0, 0.0);
        let y = Vec3::new(0.0, d.y, 0.0);
        let z = Vec3::new(0.0, 0.0, d.z);
        vec![
            Rectangle {
                corner: min,
                edge_u: x,
                edge_v: y,
            },
            Rectangle {
                corner: min,
                edge_u: x,
                edge_v: z,
            },
            Rectangle {
                corner: min + y,
                edge_u: x,
                edge_v: z,
            },
            Rectangle {
                corner: min,
                edge_u: y,
                edge_v: z,
            },
            Rectangle {
                corner: min + x,
                edge_u: y,
                edge_v: z,
            },
        ]
    }

    /// The four side faces of an axis-aligned box standing on `base_min`.
    pub fn pillar(base_min: Vec3, size: Vec3) -> Vec<Rectangle> {
        let x = Vec3::new(size.x, 0.0, 0.0);
        let y = Vec3::new(0.0, size.y, 0.0);
        let z = Vec3::new(0.0, 0.0, size.z);
        vec![
            Rectangle {
                corner: base_min,
                edge_u: x,
                edge_v: z,
            },
            Rectangle {
                corner: base_min + y,
                edge_u: x,
                edge_v: z,
            },
            Rectangle {
                corner: base_min,
                edge_u: y,
                edge_v: z,
            },
            Rectangle {
                corner: base_min + x,
                edge_u: y,
                edge_v: z,
            },
        ]
    }

    /// Square column of side `width` centered on `(x, y)` and turned by `yaw`.
    pub fn column(x: f64, y: f64, width: f64, height: f64, yaw: f64) -> Vec<Rectangle> {
        let (s, c) = yaw.sin_cos();
        let u = Vec3::new(c, s, 0.0) * width;
        let v = Vec3::new(-s, c, 0.0) * width;
        let z = Vec3::new(0.0, 0.0, height);
        let c0 = Vec3::new(x, y, 0.0) - 0.5 * (u + v);
        vec![
            Rectangle {
                corner: c0,
                edge_u: u,
                edge_v: z,
            },
            Rectangle {
                corner: c0 + v,
                edge_u: u,
                edge_v: z,
            },
            Rectangle {
                corner: c0,
                edge_u: v,
                edge_v: z,
            },
            Rectangle {
                corner: c0 + u,
                edge_u: v,
                edge_v: z,
            },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorRates {
    pub imu_hz: f64,
    pub lidar_hz: f64,
    pub uwb_hz: f64,
}

impl Default for SensorRates {
    fn default() -> Self {
        Self {
            imu_hz: 200.0,
            lidar_hz: 10.0,
            uwb_hz: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuSimConfig {
    pub noise: ImuNoiseModel,
    pub gyro_bias: Vec3,
    pub accel_bias: Vec3,
}

impl Default for ImuSimConfig {
    fn default() -> Self {
        Self {
            noise: ImuNoiseModel::default(),
            gyro_bias: Vec3::new(2e-4, -1e-4, 3e-4),
            accel_bias: Vec3::new(0.01, -0.015, 0.02),
        }
    }
}

/// Rigid mount given as roll/pitch/yaw in degrees plus a translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MountSpec {
    pub rpy_deg: Vec3,
    pub translation: Vec3,
}

impl Default for MountSpec {
    fn default() -> Self {
        Self {
            rpy_deg: Vec3::zeros(),
            translation: Vec3::new(0.1, 0.0, 0.2),
        }
    }
}

impl MountSpec {
    pub fn pose(&self) -> Pose {
        let r = self.rpy_deg.map(f64::to_radians);
        Pose::new(Rotation::from_euler_angles(r.x, r.y, r.z), self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarSimConfig {
    pub enabled: bool,
    /// Full cone angle around the sensor +x axis.
    pub fov_deg: f64,
    pub max_range: f64,
    pub min_range: f64,
    pub rays_per_frame: usize,
    pub noise_sigma: f64,
    /// LiDAR → IMU.
    pub mount: MountSpec,
}

impl Default for LidarSimConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            fov_deg: 70.0,
            max_range: 40.0,
            min_range: 0.3,
            rays_per_frame: 1000,
            noise_sigma: 0.01,
            mount: MountSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UwbSimConfig {
    pub noise_sigma: f64,
    /// Tag position in the IMU frame.
    pub lever_arm: Vec3,
    /// Delay between consecutive anchors inside one ranging cycle, s.
    pub stagger: f64,
    pub dropout_probability: f64,
}

impl Default for UwbSimConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.03,
            lever_arm: Vec3::new(0.0, 0.0, 0.25),
            stagger: 0.0,
            dropout_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub id: u32,
    pub position: Vec3,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub bias: f64,
    /// Chance that any one range from this anchor carries an NLOS offset.
    #[serde(default)]
    pub nlos_probability: f64,
}

fn one() -> f64 {
    1.0
}

/// Horizontal disc in which ranges to the listed anchors suffer NLOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NlosZone {
    /// Affected anchors; empty means all.
    #[serde(default)]
    pub anchors: Vec<u32>,
    pub center: Vec3,
    pub radius: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlosSpec {
    pub offset_min: f64,
    pub offset_max: f64,
    /// Draw the offset sign at random instead of always positive.
    pub symmetric: bool,
    #[serde(rename = "zone")]
    pub zones: Vec<NlosZone>,
}

impl Default for NlosSpec {
    fn default() -> Self {
        Self {
            offset_min: 0.3,
            offset_max: 2.0,
            symmetric: false,
            zones: Vec::new(),
        }
    }
}

/// Everything needed to generate one synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration: f64,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub vertical: Option<VerticalMotion>,
    #[serde(default)]
    pub rates: SensorRates,
    #[serde(default)]
    pub imu: ImuSimConfig,
    #[serde(default)]
    pub lidar: LidarSimConfig,
    #[serde(default)]
    pub uwb: UwbSimConfig,
    #[serde(default, rename = "anchor")]
    pub anchors: Vec<AnchorSpec>,
    #[serde(default, rename = "plane")]
    pub planes: Vec<Rectangle>,
    #[serde(default)]
    pub nlos: NlosSpec,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCENARIO_SCHEMA {
            return Err(Error::config(
                "schema",
                format!("expected `{SCENARIO_SCHEMA}`, found `{}`", self.schema),
            ));
        }
        if !(self.duration > 0.0) {
            return Err(Error::config("duration", "must be positive"));
        }
        let r = &self.rates;
        for (name, v) in [
            ("imu_hz", r.imu_hz),
            ("lidar_hz", r.lidar_hz),
            ("uwb_hz", r.uwb_hz),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(format!("rates.{name}"), "must be positive"));
            }
        }
        self.imu.noise.validate()?;
        if self.lidar.enabled && self.planes.is_empty() {
            return Err(Error::config(
                "plane",
                "LiDAR simulation needs at least one plane",
            ));
        }
        if !(self.lidar.fov_deg > 0.0 && self.lidar.fov_deg < 180.0) {
            return Err(Error::config("lidar.fov_deg", "must lie in (0, 180)"));
        }
        for (i, a) in self.anchors.iter().enumerate() {
            if !(a.scale > 0.0) {
                return Err(Error::config(
                    format!("anchor[{i}].scale"),
                    "must be positive",
                ));
            }
            if !(0.0..=1.0).contains(&a.nlos_probability) {
                return Err(Error::config(
                    format!("anchor[{i}].nlos_probability"),
                    "must lie in [0, 1]",
                ));
            }
        }
        if !(self.nlos.offset_min >= 0.0 && self.nlos.offset_max >= self.nlos.offset_min) {
            return Err(Error::config("nlos", "need 0 <= offset_min <= offset_max"));
        }
        if !(0.0..=1.0).contains(&self.uwb.dropout_probability) {
            return Err(Error::config(
                "uwb.dropout_probability",
                "must lie in [0, 1]",
            ));
        }
        self.anchor_table()?;
        Trajectory::new(&self.trajectory, self.vertical)?;
        Ok(())
    }

    pub fn anchor_table(&self) -> Result<AnchorTable> {
        AnchorTable::new(
            self.anchors
                .iter()
                .map(|a| Anchor {
                    id: a.id,
                    position: a.position,
                })
                .collect(),
        )
    }

    pub fn tag(&self) -> TagExtrinsics {
        TagExtrinsics {
            lever_arm: self.uwb.lever_arm,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// True state at one IMU tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub timestamp: f64,
    pub pose: Pose,
    pub velocity: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub samples: Vec<TruthSample>,
    pub anchors: Vec<AnchorSpec>,
    pub gyro_bias: Vec3,
    pub accel_bias: Vec3,
    pub lidar_extrinsics: Pose,
}

/// One simulated range plus whether an NLOS offset was injected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimRange {
    pub measurement: RangeMeasurement,
    pub nlos: bool,
    /// Geometric distance.
    pub true_range: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub imu: Vec<ImuSample>,
    pub lidar: Vec<PointCloud>,
    pub ranges: Vec<SimRange>,
    /// Ranging cycles that produced at least one range.
    pub uwb_cycles: usize,
    pub truth: GroundTruth,
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn tick_times(rate: f64, duration: f64) -> impl Iterator<Item = (usize, f64)> {
    let n = (duration * rate + 1e-9).floor() as usize;
    (0..=n).map(move |k| (k, k as f64 / rate))
}

/// IMU samples whose zero-order hold over each interval reproduces the
/// sampled truth under strapdown mechanization.
pub fn synth_imu(
    traj: &Trajectory,
    scenario: &Scenario,
) -> Result<(Vec<ImuSample>, Vec<TruthSample>)> {
    let rate = scenario.rates.imu_hz;
    let dt = 1.0 / rate;
    let cfg = &scenario.imu;
    let g = Vec3::new(0.0, 0.0, -cfg.noise.gravity_magnitude);
    let sd_g = cfg.noise.gyro_noise_density * rate.sqrt();
    let sd_a = cfg.noise.accel_noise_density * rate.sqrt();
    let ng = Normal::new(0.0, sd_g).map_err(|e| Error::Parse(e.to_string()))?;
    let na = Normal::new(0.0, sd_a).map_err(|e| Error::Parse(e.to_string()))?;
    let mut rng = substream(scenario.seed, IMU_STREAM);

    let truth: Vec<TruthSample> = tick_times(rate, scenario.duration)
        .map(|(_, t)| TruthSample {
            timestamp: t,
            pose: traj.pose(t),
            velocity: traj.kinematics(t).velocity,
        })
        .collect();
    let mut imu = Vec::with_capacity(truth.len());
    for w in truth.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let omega = log_so3(&(a.pose.rotation.inverse() * b.pose.rotation)) / dt;
        let accel = (b.velocity - a.velocity) / dt;
        let force = a.pose.rotation.inverse() * (accel - g);
        let noise_g = Vec3::from_fn(|_, _| ng.sample(&mut rng));
        let noise_a = Vec3::from_fn(|_, _| na.sample(&mut rng));
        imu.push(ImuSample {
            timestamp: a.timestamp,
            angular_velocity: omega + cfg.gyro_bias + noise_g,
            specific_force: force + cfg.accel_bias + noise_a,
        });
    }
    Ok((imu, truth))
}

/// Uniform direction inside a cone of half-angle `half` around +x.
fn cone_direction(rng: &mut ChaCha8Rng, half: f64) -> Vec3 {
    let cos_t = rng.random_range(half.cos()..=1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    Vec3::new(cos_t, sin_t * phi.cos(), sin_t * phi.sin())
}

/// Ray-cast scans against the scene planes from the true LiDAR pose.
pub fn synth_lidar(traj: &Trajectory, scenario: &Scenario) -> Result<Vec<PointCloud>> {
    let cfg = &scenario.lidar;
    if !cfg.enabled {
        return Ok(Vec::new());
    }
    let mount = cfg.mount.pose();
    let half = cfg.fov_deg.to_radians() / 2.0;
    let noise =
        Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::Parse(e.to_string()))?;
    let mut rng = substream(scenario.seed, LIDAR_STREAM);
    let mut frames = Vec::new();
    for (k, t) in tick_times(scenario.rates.lidar_hz, scenario.duration) {
        if k == 0 {
            continue;
        }
        let sensor = traj.pose(t) * mount;
        let sensor_inv = sensor.inverse();
        let mut points = Vec::with_capacity(cfg.rays_per_frame);
        for _ in 0..cfg.rays_per_frame {
            let d_local = cone_direction(&mut rng, half);
            let dir = sensor.rotation * d_local;
            let hit = scenario
                .planes
                .iter()
                .filter_map(|p| p.intersect(&sensor.translation, &dir))
                .fold(f64::INFINITY, f64::min);
            let jitter = Vec3::from_fn(|_, _| noise.sample(&mut rng));
            if hit >= cfg.min_range && hit <= cfg.max_range {
                let world = sensor.translation + dir * hit;
                points.push(sensor_inv.transform_point(&world) + jitter);
            }
        }
        frames.push(PointCloud::new(t, points)?);
    }
    Ok(frames)
}

/// Ranges `d̂ = s·d + b + n` with NLOS offsets and dropouts.
pub fn synth_uwb(traj: &Trajectory, scenario: &Scenario) -> Result<(Vec<SimRange>, usize)> {
    let cfg = &scenario.uwb;
    let noise =
        Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::Parse(e.to_string()))?;
    let nlos = &scenario.nlos;
    let mut rng = substream(scenario.seed, UWB_STREAM);
    let tag = scenario.tag();
    let mut out = Vec::new();
    let mut cycles = 0;
    for (k, t0) in tick_times(scenario.rates.uwb_hz, scenario.duration) {
        if k == 0 {
            continue;
        }
        let mut emitted = false;
        for (i, a) in scenario.anchors.iter().enumerate() {
            let t = t0 + cfg.stagger * i as f64;
            // Draw every variate unconditionally so one anchor's settings do
            // not shift the others' noise.
            let dropped = rng.random_bool(cfg.dropout_probability);
            let n = noise.sample(&mut rng);
            let u_nlos: f64 = rng.random();
            let offset = rng.random_range(nlos.offset_min..=nlos.offset_max);
            let negative = rng.random_bool(0.5);
            if dropped || t > scenario.duration {
                continue;
            }
            let tag_w = traj.pose(t).transform_point(&tag.lever_arm);
            let d = (tag_w - a.position).norm();
            let zone_p = nlos
                .zones
                .iter()
                .filter(|z| z.anchors.is_empty() || z.anchors.contains(&a.id))
                .filter(|z| (tag_w.xy() - z.center.xy()).norm() <= z.radius)
                .map(|z| z.probability)
                .fold(0.0, f64::max);
            let p = a.nlos_probability.max(zone_p);
            let is_nlos = u_nlos < p;
            let mut range = a.scale * d + a.bias + n;
            if is_nlos {
                range += if nlos.symmetric && negative {
                    -offset
                } else {
                    offset
                };
            }
            if range <= 0.0 {
                continue;
            }
            out.push(SimRange {
                measurement: RangeMeasurement::new(t, a.id, range)?,
                nlos: is_nlos,
                true_range: d,
            });
            emitted = true;
        }
        if emitted {
            cycles += 1;
        }
    }
    out.sort_by(|a, b| a.measurement.timestamp.total_cmp(&b.measurement.timestamp));
    Ok((out, cycles))
}

pub fn simulate(scenario: &Scenario) -> Result<SimOutput> {
    scenario.validate()?;
    let traj = Trajectory::new(&scenario.trajectory, scenario.vertical)?;
    let (imu, samples) = synth_imu(&traj, scenario)?;
    let lidar = synth_lidar(&traj, scenario)?;
    let (ranges, uwb_cycles) = synth_uwb(&traj, scenario)?;
    Ok(SimOutput {
        imu,
        lidar,
        ranges,
        uwb_cycles,
        truth: GroundTruth {
            samples,
            anchors: scenario.anchors.clone(),
            gyro_bias: scenario.imu.gyro_bias,
            accel_bias: scenario.imu.accel_bias,
            lidar_extrinsics: scenario.lidar.mount.pose(),
        },
    })
}

/// Ready-made scenarios.
pub mod presets {
    use super::*;

    /// Anchors at the corners of a 22 × 24 m rectangle.
    pub fn corner_anchors() -> Vec<AnchorSpec> {
        let corners = [
            (0, -11.0, -12.0, 2.8),
            (1, 11.0, -12.0, 2.6),
            (2, 11.0, 12.0, 0.4),
            (3, -11.0, 12.0, 0.2),
        ];
        corners
            .iter()
            .map(|&(id, x, y, z)| AnchorSpec {
                id,
                position: Vec3::new(x, y, z),
                scale: 1.0,
                bias: 0.0,
                nlos_probability: 0.0,
            })
            .collect()
    }

    /// Enclosed hall with a few pillars.
    /// Centers and yaw angles (degrees) of the 0.8 m columns in [`hall`].
    pub const HALL_COLUMNS: [(f64, f64, f64); 16] = [
        (-0.6, -3.6, 30.0),
        (3.4, -3.6, 45.0),
        (1.4, 4.4, 60.0),
        (-0.6, 2.4, 20.0),
        (5.4, 0.4, 45.0),
        (-4.6, 6.4, 35.0),
        (5.4, 6.4, 55.0),
        (-6.6, -5.6, 40.0),
        (-4.6, -7.6, 25.0),
        (1.4, -12.6, 45.0),
        (-6.6, 4.4, 50.0),
        (-8.6, 12.4, 30.0),
        (9.4, 10.4, 45.0),
        (-10.6, 0.4, 60.0),
        (11.4, -5.6, 30.0),
        (-2.6, 10.4, 40.0),
    ];

    pub fn hall() -> Vec<Rectangle> {
        let mut planes = Rectangle::room(Vec3::new(-14.0, -15.0, 0.0), Vec3::new(14.0, 15.0, 4.0));
        for (x, y, yaw) in HALL_COLUMNS {
            planes.extend(Rectangle::column(x, y, 0.8, 3.0, yaw.to_radians()));
        }
        for (min, size) in [
            ((-11.0, -6.0), (0.6, 3.0, 1.5)),
            ((11.0, 2.0), (0.6, 2.5, 1.2)),
            ((-3.0, 12.0), (3.0, 0.6, 2.0)),
            ((3.0, -12.0), (2.5, 0.6, 1.8)),
        ] {
            planes.extend(Rectangle::pillar(
                Vec3::new(min.0, min.1, 0.0),
                Vec3::new(size.0, size.1, size.2),
            ));
        }
        planes
    }

    fn base(name: &str, seed: u64, duration: f64, trajectory: TrajectorySpec) -> Scenario {
        Scenario {
            schema: SCENARIO_SCHEMA.to_string(),
            name: name.to_string(),
            seed,
            duration,
            trajectory,
            vertical: None,
            rates: SensorRates::default(),
            imu: ImuSimConfig::default(),
            lidar: LidarSimConfig::default(),
            uwb: UwbSimConfig::default(),
            anchors: corner_anchors(),
            planes: hall(),
            nlos: NlosSpec::default(),
        }
    }

    pub fn figure_eight_path() -> TrajectorySpec {
        TrajectorySpec::FigureEight {
            center: Vec3::new(0.0, 0.0, 0.3),
            half_length: 8.0,
            width: 5.0,
            max_speed: 1.5,
        }
    }

    pub fn circle_path() -> TrajectorySpec {
        TrajectorySpec::Circle {
            center: Vec3::new(1.0, 0.0, 0.3),
            radius: 6.0,
            speed: 1.5,
        }
    }

    pub fn loop_path() -> TrajectorySpec {
        TrajectorySpec::Waypoints {
            points: vec![
                Vec3::new(-8.0, -9.0, 0.3),
                Vec3::new(8.0, -9.0, 0.3),
                Vec3::new(9.0, 0.0, 0.3),
                Vec3::new(8.0, 9.0, 0.3),
                Vec3::new(-2.0, 8.0, 0.3),
                Vec3::new(-9.0, 9.0, 0.3),
                Vec3::new(-9.0, 0.0, 0.3),
            ],
            speed: 1.1,
            closed: true,
        }
    }

    /// Clean line-of-sight figure-eight.
    pub fn los(seed: u64) -> Scenario {
        base("los-figure-eight", seed, 120.0, figure_eight_path())
    }

    /// Systematic range errors on every anchor, no outliers.
    pub fn systematic(seed: u64) -> Scenario {
        let mut s = base("systematic-figure-eight", seed, 120.0, figure_eight_path());
        for a in &mut s.anchors {
            a.scale = 1.01;
            a.bias = 0.2;
        }
        s.vertical = Some(VerticalMotion {
            amplitude: 0.2,
            period: 9.0,
        });
        s
    }

    /// Systematic errors plus NLOS outliers: one anchor behind an obstacle
    /// part of the time and random outliers elsewhere.
    pub fn nlos(seed: u64, path: TrajectorySpec, name: &str, duration: f64) -> Scenario {
        let mut s = base(name, seed, duration, path);
        let models = [(1.004, 0.10), (0.996, -0.08), (1.006, 0.12), (0.995, -0.10)];
        for (a, (scale, bias)) in s.anchors.iter_mut().zip(models) {
            a.scale = scale;
            a.bias = bias;
            a.nlos_probability = 0.25;
        }
        s.nlos.zones.push(NlosZone {
            anchors: vec![2],
            center: Vec3::new(4.0, 4.0, 0.0),
            radius: 5.0,
            probability: 0.8,
        });
        s.nlos.zones.push(NlosZone {
            anchors: vec![0],
            center: Vec3::new(-5.0, -4.0, 0.0),
            radius: 4.0,
            probability: 0.8,
        });
        s
    }

    /// One wall and the floor; the along-wall direction is unobservable
    /// for LiDAR.
    pub fn wall_degenerate(seed: u64) -> Scenario {
        let mut s = base(
            "wall-degenerate",
            seed,
            120.0,
            TrajectorySpec::Circle {
                center: Vec3::new(0.0, 0.0, 0.3),
                radius: 4.0,
                speed: 1.5,
            },
        );
        s.planes = vec![
            Rectangle {
                corner: Vec3::new(-40.0, -40.0, 0.0),
                edge_u: Vec3::new(80.0, 0.0, 0.0),
                edge_v: Vec3::new(0.0, 80.0, 0.0),
            },
            Rectangle {
                corner: Vec3::new(8.0, -40.0, 0.0),
                edge_u: Vec3::new(0.0, 80.0, 0.0),
                edge_v: Vec3::new(0.0, 0.0, 6.0),
            },
        ];
        s
    }

    /// Looks a preset up by name.
    pub fn by_name(name: &str, seed: u64) -> Option<Scenario> {
        Some(match name {
            "los" => los(seed),
            "systematic" => systematic(seed),
            "nlos-figure-eight" => nlos(seed, figure_eight_path(), name, 90.0),
            "nlos-circle" => nlos(seed, circle_path(), name, 90.0),
            "nlos-loop" => nlos(seed, loop_path(), name, 90.0),
            "wall-degenerate" => wall_degenerate(seed),
            _ => return None,
        })
    }

    pub const NAMES: [&str; 6] = [
        "los",
        "systematic",
        "nlos-figure-eight",
        "nlos-circle",
        "nlos-loop",
        "wall-degenerate",
    ];
}
