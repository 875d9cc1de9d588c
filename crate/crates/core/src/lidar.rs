//! Frame-to-frame LiDAR constraints: keyframe selection, keyframe maps,
//! point-to-plane association and its linearization.
//!
//! Keyframe maps are stored in the LiDAR frame of their keyframe. A current
//! point `p` is carried into keyframe `k` by
//! `p̄ = (T_k T_l)⁻¹ (T_b T_l) p`, with `T_b` the current IMU pose, `T_k` the
//! cloned IMU pose of keyframe `k` and `T_l` the LiDAR → IMU extrinsics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_angle, skew, Mat3, Pose, Vec3};
use crate::kdtree::{KdTree, NeighborSearch};
use crate::msckf::{layout, CloneKind, FilterState, JacobianBlock, MeasurementRow};

/// Number of neighbors used to fit each plane.
pub const PLANE_NEIGHBORS: usize = 5;

/// One scan, points in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub timestamp: f64,
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(timestamp: f64, points: Vec<Vec3>) -> Result<Self> {
        if !timestamp.is_finite() || points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(Self { timestamp, points })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyframeThresholds {
    pub translation_m: f64,
    pub rotation_deg: f64,
    pub interval_s: f64,
}

impl Default for KeyframeThresholds {
    fn default() -> Self {
        Self {
            translation_m: 0.5,
            rotation_deg: 10.0,
            interval_s: 0.5,
        }
    }
}

/// True when the motion or elapsed time since the last keyframe exceeds a
/// threshold.
pub fn select_keyframe(
    current: &Pose,
    last_keyframe: &Pose,
    dt_since_keyframe: f64,
    thresholds: &KeyframeThresholds,
) -> bool {
    let rel = last_keyframe.between(current);
    rel.translation.norm() > thresholds.translation_m
        || rotation_angle(&rel.rotation) > thresholds.rotation_deg.to_radians()
        || dt_since_keyframe > thresholds.interval_s
}

/// Expresses a point given in the `pose_cur` frame in the `pose_k` frame.
pub fn project_point(p: &Vec3, pose_cur: &Pose, pose_k: &Pose) -> Vec3 {
    pose_k.rotation.inverse() * (pose_cur.rotation * p + pose_cur.translation - pose_k.translation)
}

/// `nᵀx + d = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }
}

/// Ratio of the middle to the largest singular value of the centered points
/// below which the points are treated as collinear.
pub const PLANE_DEGENERACY_RATIO: f64 = 0.1;

/// Ratio of the smallest to the middle singular value above which the
/// points do not lie on one plane.
pub const PLANE_THICKNESS_RATIO: f64 = 0.25;

/// Least-squares plane through a handful of points.
pub fn fit_plane(points: &[Vec3]) -> Result<Plane> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry("fewer than three points"));
    }
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut scatter = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let s_max = eig.eigenvalues[idx[2]].max(0.0).sqrt();
    let s_mid = eig.eigenvalues[idx[1]].max(0.0).sqrt();
    if s_max <= f64::EPSILON * (1.0 + centroid.norm()) {
        return Err(Error::DegenerateGeometry("coincident points"));
    }
    if s_mid < PLANE_DEGENERACY_RATIO * s_max {
        return Err(Error::DegenerateGeometry("collinear points"));
    }
    let s_min = eig.eigenvalues[idx[0]].max(0.0).sqrt();
    if s_min > PLANE_THICKNESS_RATIO * s_mid {
        return Err(Error::DegenerateGeometry("no unique plane"));
    }
    let normal = eig.eigenvectors.column(idx[0]).normalize();
    Ok(Plane {
        normal,
        offset: -normal.dot(&centroid),
    })
}

/// A keyframe's point map and the clone holding its pose.
#[derive(Debug, Clone)]
pub struct LidarKeyframe {
    pub timestamp: f64,
    pub clone_id: u64,
    index: KdTree,
}

impl LidarKeyframe {
    pub fn new(timestamp: f64, clone_id: u64, points: Vec<Vec3>) -> Self {
        Self {
            timestamp,
            clone_id,
            index: KdTree::new(points),
        }
    }

    pub fn points(&self) -> &[Vec3] {
        self.index.points()
    }

    pub fn index(&self) -> &KdTree {
        &self.index
    }

    /// Merges a non-keyframe scan into this map. Both poses are LiDAR poses
    /// in the world frame.
    pub fn absorb(&mut self, scan: &[Vec3], scan_pose: &Pose, keyframe_pose: &Pose) {
        let mut points = self.index.points().to_vec();
        points.extend(
            scan.iter()
                .map(|p| project_point(p, scan_pose, keyframe_pose)),
        );
        self.index = KdTree::new(points);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    /// Current points are uniformly subsampled to at most this many.
    pub max_candidates: usize,
    /// Most recent keyframes used as targets; `None` uses the whole window.
    pub max_targets: Option<usize>,
    /// Every neighbor and the projected point must lie closer than this to
    /// the fitted plane.
    pub plane_gate_m: f64,
    /// Only accept points whose in-plane projection falls inside the convex
    /// hull of their neighbors.
    pub require_enclosure: bool,
    pub noise_sigma_m: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            max_candidates: 1000,
            max_targets: None,
            plane_gate_m: 0.1,
            require_enclosure: true,
            noise_sigma_m: 0.05,
        }
    }
}

/// A current point matched to a plane of keyframe `clone_id`'s map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Association {
    /// In the current LiDAR frame.
    pub point: Vec3,
    pub clone_id: u64,
    /// In keyframe `clone_id`'s LiDAR frame.
    pub plane: Plane,
    /// Largest of the six point-to-plane distances checked by the gate.
    pub max_distance: f64,
}

/// Evenly spaced indices, at most `max` of `n`.
pub fn subsample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

/// Associates the current scan with the keyframe maps of the window. The
/// current LiDAR pose comes from the navigation state.
pub fn associate(
    current: &PointCloud,
    window: &[LidarKeyframe],
    state: &FilterState,
    config: &AssociationConfig,
) -> Result<Vec<Association>> {
    let targets: Vec<(u64, &dyn NeighborSearch)> = window
        .iter()
        .map(|kf| (kf.clone_id, kf.index() as &dyn NeighborSearch))
        .collect();
    associate_with(&current.points, &targets, state, config)
}

/// [`associate`] over arbitrary neighbor searchers, in window order.
pub fn associate_with(
    points: &[Vec3],
    targets: &[(u64, &dyn NeighborSearch)],
    state: &FilterState,
    config: &AssociationConfig,
) -> Result<Vec<Association>> {
    let skip = config
        .max_targets
        .map_or(0, |cap| targets.len().saturating_sub(cap));
    let current_lidar = state.nav.pose() * state.lidar_extrinsics;
    let candidates = subsample_indices(points.len(), config.max_candidates);
    let mut out = Vec::new();
    for &(clone_id, search) in &targets[skip..] {
        if search.len() < PLANE_NEIGHBORS {
            continue;
        }
        let (clone_pose, _) = state.clone_pose(CloneKind::Lidar, clone_id)?;
        let kf_lidar = clone_pose * state.lidar_extrinsics;
        let rel = kf_lidar.between(&current_lidar);
        for &i in &candidates {
            let p = points[i];
            let projected = rel.transform_point(&p);
            let nn = search.nearest(&projected, PLANE_NEIGHBORS);
            let neighbors: Vec<Vec3> = nn.iter().map(|&(_, j)| search.point(j)).collect();
            let Ok(plane) = fit_plane(&neighbors) else {
                continue;
            };
            if config.require_enclosure && !encloses(&plane, &neighbors, &projected) {
                continue;
            }
            let max_distance = neighbors
                .iter()
                .chain(std::iter::once(&projected))
                .map(|q| plane.signed_distance(q).abs())
                .fold(0.0, f64::max);
            if max_distance < config.plane_gate_m {
                out.push(Association {
                    point: p,
                    clone_id,
                    plane,
                    max_distance,
                });
            }
        }
    }
    Ok(out)
}

/// Whether the projection of `p` onto `plane` lies inside the convex hull of
/// the projected `neighbors`, i.e. inside one of their triangles.
pub fn encloses(plane: &Plane, neighbors: &[Vec3], p: &Vec3) -> bool {
    let n = plane.normal;
    let u = n
        .cross(&if n.x.abs() < 0.9 {
            Vec3::x()
        } else {
            Vec3::y()
        })
        .normalize();
    let v = n.cross(&u);
    let flat = |q: &Vec3| (q.dot(&u), q.dot(&v));
    let pts: Vec<(f64, f64)> = neighbors.iter().map(flat).collect();
    let (px, py) = flat(p);
    let scale = pts
        .iter()
        .map(|&(x, y)| (x - px).abs().max((y - py).abs()))
        .fold(0.0, f64::max);
    let tol = 1e-9 * scale * scale;
    let cross = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
                if area.abs() <= tol {
                    continue;
                }
                let s = area.signum();
                if s * cross(a, b) >= -tol && s * cross(b, c) >= -tol && s * cross(c, a) >= -tol {
                    return true;
                }
            }
        }
    }
    false
}

/// Point-to-plane residual `r = nᵀp̄ + d` and its Jacobian row. The row
/// follows the `r ≈ H·δx` convention, so `H = -∂r/∂δx`.
pub fn lidar_residual_jacobian(
    assoc: &Association,
    state: &FilterState,
    noise_sigma: f64,
) -> Result<MeasurementRow> {
    let (clone_pose, clone_offset) = state.clone_pose(CloneKind::Lidar, assoc.clone_id)?;
    let r_b = state.nav.attitude.matrix();
    let r_l = state.lidar_extrinsics.rotation.matrix();
    let p_l = state.lidar_extrinsics.translation;
    let r_k = clone_pose.rotation.matrix();
    let p = assoc.point;

    let q = r_l * p + p_l; // current IMU frame
    let w = r_b * q + state.nav.position;
    let u = r_k.transpose() * (w - clone_pose.translation); // keyframe IMU frame
    let p_bar = r_l.transpose() * (u - p_l);
    let residual = assoc.plane.signed_distance(&p_bar);

    let n = assoc.plane.normal;
    let m = r_l.transpose() * r_k.transpose();
    let nt = |a: Mat3| -(n.transpose() * a);
    let d_theta_b = nt(-m * r_b * skew(&q));
    let d_p_b = nt(m);
    let d_theta_l = nt(-m * r_b * r_l * skew(&p) + skew(&p_bar));
    let d_p_l = nt(m * r_b - r_l.transpose());
    let d_theta_k = nt(r_l.transpose() * skew(&u));
    let d_p_k = nt(-m);

    let block =
        |col: usize, a: nalgebra::RowVector3<f64>, b: nalgebra::RowVector3<f64>| JacobianBlock {
            col,
            values: vec![a[0], a[1], a[2], b[0], b[1], b[2]],
        };
    Ok(MeasurementRow {
        residual,
        noise_var: noise_sigma * noise_sigma,
        blocks: vec![
            block(layout::NAV_ATT, d_theta_b, d_p_b),
            block(layout::EXT_ATT, d_theta_l, d_p_l),
            block(clone_offset, d_theta_k, d_p_k),
        ],
    })
}
