//! Error-state layout, pose-clone bookkeeping and the generic ESKF update.
//!
//! Error-state ordering:
//!
//! ```text
//! [ δθ_b δp_b δv δb_g δb_a | δθ_l δp_l | δs_1..δs_q δb_1..δb_q | LiDAR clones | UWB clones ]
//!   0                   15   15     21   21            21+2q     6 each         6 each
//! ```
//!
//! Each clone contributes `[δθ_k, δp_k]` of an IMU pose at its timestamp.

use std::collections::VecDeque;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::geometry::{Manifold, Pose};
use crate::ins::NavState;

/// Fixed offsets of the error-state layout.
pub mod layout {
    pub const NAV_ATT: usize = 0;
    pub const NAV_POS: usize = 3;
    pub const NAV_VEL: usize = 6;
    pub const NAV_BG: usize = 9;
    pub const NAV_BA: usize = 12;
    pub const NAV_DIM: usize = 15;
    pub const EXT_ATT: usize = 15;
    pub const EXT_POS: usize = 18;
    /// Navigation + extrinsics.
    pub const FIXED_DIM: usize = 21;
    pub const CLONE_DIM: usize = 6;

    pub const fn scale(anchor_slot: usize) -> usize {
        FIXED_DIM + anchor_slot
    }

    pub const fn bias(num_anchors: usize, anchor_slot: usize) -> usize {
        FIXED_DIM + num_anchors + anchor_slot
    }
}

/// Which sliding window a clone belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CloneKind {
    Lidar,
    Uwb,
}

impl CloneKind {
    fn name(self) -> &'static str {
        match self {
            CloneKind::Lidar => "LiDAR",
            CloneKind::Uwb => "UWB",
        }
    }
}

/// IMU pose snapshot held in the state vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseClone {
    /// Unique for the lifetime of a [`FilterState`]; never reused.
    pub id: u64,
    pub timestamp: f64,
    pub pose: Pose,
}

/// Per-anchor systematic range error, `d̂ = s·d + b + n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeErrorModel {
    pub scale: f64,
    pub bias: f64,
}

impl Default for RangeErrorModel {
    fn default() -> Self {
        Self {
            scale: 1.0,
            bias: 0.0,
        }
    }
}

/// Offsets of every block for a given set of window occupancies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErrorLayout {
    pub num_anchors: usize,
    pub num_lidar_clones: usize,
    pub num_uwb_clones: usize,
}

impl ErrorLayout {
    pub fn dim(&self) -> usize {
        layout::FIXED_DIM
            + 2 * self.num_anchors
            + layout::CLONE_DIM * (self.num_lidar_clones + self.num_uwb_clones)
    }

    pub fn lidar_clone(&self, k: usize) -> usize {
        layout::FIXED_DIM + 2 * self.num_anchors + layout::CLONE_DIM * k
    }

    pub fn uwb_clone(&self, j: usize) -> usize {
        self.lidar_clone(self.num_lidar_clones) + layout::CLONE_DIM * j
    }

    /// Upper bound on the dimension for full windows.
    pub fn bound(num_anchors: usize, max_lidar: usize, max_uwb: usize) -> usize {
        ErrorLayout {
            num_anchors,
            num_lidar_clones: max_lidar,
            num_uwb_clones: max_uwb,
        }
        .dim()
    }

    /// Every error-state symbol with its index range, in layout order.
    pub fn audit(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("dtheta_b".to_string(), 0..3),
            ("dp_b".to_string(), 3..6),
            ("dv".to_string(), 6..9),
            ("db_g".to_string(), 9..12),
            ("db_a".to_string(), 12..15),
            ("dtheta_l".to_string(), 15..18),
            ("dp_l".to_string(), 18..21),
        ];
        let q = self.num_anchors;
        for i in 0..q {
            out.push((format!("ds_{i}"), layout::scale(i)..layout::scale(i) + 1));
        }
        for i in 0..q {
            out.push((
                format!("db_u{i}"),
                layout::bias(q, i)..layout::bias(q, i) + 1,
            ));
        }
        for k in 0..self.num_lidar_clones {
            let o = self.lidar_clone(k);
            out.push((format!("dtheta_kf{k}"), o..o + 3));
            out.push((format!("dp_kf{k}"), o + 3..o + 6));
        }
        for j in 0..self.num_uwb_clones {
            let o = self.uwb_clone(j);
            out.push((format!("dtheta_u{j}"), o..o + 3));
            out.push((format!("dp_u{j}"), o + 3..o + 6));
        }
        out
    }
}

/// Initial standard deviations for a new filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialUncertainty {
    pub attitude: f64,
    pub position: f64,
    pub velocity: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
    pub extrinsic_attitude: f64,
    pub extrinsic_position: f64,
    pub range_scale: f64,
    pub range_bias: f64,
}

impl Default for InitialUncertainty {
    fn default() -> Self {
        Self {
            attitude: 0.01,
            position: 0.05,
            velocity: 0.05,
            gyro_bias: 1e-3,
            accel_bias: 0.05,
            extrinsic_attitude: 2e-3,
            extrinsic_position: 5e-3,
            range_scale: 0.01,
            range_bias: 0.2,
        }
    }
}

/// Full MSCKF estimate and covariance.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub timestamp: f64,
    pub nav: NavState,
    /// LiDAR → IMU.
    pub lidar_extrinsics: Pose,
    /// Anchor ids in slot order; slot `i` owns `ds_i` and `db_u_i`.
    pub anchor_ids: Vec<u32>,
    pub anchor_models: Vec<RangeErrorModel>,
    /// When false the scale/bias states stay frozen at their current values.
    pub range_states_active: bool,
    pub lidar_clones: VecDeque<PoseClone>,
    pub uwb_clones: VecDeque<PoseClone>,
    pub max_lidar_clones: usize,
    pub max_uwb_clones: usize,
    pub covariance: DMatrix<f64>,
    next_clone_id: u64,
}

impl FilterState {
    pub fn new(
        nav: NavState,
        lidar_extrinsics: Pose,
        anchor_ids: &[u32],
        max_lidar_clones: usize,
        max_uwb_clones: usize,
        prior: &InitialUncertainty,
        range_states_active: bool,
    ) -> Self {
        let q = anchor_ids.len();
        let dim = layout::FIXED_DIM + 2 * q;
        let mut diag = vec![0.0; dim];
        let mut fill = |start: usize, len: usize, sigma: f64| {
            for v in &mut diag[start..start + len] {
                *v = sigma * sigma;
            }
        };
        fill(layout::NAV_ATT, 3, prior.attitude);
        fill(layout::NAV_POS, 3, prior.position);
        fill(layout::NAV_VEL, 3, prior.velocity);
        fill(layout::NAV_BG, 3, prior.gyro_bias);
        fill(layout::NAV_BA, 3, prior.accel_bias);
        fill(layout::EXT_ATT, 3, prior.extrinsic_attitude);
        fill(layout::EXT_POS, 3, prior.extrinsic_position);
        if range_states_active {
            fill(layout::scale(0), q, prior.range_scale);
            fill(layout::bias(q, 0), q, prior.range_bias);
        }
        Self {
            timestamp: 0.0,
            nav,
            lidar_extrinsics,
            anchor_ids: anchor_ids.to_vec(),
            anchor_models: vec![RangeErrorModel::default(); q],
            range_states_active,
            lidar_clones: VecDeque::new(),
            uwb_clones: VecDeque::new(),
            max_lidar_clones,
            max_uwb_clones,
            covariance: DMatrix::from_diagonal(&DVector::from_vec(diag)),
            next_clone_id: 0,
        }
    }

    pub fn with_default_prior(
        nav: NavState,
        lidar_extrinsics: Pose,
        anchor_ids: &[u32],
        max_lidar_clones: usize,
        max_uwb_clones: usize,
    ) -> Self {
        Self::new(
            nav,
            lidar_extrinsics,
            anchor_ids,
            max_lidar_clones,
            max_uwb_clones,
            &InitialUncertainty::default(),
            true,
        )
    }

    pub fn layout(&self) -> ErrorLayout {
        ErrorLayout {
            num_anchors: self.anchor_ids.len(),
            num_lidar_clones: self.lidar_clones.len(),
            num_uwb_clones: self.uwb_clones.len(),
        }
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn anchor_slot(&self, anchor_id: u32) -> Option<usize> {
        self.anchor_ids.iter().position(|&a| a == anchor_id)
    }

    fn clones(&self, kind: CloneKind) -> &VecDeque<PoseClone> {
        match kind {
            CloneKind::Lidar => &self.lidar_clones,
            CloneKind::Uwb => &self.uwb_clones,
        }
    }

    fn max_clones(&self, kind: CloneKind) -> usize {
        match kind {
            CloneKind::Lidar => self.max_lidar_clones,
            CloneKind::Uwb => self.max_uwb_clones,
        }
    }

    pub fn is_window_full(&self, kind: CloneKind) -> bool {
        self.clones(kind).len() >= self.max_clones(kind)
    }

    /// Position of a clone within its window and its error-state offset.
    pub fn find_clone(&self, kind: CloneKind, id: u64) -> Result<(usize, usize)> {
        let layout = self.layout();
        let k = self
            .clones(kind)
            .iter()
            .position(|c| c.id == id)
            .ok_or(Error::StaleClone(id))?;
        let offset = match kind {
            CloneKind::Lidar => layout.lidar_clone(k),
            CloneKind::Uwb => layout.uwb_clone(k),
        };
        Ok((k, offset))
    }

    pub fn clone_pose(&self, kind: CloneKind, id: u64) -> Result<(Pose, usize)> {
        let (k, offset) = self.find_clone(kind, id)?;
        Ok((self.clones(kind)[k].pose, offset))
    }

    /// Appends the current IMU pose as a clone and augments the covariance
    /// with `P' = [I; J] P [I; J]ᵀ`, `J` selecting the IMU pose error.
    pub fn augment_clone(&mut self, kind: CloneKind, timestamp: f64) -> Result<u64> {
        if self.is_window_full(kind) {
            return Err(Error::WindowFull(kind.name()));
        }
        if let Some(last) = self.clones(kind).back() {
            if timestamp < last.timestamp {
                return Err(Error::config(
                    "clone.timestamp",
                    "clones must be appended in time order",
                ));
            }
        }
        let layout = self.layout();
        let insert_at = match kind {
            CloneKind::Lidar => layout.uwb_clone(0),
            CloneKind::Uwb => layout.dim(),
        };
        let n = self.dim();
        let mut j = DMatrix::zeros(layout::CLONE_DIM, n);
        for i in 0..layout::CLONE_DIM {
            j[(i, layout::NAV_ATT + i)] = 1.0;
        }
        self.covariance = augment_covariance(&self.covariance, &j, insert_at);

        let clone = PoseClone {
            id: self.next_clone_id,
            timestamp,
            pose: self.nav.pose(),
        };
        self.next_clone_id += 1;
        match kind {
            CloneKind::Lidar => self.lidar_clones.push_back(clone),
            CloneKind::Uwb => self.uwb_clones.push_back(clone),
        }
        Ok(clone.id)
    }

    /// Drops the oldest clone of `kind` together with its covariance rows and
    /// columns. Remaining entries are copied unchanged.
    pub fn marginalize_oldest(&mut self, kind: CloneKind) -> Result<PoseClone> {
        let layout = self.layout();
        let (clone, offset) = match kind {
            CloneKind::Lidar => (self.lidar_clones.front(), layout.lidar_clone(0)),
            CloneKind::Uwb => (self.uwb_clones.front(), layout.uwb_clone(0)),
        };
        let clone = *clone.ok_or(Error::EmptyWindow(kind.name()))?;
        let p = std::mem::replace(&mut self.covariance, DMatrix::zeros(0, 0));
        self.covariance = p
            .remove_rows(offset, layout::CLONE_DIM)
            .remove_columns(offset, layout::CLONE_DIM);
        match kind {
            CloneKind::Lidar => self.lidar_clones.pop_front(),
            CloneKind::Uwb => self.uwb_clones.pop_front(),
        };
        Ok(clone)
    }

    /// Folds an error-state estimate into the nominal state with `⊞`.
    pub fn apply_correction(&mut self, dx: &DVector<f64>) -> Result<()> {
        let layout = self.layout();
        if dx.len() != layout.dim() {
            return Err(Error::DimensionMismatch {
                expected: layout.dim(),
                got: dx.len(),
            });
        }
        let d = dx.as_slice();
        self.nav = self.nav.boxplus(&d[0..layout::NAV_DIM])?;
        self.lidar_extrinsics = self
            .lidar_extrinsics
            .boxplus(&d[layout::EXT_ATT..layout::FIXED_DIM])?;
        let q = layout.num_anchors;
        if self.range_states_active {
            for (i, m) in self.anchor_models.iter_mut().enumerate() {
                m.scale += d[layout::scale(i)];
                m.bias += d[layout::bias(q, i)];
            }
        }
        for (k, c) in self.lidar_clones.iter_mut().enumerate() {
            let o = layout.lidar_clone(k);
            c.pose = c.pose.boxplus(&d[o..o + 6])?;
        }
        for (j, c) in self.uwb_clones.iter_mut().enumerate() {
            let o = layout.uwb_clone(j);
            c.pose = c.pose.boxplus(&d[o..o + 6])?;
        }
        Ok(())
    }

    pub(crate) fn check_covariance_cheap(&self) -> Result<()> {
        let p = &self.covariance;
        let expected = self.layout().dim();
        if p.nrows() != expected || p.ncols() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: p.nrows(),
            });
        }
        let mut min_diag = f64::INFINITY;
        for i in 0..p.nrows() {
            let d = p[(i, i)];
            if !d.is_finite() {
                return Err(Error::NonFinite("covariance"));
            }
            min_diag = min_diag.min(d);
        }
        if min_diag < -1e-10 {
            return Err(Error::NotPsd(min_diag));
        }
        Ok(())
    }

    /// Largest absolute difference between `P` and `Pᵀ`.
    pub fn asymmetry(&self) -> f64 {
        let p = &self.covariance;
        let mut worst = 0.0f64;
        for i in 0..p.nrows() {
            for j in (i + 1)..p.ncols() {
                worst = worst.max((p[(i, j)] - p[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (&self.covariance + self.covariance.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }

    /// `true` when `P + tol·I` admits a Cholesky factorization, i.e. every
    /// eigenvalue of the symmetric part exceeds `-tol`.
    pub fn is_psd_within(&self, tol: f64) -> bool {
        let n = self.dim();
        let sym = (&self.covariance + self.covariance.transpose()) * 0.5
            + DMatrix::<f64>::identity(n, n) * tol;
        sym.cholesky().is_some()
    }
}

/// `[I; J] P [I; J]ᵀ` with the six new rows/columns inserted at `at`.
pub fn augment_covariance(p: &DMatrix<f64>, j: &DMatrix<f64>, at: usize) -> DMatrix<f64> {
    let n = p.nrows();
    let m = j.nrows();
    assert_eq!(j.ncols(), n, "augmentation Jacobian must span the state");
    assert!(at <= n);
    let jp = j * p;
    let jpj = &jp * j.transpose();
    let mut out = DMatrix::zeros(n + m, n + m);
    let map = |i: usize| if i < at { i } else { i + m };
    for c in 0..n {
        let mc = map(c);
        for r in 0..n {
            out[(map(r), mc)] = p[(r, c)];
        }
        for r in 0..m {
            out[(at + r, mc)] = jp[(r, c)];
            out[(mc, at + r)] = jp[(r, c)];
        }
    }
    for r in 0..m {
        for c in 0..m {
            out[(at + r, at + c)] = 0.5 * (jpj[(r, c)] + jpj[(c, r)]);
        }
    }
    out
}

/// Contiguous run of nonzero Jacobian entries starting at column `col`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlock {
    pub col: usize,
    pub values: Vec<f64>,
}

/// One scalar measurement: `r ≈ H·δx + n`, `n ~ N(0, noise_var)`.
///
/// `H` is the derivative of the predicted measurement, so `H = -∂r/∂δx`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRow {
    pub residual: f64,
    pub noise_var: f64,
    pub blocks: Vec<JacobianBlock>,
}

impl MeasurementRow {
    pub fn dot(&self, v: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                b.values
                    .iter()
                    .enumerate()
                    .map(|(i, h)| h * v[b.col + i])
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn dense(&self, dim: usize) -> DVector<f64> {
        let mut out = DVector::zeros(dim);
        for b in &self.blocks {
            for (i, h) in b.values.iter().enumerate() {
                out[b.col + i] += h;
            }
        }
        out
    }

    fn max_col(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.col + b.values.len())
            .max()
            .unwrap_or(0)
    }
}

/// Stacked scalar rows with mutually uncorrelated noise.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearizedMeasurement {
    pub rows: Vec<MeasurementRow>,
}

impl LinearizedMeasurement {
    pub fn new(rows: Vec<MeasurementRow>) -> Self {
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn residuals(&self) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.residual))
    }

    pub fn dense_jacobian(&self, dim: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.rows.len(), dim);
        for (i, row) in self.rows.iter().enumerate() {
            for b in &row.blocks {
                for (k, v) in b.values.iter().enumerate() {
                    h[(i, b.col + k)] += v;
                }
            }
        }
        h
    }

    /// Sorted union of the columns touched by any row.
    fn active_columns(&self) -> Vec<usize> {
        let width = self.rows.iter().map(|r| r.max_col()).max().unwrap_or(0);
        let mut used = vec![false; width];
        for row in &self.rows {
            for b in &row.blocks {
                for (k, v) in b.values.iter().enumerate() {
                    if *v != 0.0 {
                        used[b.col + k] = true;
                    }
                }
            }
        }
        used.iter()
            .enumerate()
            .filter_map(|(i, &u)| u.then_some(i))
            .collect()
    }
}

/// Dense measurement restricted to the active columns.
struct Reduced {
    cols: Vec<usize>,
    h: DMatrix<f64>,
    r: DVector<f64>,
    noise: DVector<f64>,
}

fn column_index(cols: &[usize]) -> Vec<usize> {
    let mut index = vec![usize::MAX; cols.last().map_or(0, |c| c + 1)];
    for (i, &c) in cols.iter().enumerate() {
        index[c] = i;
    }
    index
}

fn reduce(meas: &LinearizedMeasurement) -> Reduced {
    let cols = meas.active_columns();
    let index = column_index(&cols);
    let m = meas.len();
    let mut h = DMatrix::zeros(m, cols.len());
    for (i, row) in meas.rows.iter().enumerate() {
        for b in &row.blocks {
            for (k, v) in b.values.iter().enumerate() {
                if *v != 0.0 {
                    h[(i, index[b.col + k])] += v;
                }
            }
        }
    }
    Reduced {
        cols,
        h,
        r: meas.residuals(),
        noise: DVector::from_iterator(m, meas.rows.iter().map(|r| r.noise_var)),
    }
}

/// Replaces a tall measurement (more rows than active columns) by an
/// equivalent one with unit noise and at most `cols` rows. The information
/// `HᵀR⁻¹H` and `HᵀR⁻¹r` are preserved exactly. Rows are accumulated
/// block-sparsely.
fn compress(meas: &LinearizedMeasurement, cols: Vec<usize>) -> Reduced {
    let s = cols.len();
    let index = column_index(&cols);
    let mut info = DMatrix::zeros(s, s);
    let mut rhs = DVector::zeros(s);
    let mut entries: Vec<(usize, f64)> = Vec::new();
    for row in &meas.rows {
        let w = 1.0 / row.noise_var;
        entries.clear();
        for b in &row.blocks {
            for (k, v) in b.values.iter().enumerate() {
                if *v != 0.0 {
                    entries.push((index[b.col + k], *v));
                }
            }
        }
        for &(a, va) in &entries {
            rhs[a] += w * va * row.residual;
            for &(b, vb) in &entries {
                info[(a, b)] += w * va * vb;
            }
        }
    }
    let info = (&info + info.transpose()) * 0.5;
    let eig = info.symmetric_eigen();
    let max_ev = eig.eigenvalues.max().max(0.0);
    let keep: Vec<usize> = (0..s)
        .filter(|&i| eig.eigenvalues[i] > 1e-12 * max_ev && eig.eigenvalues[i] > 0.0)
        .collect();
    let k = keep.len();
    let mut h = DMatrix::zeros(k, s);
    let mut r = DVector::zeros(k);
    for (row, &i) in keep.iter().enumerate() {
        let lambda = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        h.row_mut(row).copy_from(&(v.transpose() * lambda.sqrt()));
        r[row] = v.dot(&rhs) / lambda.sqrt();
    }
    Reduced {
        cols,
        h,
        r,
        noise: DVector::from_element(k, 1.0),
    }
}

/// Linear Kalman correction at a fixed linearization point.
///
/// Returns the error-state estimate `δx = K r` and the Joseph-form posterior
/// covariance. Does not touch any nominal state.
pub fn kalman_correction(
    p: &DMatrix<f64>,
    meas: &LinearizedMeasurement,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = p.nrows();
    if meas.is_empty() {
        return Ok((DVector::zeros(n), p.clone()));
    }
    for row in &meas.rows {
        if row.max_col() > n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: row.max_col(),
            });
        }
        if !(row.residual.is_finite() && row.noise_var.is_finite() && row.noise_var >= 0.0) {
            return Err(Error::NonFinite("measurement row"));
        }
    }
    let cols = meas.active_columns();
    if cols.is_empty() {
        return Ok((DVector::zeros(n), p.clone()));
    }
    let red = if meas.len() > cols.len() && meas.rows.iter().all(|r| r.noise_var > 0.0) {
        let red = compress(meas, cols);
        if red.h.nrows() == 0 {
            return Ok((DVector::zeros(n), p.clone()));
        }
        red
    } else {
        reduce(meas)
    };
    let Reduced { cols, h, r, noise } = red;
    let m = h.nrows();

    // P[:, S] and P[S, S]
    let p_cols = p.select_columns(cols.iter());
    let p_ss = p_cols.select_rows(cols.iter());
    let pht = &p_cols * h.transpose(); // n × m
    let mut s = &h * &p_ss * h.transpose();
    for i in 0..m {
        s[(i, i)] += noise[i];
    }
    let s = (&s + s.transpose()) * 0.5;
    let chol = s.cholesky().ok_or(Error::SingularInnovation)?;
    let k = chol.solve(&pht.transpose()).transpose(); // n × m
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularInnovation);
    }
    let dx = &k * &r;

    // Joseph form: (I − KH) P (I − KH)ᵀ + K R Kᵀ, with H nonzero only on S.
    let hp = pht.transpose(); // H P, by symmetry of P
    let ap = p - &k * &hp; // (I − KH) P
    let ap_ht = ap.select_columns(cols.iter()) * h.transpose(); // n × m
    let mut post = ap - ap_ht * k.transpose();
    let k_scaled = DMatrix::from_fn(n, m, |i, j| k[(i, j)] * noise[j]);
    post += k_scaled * k.transpose();
    let post = (&post + post.transpose()) * 0.5;
    Ok((dx, post))
}

/// ESKF update. On a singular innovation the state is left untouched.
pub fn eskf_update(state: &mut FilterState, meas: &LinearizedMeasurement) -> Result<()> {
    let (dx, post) = kalman_correction(&state.covariance, meas)?;
    let mut next = state.clone();
    next.apply_correction(&dx)?;
    next.covariance = post;
    *state = next;
    Ok(())
}

/// χ² quantile with one degree of freedom.
pub fn chi_square_threshold(confidence: f64) -> f64 {
    ChiSquared::new(1.0)
        .map(|d| d.inverse_cdf(confidence))
        .unwrap_or(f64::INFINITY)
}

/// Per-row normalized innovation test `r² / (HPHᵀ + R) < χ²₁(confidence)`.
pub fn chi_square_gate(
    meas: &LinearizedMeasurement,
    state: &FilterState,
    confidence: f64,
) -> Vec<bool> {
    let threshold = chi_square_threshold(confidence);
    meas.rows
        .iter()
        .map(|row| {
            let mut var = row.noise_var;
            for a in &row.blocks {
                for b in &row.blocks {
                    for (i, ha) in a.values.iter().enumerate() {
                        for (j, hb) in b.values.iter().enumerate() {
                            var += ha * state.covariance[(a.col + i, b.col + j)] * hb;
                        }
                    }
                }
            }
            var > 0.0 && row.residual * row.residual / var < threshold
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let rank_def = rng.random_bool(0.3);
        let mut p = &a * a.transpose() * 0.01;
        if rank_def {
            // inject an exactly singular direction
            let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)).normalize();
            let proj = DMatrix::identity(n, n) - &v * v.transpose();
            p = &proj * p * &proj;
        }
        (&p + p.transpose()) * 0.5
    }

    fn state_with(q: usize) -> FilterState {
        let ids: Vec<u32> = (0..q as u32).collect();
        FilterState::with_default_prior(NavState::default(), Pose::identity(), &ids, 20, 20)
    }

    #[test]
    fn layout_audit_is_a_bijection() {
        let layout = ErrorLayout {
            num_anchors: 4,
            num_lidar_clones: 3,
            num_uwb_clones: 2,
        };
        let audit = layout.audit();
        let mut covered = vec![0usize; layout.dim()];
        for (_, range) in &audit {
            for i in range.clone() {
                covered[i] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        let mut names: Vec<_> = audit.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), audit.len());
        // each anchor owns exactly one scale and one bias column
        for i in 0..4 {
            let s = audit
                .iter()
                .filter(|(n, _)| *n == format!("ds_{i}"))
                .count();
            let b = audit
                .iter()
                .filter(|(n, _)| *n == format!("db_u{i}"))
                .count();
            assert_eq!((s, b), (1, 1));
        }
    }

    #[test]
    fn augmentation_dimension_arithmetic() {
        let mut st = state_with(4);
        assert_eq!(st.dim(), 29);
        st.augment_clone(CloneKind::Lidar, 0.0).unwrap();
        assert_eq!(st.dim(), 35);
        assert_eq!(st.layout().dim(), 35);
    }

    #[test]
    fn augmentation_copies_pose_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = state_with(2);
        st.covariance = random_psd(&mut rng, st.dim());
        st.augment_clone(CloneKind::Uwb, 0.0).unwrap();
        st.augment_clone(CloneKind::Lidar, 0.1).unwrap();
        let p = &st.covariance;
        let lidar = st.layout().lidar_clone(0);
        let uwb = st.layout().uwb_clone(0);
        for o in [lidar, uwb] {
            for r in 0..6 {
                for c in 0..6 {
                    assert_eq!(p[(o + r, o + c)], p[(r, c)]);
                }
            }
            for r in 0..6 {
                for c in 0..layout::FIXED_DIM {
                    assert_eq!(p[(o + r, c)], p[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn augmentation_preserves_psd_for_random_jacobians() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.random_range(6..30);
            let p = random_psd(&mut rng, n);
            let j = DMatrix::from_fn(6, n, |_, _| rng.random_range(-2.0..2.0));
            let at = rng.random_range(0..=n);
            let out = augment_covariance(&p, &j, at);
            let asym = (&out - out.transpose()).abs().max();
            assert!(asym <= 1e-12);
            let min_ev = out.symmetric_eigenvalues().min();
            assert!(min_ev > -1e-10, "min eigenvalue {min_ev}");
        }
    }

    #[test]
    fn augment_then_marginalize_restores_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = state_with(3);
        st.covariance = random_psd(&mut rng, st.dim());
        st.augment_clone(CloneKind::Lidar, 0.0).unwrap();
        let before = st.covariance.clone();
        st.augment_clone(CloneKind::Uwb, 0.5).unwrap();
        st.marginalize_oldest(CloneKind::Uwb).unwrap();
        assert_eq!(st.covariance, before);

        let base = st.covariance.clone();
        st.augment_clone(CloneKind::Lidar, 1.0).unwrap();
        st.augment_clone(CloneKind::Lidar, 2.0).unwrap();
        // oldest lidar clone goes; the remaining two keep their blocks bit-identical
        let pre = st.covariance.clone();
        let l1 = st.layout().lidar_clone(1);
        st.marginalize_oldest(CloneKind::Lidar).unwrap();
        let l0 = st.layout().lidar_clone(0);
        for r in 0..12 {
            for c in 0..12 {
                assert_eq!(st.covariance[(l0 + r, l0 + c)], pre[(l1 + r, l1 + c)]);
            }
        }
        assert_eq!(st.lidar_clones.len(), 2);
        assert_eq!(base.nrows() + 6, st.dim());
    }

    #[test]
    fn window_limits_are_enforced() {
        let mut st =
            FilterState::with_default_prior(NavState::default(), Pose::identity(), &[0], 2, 1);
        st.augment_clone(CloneKind::Lidar, 0.0).unwrap();
        st.augment_clone(CloneKind::Lidar, 0.1).unwrap();
        assert!(matches!(
            st.augment_clone(CloneKind::Lidar, 0.2),
            Err(Error::WindowFull(_))
        ));
        assert!(matches!(
            st.marginalize_oldest(CloneKind::Uwb),
            Err(Error::EmptyWindow(_))
        ));
    }

    #[test]
    fn long_run_window_bookkeeping() {
        let mut st = state_with(4);
        let bound = ErrorLayout::bound(4, 20, 20);
        let mut ids = Vec::new();
        for k in 0..500 {
            if st.is_window_full(CloneKind::Lidar) {
                let gone = st.marginalize_oldest(CloneKind::Lidar).unwrap();
                assert_eq!(gone.id, ids.remove(0));
            }
            ids.push(st.augment_clone(CloneKind::Lidar, k as f64).unwrap());
            if k % 2 == 0 {
                if st.is_window_full(CloneKind::Uwb) {
                    st.marginalize_oldest(CloneKind::Uwb).unwrap();
                }
                st.augment_clone(CloneKind::Uwb, k as f64).unwrap();
            }
            assert!(st.dim() <= bound);
            assert_eq!(st.dim(), st.layout().dim());
        }
        assert_eq!(st.lidar_clones.len(), 20);
        let times: Vec<f64> = st.lidar_clones.iter().map(|c| c.timestamp).collect();
        assert!(times.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(
            st.find_clone(CloneKind::Lidar, 0),
            Err(Error::StaleClone(0))
        ));
    }

    fn scalar_row(col: usize, h: f64, r: f64, var: f64) -> MeasurementRow {
        MeasurementRow {
            residual: r,
            noise_var: var,
            blocks: vec![JacobianBlock {
                col,
                values: vec![h],
            }],
        }
    }

    #[test]
    fn one_dimensional_closed_form() {
        let p = DMatrix::from_element(1, 1, 1.0);
        let meas = LinearizedMeasurement::new(vec![scalar_row(0, 1.0, 2.0, 1.0)]);
        let (dx, post) = kalman_correction(&p, &meas).unwrap();
        assert!((dx[0] - 1.0).abs() < 1e-15);
        assert!((post[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn position_scalar_update_on_filter_state() {
        let mut st = state_with(0);
        st.covariance[(3, 3)] = 1.0;
        let meas = LinearizedMeasurement::new(vec![scalar_row(layout::NAV_POS, 1.0, 2.0, 1.0)]);
        eskf_update(&mut st, &meas).unwrap();
        assert!((st.nav.position.x - 1.0).abs() < 1e-12);
        assert!((st.covariance[(3, 3)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_only_shrinks_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = state_with(2);
        st.covariance =
            random_psd(&mut rng, st.dim()) + DMatrix::identity(st.dim(), st.dim()) * 1e-3;
        let nav = st.nav;
        let rows = (0..3)
            .map(|i| MeasurementRow {
                residual: 0.0,
                noise_var: 0.01,
                blocks: vec![JacobianBlock {
                    col: 3 * i,
                    values: vec![1.0, -0.5, 0.2],
                }],
            })
            .collect();
        let trace = st.covariance.trace();
        eskf_update(&mut st, &LinearizedMeasurement::new(rows)).unwrap();
        assert_eq!(st.nav, nav);
        assert!(st.covariance.trace() < trace);
    }

    #[test]
    fn singular_innovation_leaves_state_untouched() {
        let mut st = state_with(1);
        st.covariance.fill(0.0);
        let before = st.clone();
        let meas = LinearizedMeasurement::new(vec![scalar_row(0, 1.0, 0.3, 0.0)]);
        assert!(matches!(
            eskf_update(&mut st, &meas),
            Err(Error::SingularInnovation)
        ));
        assert_eq!(st.covariance, before.covariance);
        assert_eq!(st.nav, before.nav);
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, m: usize) -> LinearizedMeasurement {
        let rows = (0..m)
            .map(|_| {
                let nblocks = rng.random_range(1..4);
                let blocks = (0..nblocks)
                    .map(|_| {
                        let len = rng.random_range(1..=6.min(n));
                        let col = rng.random_range(0..=n - len);
                        JacobianBlock {
                            col,
                            values: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        }
                    })
                    .collect();
                MeasurementRow {
                    residual: rng.random_range(-0.3..0.3),
                    noise_var: rng.random_range(0.001..0.01),
                    blocks,
                }
            })
            .collect();
        LinearizedMeasurement::new(rows)
    }

    /// Oracle: the same rows applied one scalar at a time.
    fn sequential(p: &DMatrix<f64>, meas: &LinearizedMeasurement) -> (DVector<f64>, DMatrix<f64>) {
        let n = p.nrows();
        let mut dx = DVector::zeros(n);
        let mut p = p.clone();
        for row in &meas.rows {
            let h = row.dense(n);
            let ph = &p * &h;
            let s = h.dot(&ph) + row.noise_var;
            let k = &ph / s;
            let innov = row.residual - h.dot(&dx);
            dx += &k * innov;
            p -= &k * ph.transpose();
            p = (&p + p.transpose()) * 0.5;
        }
        (dx, p)
    }

    #[test]
    fn batch_equals_sequential_scalar_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let n = 30;
            let p = random_psd(&mut rng, n) + DMatrix::identity(n, n) * 1e-2;
            // both the short path and the compressed (tall) path
            let m = if trial % 2 == 0 { 8 } else { 200 };
            let meas = random_rows(&mut rng, n, m);
            let (dx_b, p_b) = kalman_correction(&p, &meas).unwrap();
            let (dx_s, p_s) = sequential(&p, &meas);
            assert!((&dx_b - &dx_s).abs().max() < 1e-8, "trial {trial}");
            assert!((&p_b - &p_s).abs().max() < 1e-8, "trial {trial}");
        }
    }

    #[test]
    fn joseph_update_keeps_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10_000 {
            let n = rng.random_range(2..12);
            let mut p = random_psd(&mut rng, n);
            if rng.random_bool(0.5) {
                p += DMatrix::identity(n, n) * 1e-6;
            }
            let m = rng.random_range(1..20);
            let meas = random_rows(&mut rng, n, m);
            if let Ok((_, post)) = kalman_correction(&p, &meas) {
                assert!((&post - post.transpose()).abs().max() <= 1e-12);
                let min_ev = post.symmetric_eigenvalues().min();
                assert!(min_ev >= -1e-10, "{min_ev}");
                assert!(post.trace() <= p.trace() + 1e-12);
            }
        }
    }

    #[test]
    fn correction_folds_through_boxplus() {
        let mut st = state_with(1);
        st.nav.attitude = exp_so3(&Vec3::new(0.1, 0.2, 0.3));
        st.augment_clone(CloneKind::Lidar, 0.0).unwrap();
        let mut dx = DVector::zeros(st.dim());
        dx[0] = 0.01;
        dx[layout::scale(0)] = 0.002;
        dx[layout::bias(1, 0)] = -0.05;
        let o = st.layout().lidar_clone(0);
        dx[o + 3] = 0.5;
        let before = st.clone();
        st.apply_correction(&dx).unwrap();
        let expect = before.nav.attitude * exp_so3(&Vec3::new(0.01, 0.0, 0.0));
        assert!((st.nav.attitude.matrix() - expect.matrix()).abs().max() < 1e-15);
        assert!((st.anchor_models[0].scale - 1.002).abs() < 1e-15);
        assert!((st.anchor_models[0].bias + 0.05).abs() < 1e-15);
        assert!((st.lidar_clones[0].pose.translation.x - 0.5).abs() < 1e-15);
        assert!(st.apply_correction(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn chi_square_gate_examples() {
        assert!((chi_square_threshold(0.95) - 3.841).abs() < 1e-3);
        let mut st = state_with(0);
        st.covariance.fill(0.0);
        st.covariance[(3, 3)] = 0.5;
        // variance 0.5 + 0.5 = 1, normalized squared residual = r²
        let rows = vec![
            scalar_row(3, 1.0, 0.0, 0.5),
            scalar_row(3, 1.0, 10f64.sqrt(), 0.5),
            scalar_row(3, 1.0, 1.9, 0.5),
        ];
        let gate = chi_square_gate(&LinearizedMeasurement::new(rows), &st, 0.95);
        assert_eq!(gate, vec![true, false, true]);
    }
}
