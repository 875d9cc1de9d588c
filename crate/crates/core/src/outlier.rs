//! Multi-epoch UWB outlier rejection.
//!
//! The ranges an anchor produced over the UWB window, together with the tag
//! positions of the window clones, over-determine the anchor position. Ranges
//! that disagree with a consensus anchor position are outliers. Only relative
//! geometry matters, so the check holds as long as the short-term odometry is
//! consistent.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::msckf::{eskf_update, CloneKind, FilterState, LinearizedMeasurement};
use crate::uwb::{tag_position, AnchorTable, TagExtrinsics, UwbEpoch};

/// One range of the window with the tag position it was taken from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowEntry {
    /// Corrected range, m.
    pub range: f64,
    pub tag: Vec3,
    /// `(epoch index, range index)` in the window the entry came from.
    pub source: (usize, usize),
}

/// All ranges of one anchor inside the UWB window.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeWindow {
    pub anchor_id: u32,
    pub entries: Vec<WindowEntry>,
}

impl RangeWindow {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn unconsumed(&self, epochs: &[UwbEpoch]) -> usize {
        self.entries
            .iter()
            .filter(|e| !epochs[e.source.0].ranges[e.source.1].consumed)
            .count()
    }
}

/// Collects per-anchor windows, in anchor-table order, using the current
/// clone poses.
pub fn build_range_windows(
    epochs: &[UwbEpoch],
    state: &FilterState,
    tag: &TagExtrinsics,
) -> Result<Vec<RangeWindow>> {
    let mut windows: Vec<RangeWindow> = state
        .anchor_ids
        .iter()
        .map(|&anchor_id| RangeWindow {
            anchor_id,
            entries: Vec::new(),
        })
        .collect();
    for (ei, epoch) in epochs.iter().enumerate() {
        let (pose, _) = state.clone_pose(CloneKind::Uwb, epoch.clone_id)?;
        let t = tag_position(&pose, tag);
        for (ri, r) in epoch.ranges.iter().enumerate() {
            let slot = state
                .anchor_slot(r.anchor_id)
                .ok_or(Error::UnknownAnchor(r.anchor_id))?;
            windows[slot].entries.push(WindowEntry {
                range: r.corrected,
                tag: t,
                source: (ei, ri),
            });
        }
    }
    Ok(windows)
}

/// Extents of a point set along its principal axes, largest first.
pub fn principal_extents(points: &[Vec3]) -> [f64; 3] {
    if points.is_empty() {
        return [0.0; 3];
    }
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - c;
        scatter += d * d.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut out = [0.0; 3];
    for (k, col) in eig.eigenvectors.column_iter().enumerate() {
        let proj = points.iter().map(|p| (p - c).dot(&col));
        let (lo, hi) = proj.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        });
        out[k] = hi - lo;
    }
    out.sort_by(|a, b| b.total_cmp(a));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Stop once the step norm falls below this, m.
    pub step_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            step_tolerance: 1e-4,
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 10.0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::config("lm.max_iterations", "must be at least 1"));
        }
        if !(self.step_tolerance > 0.0) {
            return Err(Error::config("lm.step_tolerance", "must be positive"));
        }
        if !(self.initial_damping > 0.0) {
            return Err(Error::config("lm.initial_damping", "must be positive"));
        }
        if !(self.damping_increase > 1.0 && self.damping_decrease > 1.0) {
            return Err(Error::config(
                "lm.damping_increase",
                "adaptation factors must exceed 1",
            ));
        }
        Ok(())
    }
}

/// Starting point for the anchor solve.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialGuess {
    /// The anchor's surveyed position, filled in by the estimator through
    /// [`InitialGuess::resolve`]; falls back to `CentroidAbove` otherwise.
    #[default]
    Surveyed,
    /// Tag centroid raised by the mean range.
    CentroidAbove,
    /// Tag centroid raised by a fixed height, m.
    CentroidPlus(f64),
    Fixed(Vec3),
}

impl InitialGuess {
    /// Replaces `Surveyed` by the given anchor position.
    pub fn resolve(self, surveyed: Vec3) -> Self {
        match self {
            InitialGuess::Surveyed => InitialGuess::Fixed(surveyed),
            other => other,
        }
    }

    pub fn point(&self, entries: &[WindowEntry]) -> Vec3 {
        let n = entries.len().max(1) as f64;
        let c = entries.iter().map(|e| e.tag).sum::<Vec3>() / n;
        let lift = match self {
            InitialGuess::Fixed(p) => return *p,
            InitialGuess::Surveyed | InitialGuess::CentroidAbove => {
                entries.iter().map(|e| e.range).sum::<f64>() / n
            }
            InitialGuess::CentroidPlus(h) => *h,
        };
        c + Vec3::new(0.0, 0.0, lift)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorFit {
    pub position: Vec3,
    /// `‖t_j − p‖ − d_j` at the solution.
    pub residuals: Vec<f64>,
    /// Sum of absolute residuals.
    pub residual_sum: f64,
    pub iterations: usize,
    /// Stopped on the step tolerance rather than the iteration cap.
    pub converged: bool,
}

/// Gradient of `‖t − p‖` with respect to the anchor position `p`; zero when
/// the two coincide.
pub fn range_jacobian(tag: &Vec3, p: &Vec3) -> Vec3 {
    let d = tag - p;
    let n = d.norm();
    if n < 1e-12 {
        Vec3::zeros()
    } else {
        -d / n
    }
}

fn residuals_at(entries: &[WindowEntry], p: &Vec3) -> Vec<f64> {
    entries
        .iter()
        .map(|e| (e.tag - p).norm() - e.range)
        .collect()
}

/// Estimates an anchor position from ranges and tag positions by
/// Levenberg-Marquardt on `Σ (‖t_j − p‖ − d_j)²`.
pub fn lm_solve_anchor(
    entries: &[WindowEntry],
    cfg: &LmConfig,
    initial: Vec3,
) -> Result<AnchorFit> {
    if entries.len() < 4 {
        return Err(Error::InsufficientWindow {
            have: entries.len(),
            need: 4,
        });
    }
    let tags: Vec<Vec3> = entries.iter().map(|e| e.tag).collect();
    if principal_extents(&tags)[0] < 1e-9 {
        return Err(Error::DegenerateGeometry("all tag positions coincide"));
    }
    let mut p = initial;
    let mut lambda = cfg.initial_damping;
    let mut r = residuals_at(entries, &p);
    let mut cost: f64 = r.iter().map(|x| x * x).sum();
    let mut converged = false;
    let mut iterations = 0;
    let mut jtj = Matrix3::zeros();
    while iterations < cfg.max_iterations {
        iterations += 1;
        jtj = Matrix3::zeros();
        let mut jtr = Vec3::zeros();
        for (e, ri) in entries.iter().zip(&r) {
            let j = range_jacobian(&e.tag, &p);
            jtj += j * j.transpose();
            jtr += j * *ri;
        }
        let a = jtj + Matrix3::identity() * lambda;
        let step = a
            .cholesky()
            .ok_or(Error::DegenerateGeometry("singular normal equations"))?
            .solve(&(-jtr));
        let candidate = p + step;
        let r_new = residuals_at(entries, &candidate);
        let cost_new: f64 = r_new.iter().map(|x| x * x).sum();
        if cost_new < cost {
            p = candidate;
            r = r_new;
            cost = cost_new;
            lambda /= cfg.damping_decrease;
        } else {
            lambda *= cfg.damping_increase;
        }
        if step.norm() < cfg.step_tolerance {
            converged = true;
            break;
        }
    }
    // A rank-deficient information matrix means a continuum of solutions,
    // e.g. rotation about a line of collinear tag positions.
    let ev = jtj.symmetric_eigenvalues();
    if ev.min() <= 1e-9 * ev.max().max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateGeometry("anchor position is not unique"));
    }
    Ok(AnchorFit {
        position: p,
        residual_sum: r.iter().map(|x| x.abs()).sum(),
        residuals: r,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    /// Ranges per minimal sample.
    pub min_samples: usize,
    pub max_iterations: usize,
    /// Ranges closer than this to the hypothesis vote for it, m.
    pub inlier_threshold: f64,
    /// Consensus must exceed this many additional ranges; `None` uses
    /// `max(6, ⌈|D|/2⌉)`.
    pub min_consensus: Option<usize>,
    /// Rank hypotheses by mean instead of summed absolute residual.
    pub normalized_error: bool,
    pub initial_guess: InitialGuess,
    pub lm: LmConfig,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            min_samples: 4,
            max_iterations: 100,
            inlier_threshold: 0.10,
            min_consensus: None,
            normalized_error: false,
            initial_guess: InitialGuess::default(),
            lm: LmConfig::default(),
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_samples < 4 {
            return Err(Error::config("ransac.min_samples", "must be at least 4"));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::config("ransac.inlier_threshold", "must be positive"));
        }
        self.lm.validate()
    }

    pub fn consensus_for(&self, window_len: usize) -> usize {
        self.min_consensus
            .unwrap_or_else(|| 6usize.max(window_len.div_ceil(2)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    /// `None` when no hypothesis gathered enough consensus.
    pub model: Option<AnchorFit>,
    /// Indices into the window entries, ascending.
    pub inliers: Vec<usize>,
    pub error: f64,
}

/// Random-sample consensus over one anchor's window. Keeps the refit whose
/// error over its own consensus set is smallest.
pub fn ransac_reject(
    entries: &[WindowEntry],
    cfg: &RansacConfig,
    seed: u64,
) -> Result<RansacResult> {
    let p = cfg.min_samples;
    if entries.len() < p {
        return Err(Error::InsufficientWindow {
            have: entries.len(),
            need: p,
        });
    }
    let need = cfg.consensus_for(entries.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = RansacResult {
        model: None,
        inliers: Vec::new(),
        error: f64::INFINITY,
    };
    let mut in_sample = vec![false; entries.len()];
    for _ in 0..cfg.max_iterations {
        let maybe: Vec<usize> = sample(&mut rng, entries.len(), p).into_vec();
        let subset: Vec<WindowEntry> = maybe.iter().map(|&i| entries[i]).collect();
        let Ok(fit) = lm_solve_anchor(&subset, &cfg.lm, cfg.initial_guess.point(&subset)) else {
            continue;
        };
        in_sample.iter_mut().for_each(|f| *f = false);
        for &i in &maybe {
            in_sample[i] = true;
        }
        let also: Vec<usize> = (0..entries.len())
            .filter(|&i| !in_sample[i])
            .filter(|&i| {
                let e = &entries[i];
                ((e.tag - fit.position).norm() - e.range).abs() < cfg.inlier_threshold
            })
            .collect();
        if also.len() <= need {
            continue;
        }
        let mut consensus: Vec<usize> = maybe.iter().copied().chain(also).collect();
        consensus.sort_unstable();
        let members: Vec<WindowEntry> = consensus.iter().map(|&i| entries[i]).collect();
        let Ok(better) = lm_solve_anchor(&members, &cfg.lm, fit.position) else {
            continue;
        };
        let mut error = better.residual_sum;
        if cfg.normalized_error {
            error /= members.len() as f64;
        }
        if error < best.error {
            best = RansacResult {
                model: Some(better),
                inliers: consensus,
                error,
            };
        }
    }
    Ok(best)
}

/// Inlier ranges of one anchor selected for the update.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorInliers {
    pub anchor_id: u32,
    /// `(epoch index, range index)` pairs.
    pub ranges: Vec<(usize, usize)>,
}

/// Applies one stacked update with the raw inlier ranges against the surveyed
/// anchor positions and marks them consumed. Returns the number of rows used.
pub fn refine_and_update(
    state: &mut FilterState,
    epochs: &mut [UwbEpoch],
    inliers: &[AnchorInliers],
    anchors: &AnchorTable,
    tag: &TagExtrinsics,
    noise_sigma: f64,
) -> Result<usize> {
    let mut rows = Vec::new();
    let mut used = Vec::new();
    for set in inliers {
        let anchor = anchors
            .get(set.anchor_id)
            .ok_or(Error::UnknownAnchor(set.anchor_id))?;
        for &(ei, ri) in &set.ranges {
            let epoch = &epochs[ei];
            let raw = epoch.ranges[ri].raw;
            if let Some(row) = crate::uwb::uwb_residual_jacobian(
                raw,
                anchor,
                epoch.clone_id,
                state,
                tag,
                noise_sigma,
            )? {
                rows.push(row);
                used.push((ei, ri));
            }
        }
    }
    if rows.is_empty() {
        return Ok(0);
    }
    eskf_update(state, &LinearizedMeasurement::new(rows))?;
    for &(ei, ri) in &used {
        epochs[ei].ranges[ri].consumed = true;
    }
    Ok(used.len())
}

/// One line of the per-cycle rejection diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectionDiagnostic {
    pub timestamp: f64,
    pub anchor_id: u32,
    pub window_len: usize,
    pub inliers: usize,
    pub position: Option<Vec3>,
    pub residual_sum: Option<f64>,
}
