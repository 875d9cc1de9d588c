//! Position accuracy against ground truth: RMSE and error CDF.
//!
//! Estimates and truth share one world frame, so no alignment is applied.

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::sim::TruthSample;

/// Time-stamped estimated poses, timestamps nondecreasing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryEstimate {
    pub samples: Vec<(f64, Pose)>,
}

impl TrajectoryEstimate {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self> {
        if samples.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(Error::Parse(
                "trajectory timestamps must be nondecreasing".into(),
            ));
        }
        Ok(Self { samples })
    }

    pub fn push(&mut self, t: f64, pose: Pose) {
        self.samples.push((t, pose));
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Truth pose at `t`: linear in position, slerp in attitude. `None` outside
/// the truth span.
pub fn interpolate_truth(truth: &[TruthSample], t: f64) -> Option<Pose> {
    let first = truth.first()?;
    let last = truth.last()?;
    if t < first.timestamp || t > last.timestamp {
        return None;
    }
    let i = truth.partition_point(|s| s.timestamp <= t);
    if i == 0 {
        return Some(first.pose);
    }
    if i >= truth.len() {
        return Some(last.pose);
    }
    let (a, b) = (&truth[i - 1], &truth[i]);
    let span = b.timestamp - a.timestamp;
    if span <= 0.0 {
        return Some(a.pose);
    }
    let s = (t - a.timestamp) / span;
    let qa = UnitQuaternion::from_rotation_matrix(&a.pose.rotation);
    let qb = UnitQuaternion::from_rotation_matrix(&b.pose.rotation);
    let q = qa.slerp(&qb, s);
    Some(Pose::new(
        q.to_rotation_matrix(),
        a.pose.translation.lerp(&b.pose.translation, s),
    ))
}

/// Position error at one estimate epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionError {
    pub timestamp: f64,
    pub error_3d: f64,
    pub error_horizontal: f64,
}

/// Errors at every estimate timestamp covered by the truth.
pub fn position_errors(
    est: &TrajectoryEstimate,
    truth: &[TruthSample],
) -> Result<Vec<PositionError>> {
    let out: Vec<PositionError> = est
        .samples
        .iter()
        .filter_map(|(t, pose)| {
            interpolate_truth(truth, *t).map(|gt| {
                let d = pose.translation - gt.translation;
                PositionError {
                    timestamp: *t,
                    error_3d: d.norm(),
                    error_horizontal: d.xy().norm(),
                }
            })
        })
        .collect();
    if out.is_empty() {
        return Err(Error::NoOverlap);
    }
    Ok(out)
}

/// `√(mean eᵢ²)`.
pub fn rmse_of(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::NoOverlap);
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// 3-D position RMSE of an estimate against truth.
pub fn rmse(est: &TrajectoryEstimate, truth: &[TruthSample]) -> Result<f64> {
    let errs: Vec<f64> = position_errors(est, truth)?
        .iter()
        .map(|e| e.error_3d)
        .collect();
    rmse_of(&errs)
}

/// Fraction of errors at or below each level.
pub fn error_cdf(errors: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::NoOverlap);
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(levels
        .iter()
        .map(|&l| sorted.partition_point(|&e| e <= l) as f64 / n)
        .collect())
}

/// Evenly spaced CDF levels from 0 to the largest error.
pub fn cdf_levels(errors: &[f64], count: usize) -> Vec<f64> {
    let max = errors.iter().copied().fold(0.0, f64::max);
    let count = count.max(2);
    (0..count)
        .map(|i| max * i as f64 / (count - 1) as f64)
        .collect()
}

/// Per-anchor range-model estimate at the end of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorModelReport {
    pub anchor_id: u32,
    pub scale: f64,
    pub bias: f64,
}

/// Accuracy summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub variant: String,
    pub seed: u64,
    pub samples: usize,
    pub rmse_3d: f64,
    pub rmse_horizontal: f64,
    pub max_error_3d: f64,
    pub final_error_3d: f64,
    /// `(level m, fraction ≤ level)` on the 3-D error.
    pub cdf: Vec<(f64, f64)>,
    pub anchor_models: Vec<AnchorModelReport>,
    /// Present when the run was cut short.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl MetricsReport {
    pub fn compute(
        scenario: &str,
        variant: &str,
        seed: u64,
        est: &TrajectoryEstimate,
        truth: &[TruthSample],
        anchor_models: Vec<AnchorModelReport>,
        failure: Option<String>,
    ) -> Result<Self> {
        let errs = position_errors(est, truth)?;
        let e3: Vec<f64> = errs.iter().map(|e| e.error_3d).collect();
        let eh: Vec<f64> = errs.iter().map(|e| e.error_horizontal).collect();
        let levels = cdf_levels(&e3, 21);
        let fractions = error_cdf(&e3, &levels)?;
        debug_assert!(fractions.windows(2).all(|w| w[0] <= w[1]));
        Ok(Self {
            scenario: scenario.to_string(),
            variant: variant.to_string(),
            seed,
            samples: errs.len(),
            rmse_3d: rmse_of(&e3)?,
            rmse_horizontal: rmse_of(&eh)?,
            max_error_3d: e3.iter().copied().fold(0.0, f64::max),
            final_error_3d: *e3.last().unwrap_or(&0.0),
            cdf: levels.into_iter().zip(fractions).collect(),
            anchor_models,
            failure,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn cdf_csv(&self) -> String {
        let mut out = String::from("level_m,fraction\n");
        for (l, f) in &self.cdf {
            out.push_str(&format!("{l:.6},{f:.6}\n"));
        }
        out
    }
}
