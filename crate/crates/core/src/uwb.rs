//! UWB range model `d̂ = s·d + b + n`, the tightly coupled range residual and
//! epoch grouping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{skew, Vec3};
use crate::msckf::{
    layout, CloneKind, FilterState, JacobianBlock, MeasurementRow, RangeErrorModel,
};

/// Ranges closer than this to the anchor have no usable direction.
pub const MIN_TAG_ANCHOR_DISTANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeMeasurement {
    pub timestamp: f64,
    pub anchor_id: u32,
    /// Raw range `d̂`, m.
    pub range: f64,
}

impl RangeMeasurement {
    pub fn new(timestamp: f64, anchor_id: u32, range: f64) -> Result<Self> {
        if !timestamp.is_finite() || !range.is_finite() {
            return Err(Error::NonFinite("range measurement"));
        }
        if range <= 0.0 {
            return Err(Error::Parse(format!(
                "non-positive range {range} from anchor {anchor_id}"
            )));
        }
        Ok(Self {
            timestamp,
            anchor_id,
            range,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub id: u32,
    pub position: Vec3,
}

/// Surveyed anchors with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorTable {
    anchors: Vec<Anchor>,
}

impl AnchorTable {
    pub fn new(anchors: Vec<Anchor>) -> Result<Self> {
        for (i, a) in anchors.iter().enumerate() {
            if !a.position.iter().all(|x| x.is_finite()) {
                return Err(Error::config(
                    format!("anchor[{i}].position"),
                    "must be finite",
                ));
            }
            if anchors[..i].iter().any(|b| b.id == a.id) {
                return Err(Error::config(
                    format!("anchor[{i}].id"),
                    format!("duplicate id {}", a.id),
                ));
            }
        }
        Ok(Self { anchors })
    }

    pub fn get(&self, id: u32) -> Option<&Anchor> {
        self.anchors.iter().find(|a| a.id == id)
    }

    pub fn ids(&self) -> Vec<u32> {
        self.anchors.iter().map(|a| a.id).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Anchor> {
        self.anchors.iter()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Keeps only the listed anchors, in the listed order.
    pub fn subset(&self, ids: &[u32]) -> Result<Self> {
        let anchors = ids
            .iter()
            .map(|&id| self.get(id).copied().ok_or(Error::UnknownAnchor(id)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(anchors)
    }
}

/// Tag position in the IMU body frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TagExtrinsics {
    pub lever_arm: Vec3,
}

/// Inverts the range model at the current estimates: `(d̂ − b̂) / ŝ`.
pub fn correct_range(raw: f64, model: &RangeErrorModel) -> Result<f64> {
    if !(model.scale > 0.0) {
        return Err(Error::InvalidScale(model.scale));
    }
    Ok((raw - model.bias) / model.scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRange {
    pub anchor_id: u32,
    pub timestamp: f64,
    pub raw: f64,
    /// Raw range corrected with the estimates at epoch construction.
    pub corrected: f64,
    /// Already used by a measurement update (or rejected by a gate).
    pub consumed: bool,
}

/// Ranges of one ranging cycle, tied to the UWB clone taken at its start.
#[derive(Debug, Clone, PartialEq)]
pub struct UwbEpoch {
    pub timestamp: f64,
    pub clone_id: u64,
    pub ranges: Vec<EpochRange>,
}

impl UwbEpoch {
    pub fn new(timestamp: f64, clone_id: u64) -> Self {
        Self {
            timestamp,
            clone_id,
            ranges: Vec::new(),
        }
    }

    /// Adds a range unless the anchor already reported in this epoch.
    pub fn insert(&mut self, range: &RangeMeasurement, state: &FilterState) -> Result<bool> {
        if self.ranges.iter().any(|r| r.anchor_id == range.anchor_id) {
            return Ok(false);
        }
        let slot = state
            .anchor_slot(range.anchor_id)
            .ok_or(Error::UnknownAnchor(range.anchor_id))?;
        self.ranges.push(EpochRange {
            anchor_id: range.anchor_id,
            timestamp: range.timestamp,
            raw: range.range,
            corrected: correct_range(range.range, &state.anchor_models[slot])?,
            consumed: false,
        });
        Ok(true)
    }
}

/// Whether a range at `t` still belongs to the epoch opened at `epoch_start`.
pub fn in_epoch(epoch_start: f64, t: f64, epoch_window: f64) -> bool {
    t >= epoch_start && t < epoch_start + epoch_window
}

/// Groups a time-ordered range stream into ranging cycles; within a cycle
/// only the first range per anchor is kept.
pub fn group_ranges(ranges: &[RangeMeasurement], epoch_window: f64) -> Vec<Vec<RangeMeasurement>> {
    let mut out: Vec<Vec<RangeMeasurement>> = Vec::new();
    for r in ranges {
        match out.last_mut() {
            Some(group) if in_epoch(group[0].timestamp, r.timestamp, epoch_window) => {
                if !group.iter().any(|g| g.anchor_id == r.anchor_id) {
                    group.push(*r);
                }
            }
            _ => out.push(vec![*r]),
        }
    }
    out
}

/// Builds a whole epoch from already grouped ranges.
pub fn build_uwb_epoch(
    ranges: &[RangeMeasurement],
    state: &FilterState,
    clone_id: u64,
) -> Result<UwbEpoch> {
    let first = ranges
        .first()
        .ok_or(Error::InsufficientWindow { have: 0, need: 1 })?;
    let mut epoch = UwbEpoch::new(first.timestamp, clone_id);
    for r in ranges {
        epoch.insert(r, state)?;
    }
    Ok(epoch)
}

/// Tag world position from an IMU pose.
pub fn tag_position(pose: &crate::geometry::Pose, tag: &TagExtrinsics) -> Vec3 {
    pose.transform_point(&tag.lever_arm)
}

/// Range residual `r = d̂ − (ŝ‖t − p_u‖ + b̂)` with `t` the tag position at
/// the epoch clone. Jacobian blocks cover the anchor's scale and bias (when
/// the range states are active) and the clone pose. Returns `None` when the
/// tag sits on the anchor.
pub fn uwb_residual_jacobian(
    raw_range: f64,
    anchor: &Anchor,
    clone_id: u64,
    state: &FilterState,
    tag: &TagExtrinsics,
    noise_sigma: f64,
) -> Result<Option<MeasurementRow>> {
    let slot = state
        .anchor_slot(anchor.id)
        .ok_or(Error::UnknownAnchor(anchor.id))?;
    let (pose, offset) = state.clone_pose(CloneKind::Uwb, clone_id)?;
    let model = state.anchor_models[slot];
    let t = tag_position(&pose, tag);
    let diff = t - anchor.position;
    let dist = diff.norm();
    if dist < MIN_TAG_ANCHOR_DISTANCE {
        return Ok(None);
    }
    let u = diff / dist;
    let residual = raw_range - (model.scale * dist + model.bias);
    let h_theta = -(model.scale * u.transpose() * pose.rotation.matrix() * skew(&tag.lever_arm));
    let h_p = model.scale * u.transpose();

    let q = state.anchor_ids.len();
    let mut blocks = Vec::with_capacity(3);
    if state.range_states_active {
        blocks.push(JacobianBlock {
            col: layout::scale(slot),
            values: vec![dist],
        });
        blocks.push(JacobianBlock {
            col: layout::bias(q, slot),
            values: vec![1.0],
        });
    }
    blocks.push(JacobianBlock {
        col: offset,
        values: vec![h_theta[0], h_theta[1], h_theta[2], h_p[0], h_p[1], h_p[2]],
    });
    Ok(Some(MeasurementRow {
        residual,
        noise_var: noise_sigma * noise_sigma,
        blocks,
    }))
}
