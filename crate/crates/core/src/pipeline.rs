//! Event-driven estimator: IMU propagation, LiDAR keyframe updates and
//! windowed UWB updates, with the variant toggles of the ablation study.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::ins::{propagate, ImuSample, NavState, ProcessNoise};
use crate::lidar::{
    associate, lidar_residual_jacobian, select_keyframe, AssociationConfig, KeyframeThresholds,
    LidarKeyframe, PointCloud,
};
use crate::msckf::{
    chi_square_gate, eskf_update, CloneKind, FilterState, InitialUncertainty, LinearizedMeasurement,
};
use crate::outlier::{
    build_range_windows, principal_extents, ransac_reject, refine_and_update, AnchorInliers,
    RansacConfig, RejectionDiagnostic,
};
use crate::uwb::{
    in_epoch, uwb_residual_jacobian, AnchorTable, RangeMeasurement, TagExtrinsics, UwbEpoch,
};

/// Estimator variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    TcLio,
    Uins,
    Ulins,
    UlinsOe,
    UlinsMor,
    MrUlins,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::TcLio,
        Variant::Uins,
        Variant::Ulins,
        Variant::UlinsOe,
        Variant::UlinsMor,
        Variant::MrUlins,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TcLio => "tc-lio",
            Variant::Uins => "uins",
            Variant::Ulins => "ulins",
            Variant::UlinsOe => "ulins-oe",
            Variant::UlinsMor => "ulins-mor",
            Variant::MrUlins => "mr-ulins",
        }
    }

    pub fn flags(self) -> VariantFlags {
        let (lidar, uwb, online_estimation, multi_epoch_rejection) = match self {
            Variant::TcLio => (true, false, false, false),
            Variant::Uins => (false, true, false, false),
            Variant::Ulins => (true, true, false, false),
            Variant::UlinsOe => (true, true, true, false),
            Variant::UlinsMor => (true, true, false, true),
            Variant::MrUlins => (true, true, true, true),
        };
        VariantFlags {
            lidar,
            uwb,
            online_estimation,
            multi_epoch_rejection,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
    }
}

/// Pipeline switches. Only the six combinations named by [`Variant`] are
/// accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFlags {
    pub lidar: bool,
    pub uwb: bool,
    /// Range scale/bias states take part in updates.
    pub online_estimation: bool,
    /// RANSAC over the window replaces the per-range chi-square gate.
    pub multi_epoch_rejection: bool,
}

impl VariantFlags {
    /// The variant these flags spell, or a config error naming the clash.
    pub fn lint(&self) -> Result<Variant> {
        if !self.lidar && !self.uwb {
            return Err(Error::config(
                "flags",
                "at least one of lidar/uwb must be enabled",
            ));
        }
        if !self.uwb && (self.online_estimation || self.multi_epoch_rejection) {
            return Err(Error::config(
                "flags.uwb",
                "online estimation and outlier rejection need the UWB pipeline",
            ));
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.flags() == *self)
            .ok_or_else(|| {
                Error::config(
                    "flags.lidar",
                    "UWB-inertial runs use chi-square gating with fixed range model",
                )
            })
    }
}

/// Tunables of the running estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// N
    pub max_lidar_clones: usize,
    /// M
    pub max_uwb_clones: usize,
    pub process: ProcessNoise,
    pub prior: InitialUncertainty,
    pub keyframe: KeyframeThresholds,
    pub association: AssociationConfig,
    pub uwb_noise_sigma: f64,
    /// Ranges within this long after an epoch opens join it, s.
    pub epoch_window_s: f64,
    /// Closed epochs between UWB update cycles.
    pub uwb_update_every: usize,
    pub chi_square_confidence: f64,
    pub ransac: RansacConfig,
    /// Anchors whose window tag positions span less than this along the
    /// second principal axis fall back to the chi-square gate, m.
    pub geometry_guard_m: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            max_lidar_clones: 20,
            max_uwb_clones: 20,
            process: ProcessNoise::default(),
            prior: InitialUncertainty::default(),
            keyframe: KeyframeThresholds::default(),
            association: AssociationConfig::default(),
            uwb_noise_sigma: 0.03,
            epoch_window_s: 0.1,
            uwb_update_every: 3,
            chi_square_confidence: 0.95,
            ransac: RansacConfig::default(),
            geometry_guard_m: 0.5,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_lidar_clones < 2 {
            return Err(Error::config(
                "estimator.max_lidar_clones",
                "must be at least 2",
            ));
        }
        if self.max_uwb_clones < 1 {
            return Err(Error::config(
                "estimator.max_uwb_clones",
                "must be at least 1",
            ));
        }
        if !(self.uwb_noise_sigma > 0.0) {
            return Err(Error::config(
                "estimator.uwb_noise_sigma",
                "must be positive",
            ));
        }
        if !(self.association.noise_sigma_m > 0.0) {
            return Err(Error::config(
                "estimator.association.noise_sigma_m",
                "must be positive",
            ));
        }
        if !(self.epoch_window_s > 0.0) {
            return Err(Error::config(
                "estimator.epoch_window_s",
                "must be positive",
            ));
        }
        if self.uwb_update_every == 0 {
            return Err(Error::config(
                "estimator.uwb_update_every",
                "must be at least 1",
            ));
        }
        if !(self.chi_square_confidence > 0.0 && self.chi_square_confidence < 1.0) {
            return Err(Error::config(
                "estimator.chi_square_confidence",
                "must lie in (0, 1)",
            ));
        }
        if !(self.geometry_guard_m >= 0.0) {
            return Err(Error::config(
                "estimator.geometry_guard_m",
                "must be nonnegative",
            ));
        }
        self.process.imu.validate()?;
        self.ransac.validate()
    }
}

/// Stages reported by the timing profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    ForwardPropagation,
    LidarUpdate,
    OutlierRejection,
    UwbUpdate,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::ForwardPropagation,
        Stage::LidarUpdate,
        Stage::OutlierRejection,
        Stage::UwbUpdate,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::ForwardPropagation => "forward propagation",
            Stage::LidarUpdate => "LiDAR update",
            Stage::OutlierRejection => "outlier rejection",
            Stage::UwbUpdate => "UWB update",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct StageTotals {
    total: Duration,
    calls: u64,
}

/// Accumulated wall time per stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimingProfile {
    stages: [StageTotals; 4],
}

impl TimingProfile {
    fn slot(stage: Stage) -> usize {
        Stage::ALL.iter().position(|s| *s == stage).unwrap_or(0)
    }

    pub fn record(&mut self, stage: Stage, elapsed: Duration) {
        let s = &mut self.stages[Self::slot(stage)];
        s.total += elapsed;
        s.calls += 1;
    }

    pub fn calls(&self, stage: Stage) -> u64 {
        self.stages[Self::slot(stage)].calls
    }

    pub fn total(&self, stage: Stage) -> Duration {
        self.stages[Self::slot(stage)].total
    }

    /// Mean time per invocation; `None` for a stage that never ran.
    pub fn mean(&self, stage: Stage) -> Option<Duration> {
        let s = self.stages[Self::slot(stage)];
        (s.calls > 0).then(|| s.total / s.calls as u32)
    }

    pub fn sum(&self) -> Duration {
        self.stages.iter().map(|s| s.total).sum()
    }

    /// `stage,calls,mean_ms,total_s`; stages that never ran are left out.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,calls,mean_ms,total_s\n");
        for stage in Stage::ALL {
            if let Some(mean) = self.mean(stage) {
                out.push_str(&format!(
                    "{},{},{:.6},{:.6}\n",
                    stage.label(),
                    self.calls(stage),
                    mean.as_secs_f64() * 1e3,
                    self.total(stage).as_secs_f64()
                ));
            }
        }
        out
    }
}

/// Filter operations reported to an observer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterEvent {
    Propagate,
    Augment(CloneKind),
    Marginalize(CloneKind),
    LidarUpdate,
    UwbUpdate,
}

/// Callback run after every filter operation.
pub type Observer = Box<dyn FnMut(FilterEvent, &FilterState)>;

/// Mixes a run seed with two counters into an independent 64-bit seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(a ^ splitmix(b)))
}

/// Running MSCKF estimator for one variant.
pub struct Estimator {
    cfg: EstimatorConfig,
    flags: VariantFlags,
    state: FilterState,
    anchors: AnchorTable,
    tag: TagExtrinsics,
    keyframes: VecDeque<LidarKeyframe>,
    epochs: VecDeque<UwbEpoch>,
    closed_epochs: usize,
    last_imu: Option<ImuSample>,
    seed: u64,
    cycle: u64,
    timing: TimingProfile,
    diagnostics: Vec<RejectionDiagnostic>,
    skipped_updates: usize,
    observer: Option<Observer>,
}

impl fmt::Debug for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Estimator")
            .field("flags", &self.flags)
            .field("timestamp", &self.state.timestamp)
            .field("dim", &self.state.dim())
            .finish_non_exhaustive()
    }
}

impl Estimator {
    /// `anchors` is ignored when the variant has no UWB pipeline.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: EstimatorConfig,
        flags: VariantFlags,
        initial: NavState,
        timestamp: f64,
        lidar_extrinsics: Pose,
        anchors: AnchorTable,
        tag: TagExtrinsics,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        flags.lint()?;
        let anchors = if flags.uwb {
            anchors
        } else {
            AnchorTable::new(Vec::new())?
        };
        let mut state = FilterState::new(
            initial,
            lidar_extrinsics,
            &anchors.ids(),
            cfg.max_lidar_clones,
            cfg.max_uwb_clones,
            &cfg.prior,
            flags.online_estimation,
        );
        state.timestamp = timestamp;
        Ok(Self {
            cfg,
            flags,
            state,
            anchors,
            tag,
            keyframes: VecDeque::new(),
            epochs: VecDeque::new(),
            closed_epochs: 0,
            last_imu: None,
            seed,
            cycle: 0,
            timing: TimingProfile::default(),
            diagnostics: Vec::new(),
            skipped_updates: 0,
            observer: None,
        })
    }

    /// Called after every propagation, augmentation, marginalization and
    /// update.
    pub fn set_observer(&mut self, f: impl FnMut(FilterEvent, &FilterState) + 'static) {
        self.observer = Some(Box::new(f));
    }

    fn notify(&mut self, event: FilterEvent) {
        if let Some(obs) = self.observer.as_mut() {
            obs(event, &self.state);
        }
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn flags(&self) -> VariantFlags {
        self.flags
    }

    pub fn timing(&self) -> &TimingProfile {
        &self.timing
    }

    pub fn diagnostics(&self) -> &[RejectionDiagnostic] {
        &self.diagnostics
    }

    /// Updates rejected for a singular innovation.
    pub fn skipped_updates(&self) -> usize {
        self.skipped_updates
    }

    pub fn lidar_keyframes(&self) -> usize {
        self.keyframes.len()
    }

    /// Propagates with the held IMU sample up to `t`.
    fn advance_to(&mut self, t: f64) -> Result<()> {
        let Some(sample) = self.last_imu else {
            return Ok(());
        };
        let dt = t - self.state.timestamp;
        if dt <= 0.0 {
            return Ok(());
        }
        let start = Instant::now();
        propagate(&mut self.state, &sample, dt, &self.cfg.process)?;
        self.state.timestamp = t;
        self.timing
            .record(Stage::ForwardPropagation, start.elapsed());
        self.notify(FilterEvent::Propagate);
        Ok(())
    }

    /// Each sample is held constant until the next one arrives.
    pub fn process_imu(&mut self, sample: &ImuSample) -> Result<()> {
        if self.last_imu.is_some() {
            self.advance_to(sample.timestamp)?;
        } else {
            self.state.timestamp = self.state.timestamp.max(sample.timestamp);
        }
        self.last_imu = Some(*sample);
        Ok(())
    }

    fn update(&mut self, meas: &LinearizedMeasurement, event: FilterEvent) -> Result<bool> {
        match eskf_update(&mut self.state, meas) {
            Ok(()) => {
                self.notify(event);
                Ok(true)
            }
            Err(Error::SingularInnovation) => {
                self.skipped_updates += 1;
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    /// Non-keyframes are merged into the latest keyframe map; a keyframe is
    /// associated with the window, used for an update and then cloned.
    pub fn process_lidar(&mut self, cloud: &PointCloud) -> Result<()> {
        if !self.flags.lidar {
            return Ok(());
        }
        self.advance_to(cloud.timestamp)?;
        let extr = self.state.lidar_extrinsics;
        let current = self.state.nav.pose() * extr;
        if let Some(last) = self.keyframes.back() {
            let (kf_pose, _) = self.state.clone_pose(CloneKind::Lidar, last.clone_id)?;
            let kf_lidar = kf_pose * extr;
            let dt = cloud.timestamp - last.timestamp;
            if !select_keyframe(&current, &kf_lidar, dt, &self.cfg.keyframe) {
                if let Some(last) = self.keyframes.back_mut() {
                    last.absorb(&cloud.points, &current, &kf_lidar);
                }
                return Ok(());
            }
            let start = Instant::now();
            let window = self.keyframes.make_contiguous();
            let assoc = associate(cloud, window, &self.state, &self.cfg.association)?;
            let rows = assoc
                .iter()
                .map(|a| {
                    lidar_residual_jacobian(a, &self.state, self.cfg.association.noise_sigma_m)
                })
                .collect::<Result<Vec<_>>>()?;
            if !rows.is_empty() {
                self.update(&LinearizedMeasurement::new(rows), FilterEvent::LidarUpdate)?;
            }
            self.timing.record(Stage::LidarUpdate, start.elapsed());
        }
        if self.state.is_window_full(CloneKind::Lidar) {
            self.state.marginalize_oldest(CloneKind::Lidar)?;
            self.keyframes.pop_front();
            self.notify(FilterEvent::Marginalize(CloneKind::Lidar));
        }
        let id = self
            .state
            .augment_clone(CloneKind::Lidar, cloud.timestamp)?;
        self.notify(FilterEvent::Augment(CloneKind::Lidar));
        self.keyframes.push_back(LidarKeyframe::new(
            cloud.timestamp,
            id,
            cloud.points.clone(),
        ));
        Ok(())
    }

    /// Groups ranges into epochs; every `uwb_update_every` closed epochs the
    /// window is screened and used for an update.
    pub fn process_range(&mut self, range: &RangeMeasurement) -> Result<()> {
        if !self.flags.uwb || self.anchors.get(range.anchor_id).is_none() {
            return Ok(());
        }
        self.advance_to(range.timestamp)?;
        if let Some(open) = self.epochs.back_mut() {
            if in_epoch(open.timestamp, range.timestamp, self.cfg.epoch_window_s) {
                open.insert(range, &self.state)?;
                return Ok(());
            }
            self.closed_epochs += 1;
            if self.closed_epochs >= self.cfg.uwb_update_every {
                self.uwb_cycle()?;
                self.closed_epochs = 0;
            }
        }
        if self.state.is_window_full(CloneKind::Uwb) {
            self.state.marginalize_oldest(CloneKind::Uwb)?;
            self.epochs.pop_front();
            self.notify(FilterEvent::Marginalize(CloneKind::Uwb));
        }
        let id = self.state.augment_clone(CloneKind::Uwb, range.timestamp)?;
        self.notify(FilterEvent::Augment(CloneKind::Uwb));
        let mut epoch = UwbEpoch::new(range.timestamp, id);
        epoch.insert(range, &self.state)?;
        self.epochs.push_back(epoch);
        Ok(())
    }

    /// Uses whatever is still unconsumed in the window.
    pub fn finish(&mut self) -> Result<()> {
        if self.flags.uwb && !self.epochs.is_empty() {
            self.uwb_cycle()?;
        }
        Ok(())
    }

    fn uwb_cycle(&mut self) -> Result<()> {
        self.cycle += 1;
        let start = Instant::now();
        let mut gated: Vec<(usize, usize)> = Vec::new();
        let mut inliers: Vec<AnchorInliers> = Vec::new();
        let timestamp = self.state.timestamp;
        {
            let epochs = self.epochs.make_contiguous();
            if self.flags.multi_epoch_rejection {
                let windows = build_range_windows(epochs, &self.state, &self.tag)?;
                for w in windows {
                    let fresh: Vec<usize> = (0..w.len())
                        .filter(|&i| {
                            let (ei, ri) = w.entries[i].source;
                            !epochs[ei].ranges[ri].consumed
                        })
                        .collect();
                    if fresh.is_empty() {
                        continue;
                    }
                    let tags: Vec<Vec3> = w.entries.iter().map(|e| e.tag).collect();
                    if principal_extents(&tags)[1] < self.cfg.geometry_guard_m {
                        gated.extend(fresh.iter().map(|&i| w.entries[i].source));
                        continue;
                    }
                    let mut cfg = self.cfg.ransac;
                    if w.len() <= cfg.min_samples + cfg.consensus_for(w.len()) {
                        continue;
                    }
                    let surveyed = self
                        .anchors
                        .get(w.anchor_id)
                        .ok_or(Error::UnknownAnchor(w.anchor_id))?
                        .position;
                    cfg.initial_guess = cfg.initial_guess.resolve(surveyed);
                    let seed = derive_seed(self.seed, self.cycle, u64::from(w.anchor_id));
                    let res = ransac_reject(&w.entries, &cfg, seed)?;
                    self.diagnostics.push(RejectionDiagnostic {
                        timestamp,
                        anchor_id: w.anchor_id,
                        window_len: w.len(),
                        inliers: res.inliers.len(),
                        position: res.model.as_ref().map(|m| m.position),
                        residual_sum: res.model.as_ref().map(|m| m.residual_sum),
                    });
                    let keep: Vec<(usize, usize)> = fresh
                        .iter()
                        .filter(|i| res.inliers.binary_search(i).is_ok())
                        .map(|&i| w.entries[i].source)
                        .collect();
                    for &i in &fresh {
                        let (ei, ri) = w.entries[i].source;
                        epochs[ei].ranges[ri].consumed = true;
                    }
                    for &(ei, ri) in &keep {
                        epochs[ei].ranges[ri].consumed = false;
                    }
                    if !keep.is_empty() {
                        inliers.push(AnchorInliers {
                            anchor_id: w.anchor_id,
                            ranges: keep,
                        });
                    }
                }
            } else {
                for (ei, epoch) in epochs.iter().enumerate() {
                    for (ri, r) in epoch.ranges.iter().enumerate() {
                        if !r.consumed {
                            gated.push((ei, ri));
                        }
                    }
                }
            }
        }
        self.timing.record(Stage::OutlierRejection, start.elapsed());

        let start = Instant::now();
        if !inliers.is_empty() {
            let epochs = self.epochs.make_contiguous();
            let before = self.state.clone();
            match refine_and_update(
                &mut self.state,
                epochs,
                &inliers,
                &self.anchors,
                &self.tag,
                self.cfg.uwb_noise_sigma,
            ) {
                Ok(n) if n > 0 => self.notify(FilterEvent::UwbUpdate),
                Ok(_) => {}
                Err(Error::SingularInnovation) => {
                    self.state = before;
                    self.skipped_updates += 1;
                    for set in &inliers {
                        for &(ei, ri) in &set.ranges {
                            epochs[ei].ranges[ri].consumed = true;
                        }
                    }
                }
                Err(e) => return Err(e),
            }
        }
        if !gated.is_empty() {
            self.gated_update(&gated)?;
        }
        self.timing.record(Stage::UwbUpdate, start.elapsed());
        Ok(())
    }

    /// Chi-square screening of individual ranges followed by one update with
    /// the accepted rows.
    fn gated_update(&mut self, ranges: &[(usize, usize)]) -> Result<()> {
        let mut rows = Vec::new();
        {
            let epochs = self.epochs.make_contiguous();
            for &(ei, ri) in ranges {
                let epoch = &mut epochs[ei];
                let r = &mut epoch.ranges[ri];
                r.consumed = true;
                let anchor = self
                    .anchors
                    .get(r.anchor_id)
                    .ok_or(Error::UnknownAnchor(r.anchor_id))?;
                if let Some(row) = uwb_residual_jacobian(
                    r.raw,
                    anchor,
                    epoch.clone_id,
                    &self.state,
                    &self.tag,
                    self.cfg.uwb_noise_sigma,
                )? {
                    rows.push(row);
                }
            }
        }
        let meas = LinearizedMeasurement::new(rows);
        let accepted = chi_square_gate(&meas, &self.state, self.cfg.chi_square_confidence);
        let rows: Vec<_> = meas
            .rows
            .into_iter()
            .zip(accepted)
            .filter_map(|(row, ok)| ok.then_some(row))
            .collect();
        if !rows.is_empty() {
            self.update(&LinearizedMeasurement::new(rows), FilterEvent::UwbUpdate)?;
        }
        Ok(())
    }
}
