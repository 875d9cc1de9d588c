//! End-to-end runs: simulate a scenario, feed one estimator variant and
//! collect trajectory, metrics, diagnostics and timing.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{interpolate_truth, AnchorModelReport, MetricsReport, TrajectoryEstimate};
use crate::geometry::Pose;
use crate::ins::NavState;
use crate::io::{trajectory_to_tum, write_atomic, write_diagnostics_csv};
use crate::msckf::FilterState;
use crate::outlier::RejectionDiagnostic;
use crate::pipeline::{Estimator, EstimatorConfig, Observer, TimingProfile, Variant};
use crate::sim::{presets, simulate, Scenario, SimOutput};

/// Where the scenario comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioSource {
    /// One of [`presets::NAMES`].
    Preset(String),
    Path(PathBuf),
    Inline(Box<Scenario>),
}

impl ScenarioSource {
    /// A preset name, else a file path.
    pub fn parse(s: &str) -> Self {
        if presets::NAMES.contains(&s) {
            ScenarioSource::Preset(s.to_string())
        } else {
            ScenarioSource::Path(PathBuf::from(s))
        }
    }

    pub fn resolve(&self, seed: u64) -> Result<Scenario> {
        match self {
            ScenarioSource::Preset(name) => presets::by_name(name, seed).ok_or_else(|| {
                Error::config("scenario.preset", format!("unknown preset `{name}`"))
            }),
            ScenarioSource::Path(p) => Scenario::load(p),
            ScenarioSource::Inline(s) => Ok((**s).clone()),
        }
    }
}

fn default_divergence() -> f64 {
    10.0
}

fn default_output_rate() -> f64 {
    10.0
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSource,
    pub variant: Variant,
    /// Overrides the scenario's seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Restricts the UWB pipeline to these anchor ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<u32>>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Position error against truth that marks the run failed, m.
    #[serde(default = "default_divergence")]
    pub divergence_threshold_m: f64,
    /// Trajectory output rate, Hz.
    #[serde(default = "default_output_rate")]
    pub output_rate_hz: f64,
}

impl RunConfig {
    pub fn new(scenario: ScenarioSource, variant: Variant) -> Self {
        Self {
            scenario,
            variant,
            seed: None,
            anchors: None,
            estimator: EstimatorConfig::default(),
            output_dir: None,
            divergence_threshold_m: default_divergence(),
            output_rate_hz: default_output_rate(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        self.variant.flags().lint()?;
        if !(self.divergence_threshold_m > 0.0) {
            return Err(Error::config("divergence_threshold_m", "must be positive"));
        }
        if !(self.output_rate_hz > 0.0) {
            return Err(Error::config("output_rate_hz", "must be positive"));
        }
        if let Some(ids) = &self.anchors {
            if ids.is_empty() {
                return Err(Error::config("anchors", "subset must not be empty"));
            }
        }
        Ok(())
    }
}

/// Outputs of one run. Files are written when the config names an output
/// directory.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub scenario: Scenario,
    pub variant: Variant,
    pub trajectory: TrajectoryEstimate,
    pub metrics: MetricsReport,
    pub diagnostics: Vec<RejectionDiagnostic>,
    pub timing: TimingProfile,
    pub wall_time: Duration,
    /// Set when the run was cut short.
    pub failure: Option<String>,
    pub final_state: FilterState,
}

enum Event {
    Imu(usize),
    Lidar(usize),
    Range(usize),
}

/// IMU, then LiDAR, then UWB on equal timestamps.
fn merged_events(sim: &SimOutput) -> Vec<(f64, Event)> {
    let mut events: Vec<(f64, u8, usize, Event)> =
        Vec::with_capacity(sim.imu.len() + sim.lidar.len() + sim.ranges.len());
    events.extend(
        sim.imu
            .iter()
            .enumerate()
            .map(|(i, s)| (s.timestamp, 0, i, Event::Imu(i))),
    );
    events.extend(
        sim.lidar
            .iter()
            .enumerate()
            .map(|(i, f)| (f.timestamp, 1, i, Event::Lidar(i))),
    );
    events.extend(
        sim.ranges
            .iter()
            .enumerate()
            .map(|(i, r)| (r.measurement.timestamp, 2, i, Event::Range(i))),
    );
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    events.into_iter().map(|(t, _, _, e)| (t, e)).collect()
}

/// Runs the estimator over already simulated data.
pub fn run_on(
    cfg: &RunConfig,
    scenario: &Scenario,
    sim: &SimOutput,
    observer: Option<Observer>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let started = Instant::now();
    let mut anchors = scenario.anchor_table()?;
    if let Some(ids) = &cfg.anchors {
        anchors = anchors.subset(ids)?;
    }
    let truth = &sim.truth.samples;
    let first = truth
        .first()
        .ok_or_else(|| Error::config("scenario.duration", "no ground truth generated"))?;
    let initial = NavState {
        attitude: first.pose.rotation,
        position: first.pose.translation,
        velocity: first.velocity,
        ..NavState::default()
    };
    let seed = scenario.seed;
    let mut est = Estimator::new(
        cfg.estimator.clone(),
        cfg.variant.flags(),
        initial,
        first.timestamp,
        sim.truth.lidar_extrinsics,
        anchors,
        scenario.tag(),
        seed,
    )?;
    if let Some(obs) = observer {
        est.set_observer(obs);
    }

    let period = 1.0 / cfg.output_rate_hz;
    let mut next_output = first.timestamp;
    let mut trajectory = TrajectoryEstimate::default();
    let mut failure: Option<String> = None;
    let record = |est: &Estimator, trajectory: &mut TrajectoryEstimate| -> Option<String> {
        let st = est.state();
        let pose = st.nav.pose();
        trajectory.push(st.timestamp, pose);
        let gt = interpolate_truth(truth, st.timestamp)?;
        let err = (pose.translation - gt.translation).norm();
        (!(err <= cfg.divergence_threshold_m)).then(|| {
            format!(
                "diverged at t = {:.3} s: position error {err:.3} m exceeds {} m",
                st.timestamp, cfg.divergence_threshold_m
            )
        })
    };

    for (t, event) in merged_events(sim) {
        if let Event::Imu(_) = event {
            let now = est.state().timestamp;
            if now + 1e-9 >= next_output && t > now {
                failure = record(&est, &mut trajectory);
                while next_output <= now + 1e-9 {
                    next_output += period;
                }
                if failure.is_some() {
                    break;
                }
            }
        }
        let step = match event {
            Event::Imu(i) => est.process_imu(&sim.imu[i]),
            Event::Lidar(i) => est.process_lidar(&sim.lidar[i]),
            Event::Range(i) => est.process_range(&sim.ranges[i].measurement),
        };
        if let Err(e) = step {
            failure = Some(format!("estimator error at t = {t:.3} s: {e}"));
            break;
        }
    }
    if failure.is_none() {
        if let Err(e) = est.finish() {
            failure = Some(format!("estimator error at end of run: {e}"));
        } else {
            failure = record(&est, &mut trajectory);
        }
    }

    let st = est.state();
    let anchor_models = st
        .anchor_ids
        .iter()
        .zip(&st.anchor_models)
        .map(|(&anchor_id, m)| AnchorModelReport {
            anchor_id,
            scale: m.scale,
            bias: m.bias,
        })
        .collect();
    let metrics = MetricsReport::compute(
        &scenario.name,
        cfg.variant.name(),
        seed,
        &trajectory,
        truth,
        anchor_models,
        failure.clone(),
    )?;
    let artifacts = RunArtifacts {
        scenario: scenario.clone(),
        variant: cfg.variant,
        trajectory,
        metrics,
        diagnostics: est.diagnostics().to_vec(),
        timing: est.timing().clone(),
        wall_time: started.elapsed(),
        failure,
        final_state: st.clone(),
    };
    if let Some(dir) = &cfg.output_dir {
        write_artifacts(dir, cfg, &artifacts)?;
    }
    Ok(artifacts)
}

/// Resolves and simulates the scenario, then runs the variant.
pub fn run(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut scenario = cfg.scenario.resolve(cfg.seed.unwrap_or(0))?;
    if let Some(seed) = cfg.seed {
        scenario.seed = seed;
    }
    scenario.validate()?;
    let sim = simulate(&scenario)?;
    run_on(cfg, &scenario, &sim, None)
}

/// Writes the run directory: config snapshot, trajectory, metrics, CDF,
/// diagnostics and timing.
pub fn write_artifacts(dir: &Path, cfg: &RunConfig, art: &RunArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut snapshot = cfg.clone();
    snapshot.scenario = ScenarioSource::Inline(Box::new(art.scenario.clone()));
    snapshot.seed = Some(art.scenario.seed);
    snapshot.output_dir = None;
    write_atomic(&dir.join("config.toml"), snapshot.to_toml()?.as_bytes())?;
    write_atomic(
        &dir.join("trajectory.tum"),
        trajectory_to_tum(&art.trajectory.samples).as_bytes(),
    )?;
    write_atomic(&dir.join("metrics.toml"), art.metrics.to_toml()?.as_bytes())?;
    write_atomic(&dir.join("cdf.csv"), art.metrics.cdf_csv().as_bytes())?;
    let mut diag = Vec::new();
    write_diagnostics_csv(&mut diag, &art.diagnostics)?;
    write_atomic(&dir.join("diagnostics.csv"), &diag)?;
    let mut timing = art.timing.to_csv();
    timing.push_str(&format!(
        "total wall,1,,{:.6}\n",
        art.wall_time.as_secs_f64()
    ));
    write_atomic(&dir.join("timing.csv"), timing.as_bytes())?;
    Ok(())
}

/// One cell of a suite table.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCell {
    pub scenario: String,
    pub variant: Variant,
    pub seed: u64,
    /// `None` when the run errored or was cut short.
    pub rmse_3d: Option<f64>,
    pub rmse_horizontal: Option<f64>,
    pub failure: Option<String>,
}

/// RMSE per (scenario, variant) with an RMS row per variant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuiteReport {
    pub cells: Vec<SuiteCell>,
}

impl SuiteReport {
    /// Scenario labels in first-seen order; repeated seeds get their own
    /// row.
    pub fn row_labels(&self) -> Vec<String> {
        let mut rows: Vec<String> = Vec::new();
        for c in &self.cells {
            let label = format!("{}#{}", c.scenario, c.seed);
            if !rows.contains(&label) {
                rows.push(label);
            }
        }
        rows
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut v: Vec<Variant> = self.cells.iter().map(|c| c.variant).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn cell(&self, row: &str, variant: Variant) -> Option<&SuiteCell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && format!("{}#{}", c.scenario, c.seed) == row)
    }

    /// `√(mean RMSE²)` over every run of the variant; `None` if any run
    /// failed.
    pub fn rms(&self, variant: Variant) -> Option<f64> {
        let vals: Vec<Option<f64>> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant)
            .map(|c| c.rmse_3d)
            .collect();
        if vals.is_empty() || vals.iter().any(Option::is_none) {
            return None;
        }
        let n = vals.len() as f64;
        Some((vals.iter().flatten().map(|v| v * v).sum::<f64>() / n).sqrt())
    }

    /// Plain-text table, one column per variant.
    pub fn to_table(&self) -> String {
        let variants = self.variants();
        let fmt = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |x| format!("{x:.4}"));
        let mut out = format!("{:<28}", "scenario");
        for v in &variants {
            out.push_str(&format!(" {:>10}", v.name()));
        }
        out.push('\n');
        for row in self.row_labels() {
            out.push_str(&format!("{row:<28}"));
            for v in &variants {
                out.push_str(&format!(
                    " {:>10}",
                    fmt(self.cell(&row, *v).and_then(|c| c.rmse_3d))
                ));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<28}", "RMS"));
        for v in &variants {
            out.push_str(&format!(" {:>10}", fmt(self.rms(*v))));
        }
        out.push('\n');
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,seed,variant,rmse_3d,rmse_horizontal,failure\n");
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.scenario,
                c.seed,
                c.variant.name(),
                opt(c.rmse_3d),
                opt(c.rmse_horizontal),
                c.failure.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        for v in self.variants() {
            out.push_str(&format!("RMS,,{},{},,\n", v.name(), opt(self.rms(v))));
        }
        out
    }
}

/// Runs every config on the rayon pool. A failing run becomes a failed cell.
pub fn run_suite(configs: &[RunConfig]) -> Result<SuiteReport> {
    if configs.is_empty() {
        return Err(Error::config("suite", "needs at least one run"));
    }
    let cells = configs
        .par_iter()
        .map(|cfg| {
            let label = match &cfg.scenario {
                ScenarioSource::Preset(n) => n.clone(),
                ScenarioSource::Path(p) => p.display().to_string(),
                ScenarioSource::Inline(s) => s.name.clone(),
            };
            match run(cfg) {
                Ok(art) => {
                    let ok = art.failure.is_none();
                    SuiteCell {
                        scenario: art.scenario.name.clone(),
                        variant: cfg.variant,
                        seed: art.scenario.seed,
                        rmse_3d: ok.then_some(art.metrics.rmse_3d),
                        rmse_horizontal: ok.then_some(art.metrics.rmse_horizontal),
                        failure: art.failure,
                    }
                }
                Err(e) => SuiteCell {
                    scenario: label,
                    variant: cfg.variant,
                    seed: cfg.seed.unwrap_or(0),
                    rmse_3d: None,
                    rmse_horizontal: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(SuiteReport { cells })
}

/// Mean timing per stage, as the human-readable lines of a report.
pub fn timing_profile(art: &RunArtifacts) -> Vec<(String, Option<Duration>)> {
    crate::pipeline::Stage::ALL
        .iter()
        .map(|s| (s.label().to_string(), art.timing.mean(*s)))
        .collect()
}

/// Convenience for reports: final pose of a run.
pub fn final_pose(art: &RunArtifacts) -> Option<Pose> {
    art.trajectory.samples.last().map(|(_, p)| *p)
}
