//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL`
//! line; the test fails if any criterion fails.
//!
//! Runs without the libtest harness: criteria execute one after another, so
//! the throughput measurement does not share the CPU with sibling tests, and
//! the report is printed even when every criterion passes.

use std::cell::RefCell;
use std::rc::Rc;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ulins::eval::position_errors;
use ulins::geometry::{exp_so3, rotation_angle, Pose, Vec3};
use ulins::ins::{mechanize, NavState};
use ulins::lidar::{lidar_residual_jacobian, Association, Plane};
use ulins::msckf::{CloneKind, ErrorLayout, FilterState, RangeErrorModel};
use ulins::outlier::{
    lm_solve_anchor, range_jacobian, ransac_reject, LmConfig, RansacConfig, WindowEntry,
};
use ulins::pipeline::{FilterEvent, Variant};
use ulins::runner::{run, run_on, run_suite, RunConfig, ScenarioSource, SuiteReport};
use ulins::sim::{presets, simulate, Scenario};
use ulins::uwb::{uwb_residual_jacobian, Anchor, TagExtrinsics};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-s..s),
        rng.random_range(-s..s),
        rng.random_range(-s..s),
    )
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    Pose::new(exp_so3(&random_vec(rng, 1.5)), random_vec(rng, 5.0))
}

/// Filter with one LiDAR and one UWB clone at `clone_pose`, then moved to
/// `nav`.
fn state_with_clones(
    nav: NavState,
    extr: Pose,
    clone_pose: Pose,
    anchors: &[u32],
) -> (FilterState, u64, u64) {
    let mut st = FilterState::with_default_prior(
        NavState {
            attitude: clone_pose.rotation,
            position: clone_pose.translation,
            ..NavState::default()
        },
        extr,
        anchors,
        20,
        20,
    );
    let lid = st.augment_clone(CloneKind::Lidar, 0.0).unwrap();
    let uid = st.augment_clone(CloneKind::Uwb, 0.0).unwrap();
    st.nav = nav;
    (st, lid, uid)
}

/// `max ‖H − H_fd‖ / max(‖H_fd‖, 1e-3)` with `H = −∂r/∂δx`.
fn fd_error(st: &FilterState, h: &DVector<f64>, residual: impl Fn(&FilterState) -> f64) -> f64 {
    let n = st.dim();
    let eps = 1e-6;
    let mut fd = DVector::zeros(n);
    for i in 0..n {
        let mut dx = DVector::zeros(n);
        dx[i] = eps;
        let mut plus = st.clone();
        plus.apply_correction(&dx).unwrap();
        dx[i] = -eps;
        let mut minus = st.clone();
        minus.apply_correction(&dx).unwrap();
        fd[i] = -(residual(&plus) - residual(&minus)) / (2.0 * eps);
    }
    (h - &fd).norm() / fd.norm().max(1e-3)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        let nav = NavState {
            attitude: exp_so3(&random_vec(&mut rng, 1.5)),
            position: random_vec(&mut rng, 5.0),
            ..NavState::default()
        };
        let extr = Pose::new(
            exp_so3(&random_vec(&mut rng, 0.3)),
            random_vec(&mut rng, 0.5),
        );
        let (st, lid, _) = state_with_clones(nav, extr, random_pose(&mut rng), &[0, 1]);
        let assoc = Association {
            point: random_vec(&mut rng, 8.0),
            clone_id: lid,
            plane: Plane {
                normal: random_vec(&mut rng, 1.0).normalize(),
                offset: rng.random_range(-3.0..3.0),
            },
            max_distance: 0.0,
        };
        let h = lidar_residual_jacobian(&assoc, &st, 0.05)
            .unwrap()
            .dense(st.dim());
        let e = fd_error(&st, &h, |s| {
            lidar_residual_jacobian(&assoc, s, 0.05).unwrap().residual
        });
        worst[0] = worst[0].max(e);
    }
    for trial in 0..100 {
        let nav = NavState {
            attitude: exp_so3(&random_vec(&mut rng, 1.5)),
            position: random_vec(&mut rng, 8.0),
            ..NavState::default()
        };
        let (mut st, _, uid) = state_with_clones(nav, Pose::identity(), nav.pose(), &[3, 5]);
        st.anchor_models[1] = RangeErrorModel {
            scale: rng.random_range(0.95..1.05),
            bias: rng.random_range(-0.5..0.5),
        };
        st.range_states_active = trial % 4 != 0;
        let anchor = Anchor {
            id: 5,
            position: random_vec(&mut rng, 12.0),
        };
        let tag = TagExtrinsics {
            lever_arm: random_vec(&mut rng, 0.5),
        };
        let raw = rng.random_range(1.0..20.0);
        let eval = |s: &FilterState| {
            uwb_residual_jacobian(raw, &anchor, uid, s, &tag, 0.03)
                .unwrap()
                .unwrap()
        };
        let h = eval(&st).dense(st.dim());
        worst[1] = worst[1].max(fd_error(&st, &h, |s| eval(s).residual));
    }
    for _ in 0..100 {
        let tag = random_vec(&mut rng, 10.0);
        let p = random_vec(&mut rng, 10.0);
        let j = range_jacobian(&tag, &p);
        let eps = 1e-6;
        let mut fd = Vec3::zeros();
        for i in 0..3 {
            let mut d = Vec3::zeros();
            d[i] = eps;
            fd[i] = ((tag - (p + d)).norm() - (tag - (p - d)).norm()) / (2.0 * eps);
        }
        worst[2] = worst[2].max((j - fd).norm() / fd.norm().max(1e-3));
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst.iter().all(|w| *w < 1e-5) && secs < 10.0,
        format!(
            "Jacobian vs central differences, 100 configs each: lidar {:.1e}, uwb {:.1e}, anchor {:.1e} (limit 1e-5), {secs:.2} s",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut s = presets::los(0);
    s.trajectory = presets::figure_eight_path();
    s.duration = 60.0;
    s.vertical = None;
    let n = &mut s.imu.noise;
    n.gyro_noise_density = 0.0;
    n.accel_noise_density = 0.0;
    n.gyro_bias_walk = 0.0;
    n.accel_bias_walk = 0.0;
    s.imu.gyro_bias = Vec3::zeros();
    s.imu.accel_bias = Vec3::zeros();
    let out = simulate(&s).unwrap();
    let first = out.truth.samples[0];
    let mut nav = NavState {
        attitude: first.pose.rotation,
        position: first.pose.translation,
        velocity: first.velocity,
        ..NavState::default()
    };
    let dt = 1.0 / s.rates.imu_hz;
    let (mut pos, mut att) = (0.0f64, 0.0f64);
    for (m, truth) in out.imu.iter().zip(&out.truth.samples[1..]) {
        nav = mechanize(&nav, m, dt, &s.imu.noise).unwrap();
        pos = pos.max((nav.position - truth.pose.translation).norm());
        att = att.max(rotation_angle(
            &(nav.attitude.inverse() * truth.pose.rotation),
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        pos < 1e-3 && att < 1e-4 && secs < 5.0 && s.rates.imu_hz == 200.0,
        format!("zero-noise 60 s figure-eight: max position {pos:.2e} m, attitude {att:.2e} rad, {secs:.2} s"),
    )
}

fn criterion_3() -> Outcome {
    let mut sc = presets::by_name("nlos-loop", 1).unwrap();
    sc.duration = 120.0;
    let sim = simulate(&sc).unwrap();
    let cfg = RunConfig::new(
        ScenarioSource::Inline(Box::new(sc.clone())),
        Variant::MrUlins,
    );
    let bound = ErrorLayout::bound(sc.anchors.len(), 20, 20);
    #[derive(Default)]
    struct Audit {
        events: usize,
        asym: f64,
        min_eig: f64,
        max_dim: usize,
    }
    let audit = Rc::new(RefCell::new(Audit::default()));
    let sink = audit.clone();
    let observer = Box::new(move |_: FilterEvent, st: &FilterState| {
        let mut a = sink.borrow_mut();
        a.events += 1;
        a.asym = a.asym.max(st.asymmetry());
        a.max_dim = a.max_dim.max(st.dim());
        if !st.is_psd_within(1e-10) {
            a.min_eig = a.min_eig.min(st.min_eigenvalue());
        }
    });
    let art = run_on(&cfg, &sc, &sim, Some(observer)).unwrap();
    let a = audit.borrow();
    outcome(
        art.failure.is_none() && a.asym <= 1e-12 && a.min_eig >= -1e-10 && a.max_dim <= bound && a.events > 0,
        format!(
            "{} filter operations over 120 s: asymmetry {:.1e}, min eigenvalue {}, max dim {} (bound {bound})",
            a.events,
            a.asym,
            if a.min_eig < 0.0 {
                format!("{:.1e}", a.min_eig)
            } else {
                "≥ -1e-10".into()
            },
            a.max_dim
        ),
    )
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let tight = LmConfig {
        step_tolerance: 1e-10,
        ..LmConfig::default()
    };
    // tags scattered around and below the anchor
    let spread = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-6.0..6.0),
                    rng.random_range(-6.0..6.0),
                    rng.random_range(0.0..1.5),
                )
            })
            .collect()
    };
    let entries =
        |anchor: Vec3, tags: &[Vec3], noise: &mut dyn FnMut() -> f64| -> Vec<WindowEntry> {
            tags.iter()
                .enumerate()
                .map(|(i, t)| WindowEntry {
                    range: (t - anchor).norm() + noise(),
                    tag: *t,
                    source: (i, 0),
                })
                .collect()
        };
    let mut exact_worst = 0.0f64;
    for _ in 0..20 {
        let anchor = Vec3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            2.5,
        );
        let tags = spread(&mut rng, 12);
        let e = entries(anchor, &tags, &mut || 0.0);
        let guess = anchor + random_vec(&mut rng, 1.0);
        let fit = lm_solve_anchor(&e, &tight, guess).unwrap();
        exact_worst = exact_worst.max((fit.position - anchor).norm());
    }
    let gauss = Normal::new(0.0, 0.03).unwrap();
    let mut errors = Vec::new();
    for _ in 0..100 {
        let anchor = Vec3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            2.5,
        );
        let tags = spread(&mut rng, 20);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let e = entries(anchor, &tags, &mut || gauss.sample(&mut noise_rng));
        let guess = anchor + random_vec(&mut rng, 1.0);
        let fit = lm_solve_anchor(&e, &LmConfig::default(), guess).unwrap();
        errors.push((fit.position - anchor).norm());
    }
    errors.sort_by(f64::total_cmp);
    let p95 = errors[(0.95 * errors.len() as f64).ceil() as usize - 1];
    let secs = started.elapsed().as_secs_f64();
    outcome(
        exact_worst < 1e-6 && p95 < 0.10 && secs < 10.0,
        format!("LM anchor: exact worst {exact_worst:.1e} m, 3 cm noise p95 {p95:.4} m over 100 trials, {secs:.2} s"),
    )
}

/// Precision, recall and clean-window retention of RANSAC over `trials`
/// windows on a 10 m square path.
fn ransac_trials(seed: u64, sigma: f64, trials: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
    let cfg = RansacConfig {
        min_consensus: Some(8),
        ..RansacConfig::default()
    };
    let window = |rng: &mut ChaCha8Rng, anchor: Vec3| -> Vec<WindowEntry> {
        (0..20)
            .map(|i| {
                let s = 2.0 * i as f64;
                let (x, y) = match i / 5 {
                    0 => (s, 0.0),
                    1 => (10.0, s - 10.0),
                    2 => (30.0 - s, 10.0),
                    _ => (0.0, 40.0 - s),
                };
                let tag = Vec3::new(x, y, 0.3 + rng.random_range(-0.2..0.2));
                let noise = if sigma > 0.0 { gauss.sample(rng) } else { 0.0 };
                WindowEntry {
                    range: (tag - anchor).norm() + noise,
                    tag,
                    source: (i, 0),
                }
            })
            .collect()
    };
    let anchor_at = |rng: &mut ChaCha8Rng| {
        Vec3::new(
            rng.random_range(-5.0..15.0),
            rng.random_range(-5.0..15.0),
            rng.random_range(1.5..3.0),
        )
    };
    let (mut tp, mut fp, mut fneg, mut clean_kept) = (0usize, 0usize, 0usize, 0usize);
    for trial in 0..trials {
        let anchor = anchor_at(&mut rng);
        let mut entries = window(&mut rng, anchor);
        let count = if trial % 2 == 0 { 5 } else { 6 };
        let mut idx: Vec<usize> = (0..20).collect();
        for i in 0..count {
            let j = rng.random_range(i..20);
            idx.swap(i, j);
        }
        let outliers = &idx[..count];
        for &i in outliers {
            entries[i].range += rng.random_range(0.5..2.0);
        }
        let res = ransac_reject(&entries, &cfg, trial).unwrap();
        for i in 0..20 {
            match (res.inliers.contains(&i), !outliers.contains(&i)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let anchor = anchor_at(&mut rng);
        let clean = window(&mut rng, anchor);
        clean_kept += ransac_reject(&clean, &cfg, 1000 + trial)
            .unwrap()
            .inliers
            .len();
    }
    (
        tp as f64 / (tp + fp).max(1) as f64,
        tp as f64 / (tp + fneg).max(1) as f64,
        clean_kept as f64 / (20 * trials) as f64,
    )
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let (precision, recall, retained) = ransac_trials(105, 0.0, 200);
    let secs = started.elapsed().as_secs_f64();
    let (np, nr, nk) = ransac_trials(105, 0.03, 200);
    outcome(
        precision >= 0.95 && recall >= 0.95 && retained == 1.0 && secs < 10.0,
        format!(
            "RANSAC, 200 windows, 25-30% outliers: precision {precision:.4}, recall {recall:.4}, \
             clean retained {:.1}%, {secs:.2} s (with 3 cm noise: {np:.3} / {nr:.3} / {:.1}%)",
            retained * 100.0,
            nk * 100.0
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut cfg = RunConfig::new(
        ScenarioSource::Preset("systematic".into()),
        Variant::MrUlins,
    );
    cfg.seed = Some(1);
    let art = run(&cfg).unwrap();
    let truth: Vec<(u32, f64, f64)> = art
        .scenario
        .anchors
        .iter()
        .map(|a| (a.id, a.scale, a.bias))
        .collect();
    let mut pass = art.failure.is_none() && !art.metrics.anchor_models.is_empty();
    let mut parts = Vec::new();
    for m in &art.metrics.anchor_models {
        let (_, s, b) = truth.iter().find(|t| t.0 == m.anchor_id).copied().unwrap();
        let ok = ((m.scale - 1.0) - (s - 1.0)).abs() <= 0.1 * (s - 1.0).abs()
            && (m.bias - b).abs() <= 0.02;
        pass &= ok;
        parts.push(format!("a{} s {:.4} b {:.3}", m.anchor_id, m.scale, m.bias));
    }
    outcome(
        pass,
        format!(
            "online error model after 120 s (truth s 1.01, b 0.2): {}",
            parts.join(", ")
        ),
    )
}

const NLOS: [&str; 3] = ["nlos-figure-eight", "nlos-circle", "nlos-loop"];

fn suite(variants: &[Variant], seeds: &[u64], anchors: Option<Vec<u32>>) -> SuiteReport {
    let mut cfgs = Vec::new();
    for name in NLOS {
        for &seed in seeds {
            for &v in variants {
                let mut cfg = RunConfig::new(ScenarioSource::Preset(name.into()), v);
                cfg.seed = Some(seed);
                cfg.anchors = anchors.clone();
                cfgs.push(cfg);
            }
        }
    }
    run_suite(&cfgs).unwrap()
}

fn criterion_7() -> Outcome {
    let report = suite(
        &[
            Variant::Ulins,
            Variant::UlinsOe,
            Variant::UlinsMor,
            Variant::MrUlins,
        ],
        &[1, 2, 3],
        None,
    );
    print!("{}", report.to_table());
    let rms = |v| report.rms(v);
    let (Some(u), Some(oe), Some(mor), Some(mr)) = (
        rms(Variant::Ulins),
        rms(Variant::UlinsOe),
        rms(Variant::UlinsMor),
        rms(Variant::MrUlins),
    ) else {
        return outcome(false, "ablation suite: a run failed");
    };
    outcome(
        mr <= oe && mr <= mor && mor <= u && mr <= 0.6 * u,
        format!("ablation RMS over 9 runs: ULINS {u:.4}, OE {oe:.4}, MOR {mor:.4}, MR {mr:.4} (MR/ULINS {:.2})", mr / u),
    )
}

fn criterion_8() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for pair in [[1, 3], [0, 2], [0, 3]] {
        let report = suite(
            &[Variant::Ulins, Variant::MrUlins],
            &[1],
            Some(pair.to_vec()),
        );
        let diverged = report.cells.iter().filter(|c| c.failure.is_some()).count();
        match (report.rms(Variant::Ulins), report.rms(Variant::MrUlins)) {
            (Some(u), Some(mr)) if diverged == 0 => {
                pass &= mr <= u;
                parts.push(format!("A{}A{} ULINS {u:.3} MR {mr:.3}", pair[0], pair[1]));
            }
            _ => {
                pass = false;
                parts.push(format!("A{}A{} {diverged} runs failed", pair[0], pair[1]));
            }
        }
    }
    outcome(
        pass,
        format!(
            "two-anchor NLOS, RMS over 3 scenarios: {}",
            parts.join("; ")
        ),
    )
}

fn criterion_9() -> Outcome {
    let sc = presets::wall_degenerate(1);
    let sim = simulate(&sc).unwrap();
    let horizontal = |v: Variant| {
        let cfg = RunConfig::new(ScenarioSource::Inline(Box::new(sc.clone())), v);
        let art = run_on(&cfg, &sc, &sim, None).unwrap();
        let errs = position_errors(&art.trajectory, &sim.truth.samples).unwrap();
        (art.failure, errs)
    };
    let peak = |errs: &[ulins::eval::PositionError], from: f64, to: f64| {
        errs.iter()
            .filter(|e| e.timestamp >= from && e.timestamp < to)
            .map(|e| e.error_horizontal)
            .fold(0.0, f64::max)
    };
    let (_, lio) = horizontal(Variant::TcLio);
    let (mr_failure, mr) = horizontal(Variant::MrUlins);
    let end = lio.last().map_or(0.0, |e| e.timestamp);
    let turns = [0.0, 30.0, 60.0, 90.0, 120.0 + 1e-6];
    let lio_peaks: Vec<f64> = turns.windows(2).map(|w| peak(&lio, w[0], w[1])).collect();
    // every segment worse than the one before, ending an order of
    // magnitude past the bound MR-ULINS has to meet
    let growing = lio_peaks.windows(2).all(|w| w[1] > w[0]) && lio_peaks[3] > 10.0 * 0.3;
    let mr_max = peak(&mr, 0.0, f64::INFINITY);
    outcome(
        growing && mr_failure.is_none() && mr_max < 0.3 && mr.last().map_or(0.0, |e| e.timestamp) > 119.0,
        format!(
            "wall + floor: TC-LIO horizontal peaks per 30 s {:?} m (run ends {end:.1} s); MR-ULINS max {mr_max:.3} m",
            lio_peaks.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut sc: Scenario = presets::by_name("nlos-circle", 7).unwrap();
    sc.duration = 30.0;
    let files = [
        "trajectory.tum",
        "metrics.toml",
        "cdf.csv",
        "diagnostics.csv",
        "config.toml",
    ];
    let mut outputs = Vec::new();
    for k in 0..2 {
        let mut cfg = RunConfig::new(
            ScenarioSource::Inline(Box::new(sc.clone())),
            Variant::MrUlins,
        );
        cfg.output_dir = Some(dir.path().join(format!("run{k}")));
        run(&cfg).unwrap();
        let bytes: Vec<Vec<u8>> = files
            .iter()
            .map(|f| std::fs::read(dir.path().join(format!("run{k}")).join(f)).unwrap())
            .collect();
        outputs.push(bytes);
    }
    let same = outputs[0] == outputs[1];
    outcome(
        same,
        format!(
            "two runs, same config and seed: {} identical files",
            if same { files.len() } else { 0 }
        ),
    )
}

fn criterion_11() -> Outcome {
    let mut sc = presets::by_name("nlos-figure-eight", 1).unwrap();
    sc.duration = 120.0;
    let desk = sc.rates.imu_hz == 200.0
        && sc.rates.lidar_hz == 10.0
        && sc.rates.uwb_hz == 5.0
        && sc.lidar.rays_per_frame <= 2000;
    let cfg = RunConfig::new(ScenarioSource::Inline(Box::new(sc)), Variant::MrUlins);
    let windows = cfg.estimator.max_lidar_clones == 20 && cfg.estimator.max_uwb_clones == 20;
    let started = Instant::now();
    let art = run(&cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    outcome(
        desk && windows && art.failure.is_none() && secs < 120.0,
        format!(
            "120 s scenario processed in {secs:.1} s wall ({:.1}x real time)",
            120.0 / secs
        ),
    )
}

fn main() {
    type Check = (&'static str, fn() -> Outcome);
    let criteria: [Check; 11] = [
        ("jacobians", criterion_1),
        ("mechanization closure", criterion_2),
        ("filter hygiene", criterion_3),
        ("anchor recovery", criterion_4),
        ("ransac classification", criterion_5),
        ("error-model observability", criterion_6),
        ("ablation ordering", criterion_7),
        ("sparse anchors", criterion_8),
        ("lidar degeneracy", criterion_9),
        ("determinism", criterion_10),
        ("throughput", criterion_11),
    ];
    // ACCEPTANCE_ONLY=4,5 runs a subset
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    println!();
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let started = Instant::now();
        let o = check();
        println!(
            "criterion {:>2} {:<26} {}  {} [{:.1} s]",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all selected acceptance criteria passed");
}
