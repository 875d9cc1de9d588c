use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ulins::eval::MetricsReport;
use ulins::io;
use ulins::pipeline::Variant;
use ulins::runner::{run, run_suite, RunConfig, ScenarioSource};
use ulins::sim::simulate;

#[derive(Parser)]
#[command(
    name = "ulins",
    version,
    about = "UWB/LiDAR/IMU odometry: simulate, run, compare"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate sensor streams and ground truth for a scenario.
    Simulate {
        /// Preset name or scenario TOML file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one estimator variant on a scenario.
    Run {
        #[command(flatten)]
        opts: RunOpts,
        #[arg(long, default_value = "mr-ulins")]
        variant: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (scenario, variant, seed) combination and print an RMSE table.
    Suite {
        #[command(flatten)]
        opts: RunOpts,
        /// Comma-separated variants.
        #[arg(
            long,
            default_value = "ulins,ulins-oe,ulins-mor,mr-ulins",
            value_delimiter = ','
        )]
        variant: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1", value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize the run directories under a path.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunOpts {
    /// Preset name or scenario TOML file; repeat or comma-separate for suites.
    #[arg(long, value_delimiter = ',', required_unless_present = "config")]
    scenario: Vec<String>,
    /// Run config TOML; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// LiDAR window length N.
    #[arg(long)]
    window_lidar: Option<usize>,
    /// UWB window length M.
    #[arg(long)]
    window_uwb: Option<usize>,
    /// Comma-separated anchor ids to keep.
    #[arg(long, value_delimiter = ',')]
    anchors: Option<Vec<u32>>,
}

impl RunOpts {
    fn base(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(RunConfig::from_toml(&text)?)
            }
            None => Ok(RunConfig::new(
                ScenarioSource::Preset("los".into()),
                Variant::MrUlins,
            )),
        }
    }

    fn configs(&self, variants: &[Variant], seeds: &[Option<u64>]) -> Result<Vec<RunConfig>> {
        let base = self.base()?;
        let scenarios: Vec<ScenarioSource> = if self.scenario.is_empty() {
            vec![base.scenario.clone()]
        } else {
            self.scenario
                .iter()
                .map(|s| ScenarioSource::parse(s))
                .collect()
        };
        let mut out = Vec::new();
        for scenario in &scenarios {
            for &seed in seeds {
                for &variant in variants {
                    let mut cfg = base.clone();
                    cfg.scenario = scenario.clone();
                    cfg.variant = variant;
                    cfg.seed = seed.or(base.seed);
                    if let Some(n) = self.window_lidar {
                        cfg.estimator.max_lidar_clones = n;
                    }
                    if let Some(m) = self.window_uwb {
                        cfg.estimator.max_uwb_clones = m;
                    }
                    if let Some(ids) = &self.anchors {
                        cfg.anchors = Some(ids.clone());
                    }
                    cfg.validate()?;
                    out.push(cfg);
                }
            }
        }
        Ok(out)
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    Ok(s.trim().parse::<Variant>()?)
}

fn run_dir_name(cfg: &RunConfig) -> String {
    let scenario = match &cfg.scenario {
        ScenarioSource::Preset(n) => n.clone(),
        ScenarioSource::Path(p) => p
            .file_stem()
            .map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned()),
        ScenarioSource::Inline(s) => s.name.clone(),
    };
    format!(
        "{scenario}-{}-seed{}",
        cfg.variant.name(),
        cfg.seed.unwrap_or(0)
    )
}

fn cmd_simulate(scenario: &str, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut sc = ScenarioSource::parse(scenario).resolve(seed.unwrap_or(0))?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let sim = simulate(&sc)?;
    fs::create_dir_all(out)?;
    io::write_atomic(&out.join("scenario.toml"), sc.to_toml()?.as_bytes())?;
    io::write_atomic(
        &out.join("anchors.toml"),
        io::anchors_to_toml(&sc.anchor_table()?)?.as_bytes(),
    )?;
    let mut buf = Vec::new();
    io::write_imu_csv(&mut buf, &sim.imu)?;
    io::write_atomic(&out.join("imu.csv"), &buf)?;
    let ranges: Vec<_> = sim.ranges.iter().map(|r| r.measurement).collect();
    let mut buf = Vec::new();
    io::write_range_csv(&mut buf, &ranges)?;
    io::write_atomic(&out.join("ranges.csv"), &buf)?;
    let mut buf = Vec::new();
    io::write_cloud_binary(&mut buf, &sim.lidar)?;
    io::write_atomic(&out.join("clouds.ulpc"), &buf)?;
    let truth: Vec<_> = sim
        .truth
        .samples
        .iter()
        .map(|s| (s.timestamp, s.pose))
        .collect();
    io::write_atomic(
        &out.join("truth.tum"),
        io::trajectory_to_tum(&truth).as_bytes(),
    )?;
    println!(
        "{}: {} IMU samples, {} LiDAR frames, {} ranges ({} NLOS) -> {}",
        sc.name,
        sim.imu.len(),
        sim.lidar.len(),
        sim.ranges.len(),
        sim.ranges.iter().filter(|r| r.nlos).count(),
        out.display()
    );
    Ok(())
}

fn print_metrics(m: &MetricsReport) {
    println!(
        "{} / {} (seed {}): RMSE 3-D {:.4} m, horizontal {:.4} m, max {:.4} m over {} samples",
        m.scenario, m.variant, m.seed, m.rmse_3d, m.rmse_horizontal, m.max_error_3d, m.samples
    );
    for a in &m.anchor_models {
        println!(
            "  anchor {}: scale {:.5}, bias {:.4} m",
            a.anchor_id, a.scale, a.bias
        );
    }
    if let Some(f) = &m.failure {
        println!("  FAILED: {f}");
    }
}

fn cmd_report(out: &Path) -> Result<()> {
    let mut dirs: Vec<PathBuf> = if out.join("metrics.toml").exists() {
        vec![out.to_path_buf()]
    } else {
        fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("metrics.toml").exists())
            .collect()
    };
    dirs.sort();
    if dirs.is_empty() {
        bail!(
            "no run directories with metrics.toml under {}",
            out.display()
        );
    }
    for d in dirs {
        let m = MetricsReport::from_toml(&fs::read_to_string(d.join("metrics.toml"))?)?;
        print_metrics(&m);
        if let Ok(timing) = fs::read_to_string(d.join("timing.csv")) {
            for line in timing.lines().skip(1) {
                println!("  timing {line}");
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            scenario,
            seed,
            out,
        } => cmd_simulate(&scenario, seed, &out),
        Command::Run {
            opts,
            variant,
            seed,
            out,
        } => {
            let mut cfgs = opts.configs(&[parse_variant(&variant)?], &[seed])?;
            if cfgs.len() != 1 {
                bail!("`run` takes exactly one scenario; use `suite` for several");
            }
            let mut cfg = cfgs.remove(0);
            cfg.output_dir = out;
            let art = run(&cfg)?;
            print_metrics(&art.metrics);
            println!(
                "  wall time {:.2} s for {:.1} s of data",
                art.wall_time.as_secs_f64(),
                art.scenario.duration
            );
            if art.failure.is_some() {
                std::process::exit(2);
            }
            Ok(())
        }
        Command::Suite {
            opts,
            variant,
            seed,
            out,
        } => {
            let variants = variant
                .iter()
                .map(|v| parse_variant(v))
                .collect::<Result<Vec<_>>>()?;
            let seeds: Vec<Option<u64>> = seed.into_iter().map(Some).collect();
            let mut cfgs = opts.configs(&variants, &seeds)?;
            if let Some(dir) = &out {
                for cfg in &mut cfgs {
                    cfg.output_dir = Some(dir.join(run_dir_name(cfg)));
                }
            }
            let report = run_suite(&cfgs)?;
            print!("{}", report.to_table());
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
                io::write_atomic(&dir.join("suite.csv"), report.to_csv().as_bytes())?;
            }
            Ok(())
        }
        Command::Report { out } => cmd_report(&out),
    }
}
