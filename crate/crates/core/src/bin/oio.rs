use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oio_core::runner::{self, RunError, RunReport};
use oio_core::scenario::{ConfigError, ExperimentMode, ScenarioConfig};

#[derive(Parser)]
#[command(name = "oio", version, about = "Olfactory inertial odometry simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the calibration protocol and report the uncertainty budget.
    Calibrate(Common),
    /// Localize the source with the EKF, calibrated unless --cold.
    Navigate {
        #[command(flatten)]
        common: Common,
        /// Use the uncalibrated filter.
        #[arg(long)]
        cold: bool,
    },
    /// Cold and calibrated navigation on the same seeds.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed count `n` (seeds 1..=n) or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 3 when any seed fails.
    #[arg(long)]
    strict: bool,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, ConfigError> {
    let bad = |_| ConfigError::new("--seeds", format!("expected a count or a comma-separated list, got {text:?}"));
    if text.contains(',') {
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u64>().map_err(bad))
            .collect()
    } else {
        let n: u64 = text.trim().parse().map_err(bad)?;
        Ok((1..=n).collect())
    }
}

fn resolve(common: &Common, mode: ExperimentMode) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg = match &common.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    cfg.mode = mode;
    if let Some(seeds) = &common.seeds {
        cfg.seeds = parse_seeds(seeds)?;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summary(report: &RunReport) {
    for (mode, agg) in &report.aggregate {
        let fmt = |x: Option<f64>| x.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<20} runs {:>3}  failed {:>3}  median {:>8} mm  iqr {:>8} mm  p90 {:>8} mm",
            mode.label(),
            agg.runs,
            agg.failures,
            fmt(agg.median_error),
            fmt(agg.iqr_error),
            fmt(agg.p90_error)
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OIO_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    let (common, mode) = match &cli.command {
        Command::Calibrate(c) => (c, ExperimentMode::Calibrate),
        Command::Navigate { common, cold: true } => (common, ExperimentMode::NavigateCold),
        Command::Navigate { common, cold: false } => (common, ExperimentMode::NavigateCalibrated),
        Command::Compare(c) => (c, ExperimentMode::Compare),
    };
    let cfg = match resolve(common, mode) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    let report = match runner::run(&cfg, common.jobs) {
        Ok(r) => r,
        Err(RunError::Config(e)) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Err(e) = runner::write_outputs(&report, &cfg.output_dir) {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    summary(&report);
    for row in report.rows.iter().filter(|r| !r.ok) {
        eprintln!("seed {} {}: {}", row.seed, row.mode.label(), row.message.as_deref().unwrap_or("failed"));
    }
    println!("outputs in {}", cfg.output_dir.display());
    if common.strict && report.has_failures() {
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}
