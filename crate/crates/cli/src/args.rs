//! Command-line arguments. Angles and rates are in degrees and deg/s here;
//! everything is converted to radians before reaching the library.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gyrocal::Axis;

/// Environment variable that overrides the default seed.
pub const SEED_ENV: &str = "GYROCAL_SEED";
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "gyrocal", version, about = "Extrinsic rotation and scale-factor calibration of a gyroscope pair")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a gyro pair and write two CSV streams plus a truth JSON.
    Simulate(SimulateArgs),
    /// Calibrate two recorded CSV streams and write a JSON report.
    Calibrate(CalibrateArgs),
    /// Monte-Carlo SNR sweep with JSON statistics and plot CSV.
    Montecarlo(MonteCarloArgs),
    /// Residual, flex and bound diagnostics for two CSV streams.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Direct,
    Iterative,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    X,
    Y,
    Z,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Axis {
        match a {
            AxisArg::X => Axis::X,
            AxisArg::Y => Axis::Y,
            AxisArg::Z => Axis::Z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MechanismArg {
    Rate,
    Noise,
    Duration,
}

pub fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected 3 comma-separated numbers, got {}", v.len()))
}

/// Scenario knobs shared by `simulate` and `montecarlo`. Flags override the
/// fields of `--scenario`.
#[derive(Debug, Clone, Default, Args)]
pub struct ScenarioArgs {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Duration, s.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Sample rate, Hz.
    #[arg(long)]
    pub rate: Option<f64>,
    /// White noise per gyro, deg/s.
    #[arg(long)]
    pub sigma_n: Option<f64>,
    /// Bias random-walk intensity per gyro, deg/s.
    #[arg(long)]
    pub sigma_nu: Option<f64>,
    /// True extrinsic rotation as roll,pitch,yaw in degrees.
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    pub euler: Option<[f64; 3]>,
    /// Gyro-1 scale factors x,y,z.
    #[arg(long, value_parser = parse_triple)]
    pub scales1: Option<[f64; 3]>,
    /// Gyro-2 scale factors x,y,z.
    #[arg(long, value_parser = parse_triple)]
    pub scales2: Option<[f64; 3]>,
    /// Initial gyro-1 bias, deg/s.
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    pub bias1: Option<[f64; 3]>,
    /// Initial gyro-2 bias, deg/s.
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    pub bias2: Option<[f64; 3]>,
    /// Standard deviation of the skewness entries drawn per seed.
    #[arg(long)]
    pub skew_sigma: Option<f64>,
    /// Fraction of the duration covered by flex segments.
    #[arg(long)]
    pub flex_fraction: Option<f64>,
    #[arg(long, default_value_t = 6)]
    pub flex_segments: usize,
    /// Peak flex deflection, deg.
    #[arg(long, default_value_t = 0.5)]
    pub flex_peak: f64,
    /// Seed of the motion draw.
    #[arg(long)]
    pub motion_seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Output directory for gyro1.csv, gyro2.csv and truth.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Noise seed; defaults to $GYROCAL_SEED or 42.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shift of the gyro-2 timestamps, s.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub offset: f64,
}

/// Stream input and preprocessing shared by `calibrate` and `analyze`.
#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub gyro1: PathBuf,
    #[arg(long)]
    pub gyro2: PathBuf,
    /// Nominal sample rate, Hz; estimated from the timestamps when absent.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Largest time offset searched, s.
    #[arg(long, default_value_t = 1.0)]
    pub max_lag: f64,
    /// Keep only pairs with gyro-1 rate norm at least this, deg/s.
    #[arg(long)]
    pub min_norm: Option<f64>,
    /// Keep only pairs with gyro-1 rate norm at most this, deg/s.
    #[arg(long)]
    pub max_norm: Option<f64>,
    /// Stop collecting pairs once every axis reaches this SNR.
    #[arg(long)]
    pub target_snr: Option<f64>,
    /// White noise per gyro, deg/s, for SNR figures.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Ground-truth JSON from `simulate`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Output JSON path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FlexArgs {
    /// Samples removed on each side of a rejected one.
    #[arg(long, default_value_t = 5)]
    pub hysteresis: usize,
    /// Rejection threshold in units of the residual spread.
    #[arg(long, default_value_t = 3.0)]
    pub flex_threshold: f64,
    /// Use the plain deviation instead of the robust spread.
    #[arg(long)]
    pub plain_spread: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value_t = SolverArg::Direct)]
    pub solver: SolverArg,
    /// Drop flex-suspect pairs and recalibrate.
    #[arg(long)]
    pub mitigate_flex: bool,
    #[command(flatten)]
    pub flex: FlexArgs,
    /// Resolve the global scale assuming both gyros' scale on this axis is near one.
    #[arg(long, value_enum)]
    pub prior_axis: Option<AxisArg>,
    #[arg(long, default_value_t = gyrocal::direct::DEFAULT_CLASSIFY_TOL)]
    pub classify_tol: f64,
    #[arg(long, default_value_t = gyrocal::direct::DEFAULT_RANK_TOL)]
    pub rank_tol: f64,
    /// Treat a degenerate placement as an error.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Clone, Args)]
pub struct MonteCarloArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Runs per multiplier.
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = MechanismArg::Rate)]
    pub mechanism: MechanismArg,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0, 4.0])]
    pub multipliers: Vec<f64>,
    /// Stats JSON path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub plot_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub flex: FlexArgs,
    /// Calibration report whose direct solution is analyzed instead of a fresh fit.
    #[arg(long)]
    pub result: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub bins: usize,
}
