//! JSON report types. Rotations are in mdeg, scale errors in percent, rates
//! in rad/s. Every report deserializes back to an equal value.

use gyrocal::analysis::SnrMechanism;
use gyrocal::direct::{CalibrationResult, ConfigClass, GlobalScale, Observability};
use gyrocal::geometry::{rad_to_deg, rotation_error, rotation_error_vector, scale_error, so3_log, Vec3};
use gyrocal::io::TruthRecord;
use gyrocal::{Rotation, ScaleVector};
use serde::{Deserialize, Serialize};

pub fn mdeg(rad: f64) -> f64 {
    rad_to_deg(rad) * 1e3
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn arr_mdeg(v: &Vec3) -> [f64; 3] {
    [mdeg(v.x), mdeg(v.y), mdeg(v.z)]
}

/// `NaN` becomes `None` so the report stays valid JSON.
pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rotation_error_mdeg: f64,
    /// `Log(C_hat C^T)`.
    pub rotation_error_vector_mdeg: [f64; 3],
    /// Global-scale-invariant RMS scale error.
    pub scale_error_percent: f64,
}

impl ErrorReport {
    pub fn new(r: &CalibrationResult, truth: &TruthRecord) -> gyrocal::Result<Self> {
        let c = truth.rotation()?;
        let s1 = ScaleVector::new(truth.scales1[0], truth.scales1[1], truth.scales1[2])?;
        let s2 = ScaleVector::new(truth.scales2[0], truth.scales2[1], truth.scales2[2])?;
        Ok(ErrorReport {
            rotation_error_mdeg: mdeg(rotation_error(&r.c, &c)),
            rotation_error_vector_mdeg: arr_mdeg(&rotation_error_vector(&r.c, &c)),
            scale_error_percent: 100.0 * scale_error(&r.s1, &r.s2, &s1, &s2),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionReport {
    pub solver: String,
    /// Row major.
    pub c: [f64; 9],
    pub rotation_vector_mdeg: [f64; 3],
    pub scales1: [f64; 3],
    pub scales2: [f64; 3],
    pub global_scale: GlobalScale,
    /// `b1 - A b2`, rad/s.
    pub combined_bias: [f64; 3],
    pub config: ConfigClass,
    pub observability: Observability,
    pub lambda: Option<f64>,
    /// rad/s
    pub residual_rms: f64,
    pub iterations: Option<usize>,
    pub errors: Option<ErrorReport>,
}

impl SolutionReport {
    pub fn new(
        solver: &str,
        r: &CalibrationResult,
        iterations: Option<usize>,
        truth: Option<&TruthRecord>,
    ) -> gyrocal::Result<Self> {
        Ok(SolutionReport {
            solver: solver.to_string(),
            c: r.c.to_row_major(),
            rotation_vector_mdeg: arr_mdeg(&so3_log(&r.c)),
            scales1: arr(r.s1.as_vec()),
            scales2: arr(r.s2.as_vec()),
            global_scale: r.global_scale,
            combined_bias: arr(&r.combined_bias),
            config: r.config,
            observability: r.observability,
            lambda: r.lambda,
            residual_rms: r.diagnostics.residual_rms,
            iterations,
            errors: truth.map(|t| ErrorReport::new(r, t)).transpose()?,
        })
    }

    pub fn rotation(&self) -> gyrocal::Result<Rotation> {
        Rotation::from_row_major(&self.c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationReport {
    /// rad/s
    pub sigma_r: f64,
    pub fraction_removed: f64,
    pub n_removed: usize,
    pub passes: usize,
    /// Direct solution on all pairs.
    pub before: SolutionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_pairs: usize,
    /// Applied gyro-2 time offset, s.
    pub time_offset_s: f64,
    pub snr_per_axis: [f64; 3],
    pub direct: Option<SolutionReport>,
    pub iterative: Option<SolutionReport>,
    /// Rotation difference between the two solvers with `--solver both`.
    pub solver_difference_mdeg: Option<f64>,
    pub mitigation: Option<MitigationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub multiplier: f64,
    pub snr: Option<f64>,
    pub rmse_rotation_mrad: f64,
    pub rmse_scale_percent: f64,
    /// RMS of the first-order skewness prediction, when skew is simulated.
    pub predicted_rotation_mrad: Option<f64>,
    pub successful_runs: usize,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub mechanism: SnrMechanism,
    pub runs: usize,
    pub seed: u64,
    pub rows: Vec<McRow>,
    /// Log-log slope of RMSE against SNR; absent for single-run sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_rotation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// rad/s
    pub lower: f64,
    pub count: usize,
}

/// Pearson correlation of residual norm against gyro-1 rate norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub all: Option<f64>,
    /// Over the samples the flex detector removes.
    pub flagged: Option<f64>,
    /// Over the true flex segments, when a truth file is given.
    pub truth_flex: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    /// rad/s
    pub sigma_r: f64,
    pub threshold: f64,
    pub hysteresis: usize,
    pub n_removed: usize,
    pub fraction_removed: f64,
    /// Removed time spans `[start, end]`, s.
    pub spans: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub snr: f64,
    /// rad^2
    pub lower_bound_trace: f64,
    /// Trace of the inverse information matrix, rad^2.
    pub information_trace: Option<f64>,
    pub lower_bound_rmse_mdeg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub n_pairs: usize,
    pub time_offset_s: f64,
    /// `fit` or the path of the analyzed report.
    pub model_source: String,
    /// rad/s
    pub residual_rms: f64,
    pub histogram: Vec<HistogramBin>,
    pub correlation: CorrelationReport,
    pub mask: MaskReport,
    pub bound: BoundReport,
}
