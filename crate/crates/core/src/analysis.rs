//! Error statistics, theoretical bounds, skewness error prediction and flex
//! handling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::direct::{calibrate, CalibrateOptions, CalibrationResult, MitigationSummary};
use crate::error::{Error, Result};
use crate::geometry::{rotation_error, rotation_error_vector, scale_error, skew, Mat3, Rotation, Vec3};
use crate::preprocess::{center, AlignedPairs};
use crate::sim::{make_scenario, rng_for, GroundTruth, Scenario};
use rand::RngCore;

/// Lower bound on the trace of the rotation-error covariance given the
/// mean squared SNR.
pub fn covariance_lower_bound(snr_sq_mean: f64) -> f64 {
    4.5 / snr_sq_mean
}

/// `(1 / sigma^2) sum [w]x^T [w]x`.
pub fn information_matrix(w: &[Vec3], sigma: f64) -> Mat3 {
    w.iter()
        .map(|v| {
            let s = skew(v);
            s.transpose() * s
        })
        .fold(Mat3::zeros(), |a, b| a + b)
        / (sigma * sigma)
}

/// Inverse of [`information_matrix`].
pub fn rotation_covariance(w: &[Vec3], sigma: f64) -> Result<Mat3> {
    let h = information_matrix(w, sigma);
    let eig = h.symmetric_eigenvalues();
    if !(eig.min() > 1e-12 * eig.max()) {
        return Err(Error::SingularInformation);
    }
    h.try_inverse().ok_or(Error::SingularInformation)
}

/// Small skewness terms of both intrinsics, as `S_i = D_i (I + S~_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewErrorModel {
    pub s1_tilde: Mat3,
    pub s2_tilde: Mat3,
}

impl SkewErrorModel {
    pub fn new(s1_tilde: Mat3, s2_tilde: Mat3) -> Result<Self> {
        for s in [&s1_tilde, &s2_tilde] {
            for r in 0..3 {
                for c in 0..=r {
                    if s[(r, c)] != 0.0 {
                        return Err(Error::InvalidConfig(
                            "skew terms must be strictly upper triangular".into(),
                        ));
                    }
                }
            }
        }
        Ok(SkewErrorModel { s1_tilde, s2_tilde })
    }

    /// Splits upper-triangular intrinsics into scale and skew parts.
    pub fn from_intrinsics(s1: &Mat3, s2: &Mat3) -> Result<Self> {
        let part = |s: &Mat3| {
            let d = s.diagonal();
            Mat3::from_fn(|r, c| if c > r { s[(r, c)] / d[r] } else { 0.0 })
        };
        Self::new(part(s1), part(s2))
    }
}

/// Rotation vector of the antisymmetric part of a skew term, doubled.
pub fn skew_axis_vector(s: &Mat3) -> Vec3 {
    Vec3::new(-s[(1, 2)], s[(0, 2)], -s[(0, 1)])
}

/// First-order rotation error caused by skewness, `(w1 - C w2) / 2`,
/// comparable with `Log(C_hat C^T)`.
pub fn predict_skew_rotation_error(model: &SkewErrorModel, c: &Rotation) -> Vec3 {
    (skew_axis_vector(&model.s1_tilde) - c.rotate(&skew_axis_vector(&model.s2_tilde))) * 0.5
}

/// `w1(k) - S1 C S2^-1 w2(k)` for each pair.
pub fn compute_residuals(p: &AlignedPairs, result: &CalibrationResult) -> Vec<Vec3> {
    let a = result.model_matrix();
    p.w1.iter().zip(&p.w2).map(|(w1, w2)| w1 - a * w2).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlexOptions {
    /// Samples dropped on each side of a rejected one.
    pub hysteresis: usize,
    /// Rejection threshold in units of `sigma_r`.
    pub threshold: f64,
    /// Median-absolute-deviation scale instead of the sample deviation.
    pub robust: bool,
    /// Detection/recalibration rounds; each round re-detects on all pairs
    /// using the latest estimate and stops early once the mask is stable.
    pub max_passes: usize,
}

impl Default for FlexOptions {
    fn default() -> Self {
        FlexOptions {
            hysteresis: 5,
            threshold: 3.0,
            robust: true,
            max_passes: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexMask {
    pub keep: Vec<bool>,
    /// Spread of the residual vectors, rad/s.
    pub sigma_r: f64,
    pub hysteresis: usize,
}

impl FlexMask {
    pub fn n_removed(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn fraction_removed(&self) -> f64 {
        self.n_removed() as f64 / self.keep.len() as f64
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Vector spread of the residuals: the RMS distance from their mean, or in
/// robust mode `sqrt(3) * 1.4826 * MAD` of the pooled components. Both
/// equal `sigma sqrt(3)` for isotropic Gaussian residuals of per-axis
/// deviation `sigma`.
pub fn residual_spread(residuals: &[Vec3], robust: bool) -> f64 {
    let n = residuals.len() as f64;
    if robust {
        let mut comps: Vec<f64> = residuals.iter().flat_map(|r| r.iter().copied()).collect();
        let med = median(&mut comps);
        let mut dev: Vec<f64> = comps.iter().map(|c| (c - med).abs()).collect();
        3f64.sqrt() * 1.4826 * median(&mut dev)
    } else {
        let mean = residuals.iter().fold(Vec3::zeros(), |a, r| a + r) / n;
        (residuals.iter().map(|r| (r - mean).norm_squared()).sum::<f64>() / n).sqrt()
    }
}

/// Rejects residuals with `|r| > threshold * sigma_r`, widened by the
/// hysteresis window.
pub fn detect_flex(residuals: &[Vec3], opts: &FlexOptions) -> Result<FlexMask> {
    if residuals.len() < 10 {
        return Err(Error::TooFewSamples {
            got: residuals.len(),
            need: 10,
        });
    }
    let sigma_r = residual_spread(residuals, opts.robust).max(f64::MIN_POSITIVE);
    let n = residuals.len();
    let mut keep = vec![true; n];
    let limit = opts.threshold * sigma_r;
    for (k, r) in residuals.iter().enumerate() {
        if r.norm() > limit {
            let lo = k.saturating_sub(opts.hysteresis);
            let hi = (k + opts.hysteresis).min(n - 1);
            keep[lo..=hi].iter_mut().for_each(|x| *x = false);
        }
    }
    Ok(FlexMask {
        keep,
        sigma_r,
        hysteresis: opts.hysteresis,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mitigation {
    pub before: CalibrationResult,
    pub after: CalibrationResult,
    pub mask: FlexMask,
    pub passes: usize,
}

/// Calibrates, drops flex-suspect pairs by residual, and calibrates again on
/// the re-centered remainder.
pub fn mitigate_and_recalibrate(
    p: &AlignedPairs,
    cal: &CalibrateOptions,
    flex: &FlexOptions,
) -> Result<Mitigation> {
    let centered = if p.is_centered() { p.clone() } else { center(p) };
    let raw = centered.uncentered();
    let before = calibrate(&centered, cal)?;
    let mut after = before;
    let mut mask: Option<FlexMask> = None;
    let mut passes = 0;
    while passes < flex.max_passes.max(1) {
        let next = detect_flex(&compute_residuals(&centered, &after), flex)?;
        if mask.as_ref().is_some_and(|m| m.keep == next.keep) {
            break;
        }
        let kept = raw
            .subset(&next.keep)
            .map_err(|_| Error::RankDeficient("flex mitigation removed every pair".into()))?;
        after = calibrate(&kept, cal)?;
        mask = Some(next);
        passes += 1;
    }
    let mask = mask.expect("at least one pass");
    after.diagnostics.mitigation = Some(MitigationSummary {
        sigma_r: mask.sigma_r,
        fraction_removed: mask.fraction_removed(),
        n_removed: mask.n_removed(),
    });
    Ok(Mitigation {
        before,
        after,
        mask,
        passes,
    })
}

/// Pearson correlation; `NaN` when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Equal-width histogram over `[min, max]` as `(lower edge, count)`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, c))
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Monte-Carlo error statistics for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McStats {
    /// rad
    pub rmse_rotation: f64,
    /// Fraction (scale-invariant scale error).
    pub rmse_scale: f64,
    pub rotation_errors: Vec<f64>,
    pub scale_errors: Vec<f64>,
    /// `Log(C_hat C^T)` per successful run.
    pub rotation_error_vectors: Vec<Vec3>,
    /// First-order skewness prediction per successful run, when skew is
    /// simulated.
    pub predicted_rotation_errors: Vec<Vec3>,
    /// Total SNR of the true rates (`None` without noise).
    pub snr: Option<f64>,
    pub m_runs: usize,
    pub failed_runs: usize,
    pub failures: Vec<String>,
}

impl McStats {
    /// RMS norm of the predicted skewness errors.
    pub fn predicted_rmse(&self) -> Option<f64> {
        if self.predicted_rotation_errors.is_empty() {
            return None;
        }
        let n: Vec<f64> = self.predicted_rotation_errors.iter().map(|v| v.norm()).collect();
        Some(rms(&n))
    }
}

/// Seed of run `index` in a batch.
pub fn run_seed(seed: u64, index: u64) -> u64 {
    rng_for(seed, 1000 + index).next_u64()
}

struct RunOutcome {
    rot: f64,
    scale: f64,
    theta: Vec3,
    predicted: Option<Vec3>,
    snr: Option<f64>,
}

fn one_run(sc: &Scenario, seed: u64, opts: &CalibrateOptions) -> Result<RunOutcome> {
    let (p, truth): (AlignedPairs, GroundTruth) = make_scenario(sc, seed)?;
    let r = calibrate(&p, opts)?;
    let predicted = match sc.skew_sigma {
        Some(_) => Some(predict_skew_rotation_error(
            &SkewErrorModel::from_intrinsics(&truth.s1, &truth.s2)?,
            &truth.c,
        )),
        None => None,
    };
    Ok(RunOutcome {
        rot: rotation_error(&r.c, &truth.c),
        scale: scale_error(&r.s1, &r.s2, &truth.scales1(), &truth.scales2()),
        theta: rotation_error_vector(&r.c, &truth.c),
        predicted,
        snr: (truth.sigma_n > 0.0).then(|| truth.snr()),
    })
}

/// `runs` independent noise draws of one scenario, calibrated in parallel.
/// Failed runs are counted and excluded from the RMSE.
pub fn mc_run(sc: &Scenario, runs: usize, seed: u64, opts: &CalibrateOptions) -> Result<McStats> {
    if runs == 0 {
        return Err(Error::InvalidConfig("at least one run is required".into()));
    }
    let outcomes: Vec<Result<RunOutcome>> = (0..runs as u64)
        .into_par_iter()
        .map(|i| one_run(sc, run_seed(seed, i), opts))
        .collect();
    let mut stats = McStats {
        rmse_rotation: 0.0,
        rmse_scale: 0.0,
        rotation_errors: Vec::new(),
        scale_errors: Vec::new(),
        rotation_error_vectors: Vec::new(),
        predicted_rotation_errors: Vec::new(),
        snr: None,
        m_runs: runs,
        failed_runs: 0,
        failures: Vec::new(),
    };
    for o in outcomes {
        match o {
            Ok(o) => {
                stats.rotation_errors.push(o.rot);
                stats.scale_errors.push(o.scale);
                stats.rotation_error_vectors.push(o.theta);
                stats.predicted_rotation_errors.extend(o.predicted);
                stats.snr = o.snr;
            }
            Err(e) => {
                stats.failed_runs += 1;
                stats.failures.push(e.to_string());
            }
        }
    }
    if stats.rotation_errors.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "all {runs} runs failed; first error: {}",
            stats.failures[0]
        )));
    }
    stats.rmse_rotation = rms(&stats.rotation_errors);
    stats.rmse_scale = rms(&stats.scale_errors);
    Ok(stats)
}

/// How an SNR multiplier `m` is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrMechanism {
    /// Rates scaled by `m`.
    Rate,
    /// Noise divided by `m`.
    Noise,
    /// Duration scaled by `m^2`.
    Duration,
}

impl std::str::FromStr for SnrMechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rate" => Ok(SnrMechanism::Rate),
            "noise" => Ok(SnrMechanism::Noise),
            "duration" => Ok(SnrMechanism::Duration),
            _ => Err(Error::InvalidConfig(format!("unknown SNR mechanism '{s}'"))),
        }
    }
}

impl SnrMechanism {
    pub fn apply(self, sc: &Scenario, m: f64) -> Scenario {
        let mut out = sc.clone();
        match self {
            SnrMechanism::Rate => out.profile.gain *= m,
            SnrMechanism::Noise => out.model.sigma_n /= m,
            SnrMechanism::Duration => {
                out.profile.duration *= m * m;
                if let Some(f) = &mut out.flex {
                    f.segments
                        .iter_mut()
                        .for_each(|s| *s = (s.0 * m * m, s.1 * m * m));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub multiplier: f64,
    pub stats: McStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub mechanism: SnrMechanism,
    pub rows: Vec<SweepRow>,
    /// Log-log slope of RMSE against SNR; needs two rows and two runs.
    pub slope_rotation: Option<f64>,
    pub slope_scale: Option<f64>,
}

pub fn sweep(
    sc: &Scenario,
    mechanism: SnrMechanism,
    multipliers: &[f64],
    runs: usize,
    seed: u64,
    opts: &CalibrateOptions,
) -> Result<Sweep> {
    if multipliers.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::InvalidConfig("SNR multipliers must be positive".into()));
    }
    let rows = multipliers
        .iter()
        .map(|&m| {
            Ok(SweepRow {
                multiplier: m,
                stats: mc_run(&mechanism.apply(sc, m), runs, seed, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let slopes = if runs >= 2 && rows.len() >= 2 {
        let x: Vec<f64> = rows
            .iter()
            .map(|r| r.stats.snr.unwrap_or(r.multiplier))
            .collect();
        let rot: Vec<f64> = rows.iter().map(|r| r.stats.rmse_rotation).collect();
        let sc: Vec<f64> = rows.iter().map(|r| r.stats.rmse_scale).collect();
        (Some(loglog_slope(&x, &rot)), Some(loglog_slope(&x, &sc)))
    } else {
        (None, None)
    };
    Ok(Sweep {
        mechanism,
        rows,
        slope_rotation: slopes.0,
        slope_scale: slopes.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{deg_to_rad, Axis, ScaleVector};
    use crate::sim::{FlexSpec, MotionProfile, SensorModel};
    use approx::assert_abs_diff_eq;

    #[test]
    fn bound_examples() {
        assert_eq!(covariance_lower_bound(4.5), 1.0);
        assert_abs_diff_eq!(covariance_lower_bound(4.5e6), 1e-6, epsilon = 1e-18);
    }

    #[test]
    fn information_examples() {
        let h = information_matrix(&[Vec3::z()], 1.0);
        assert_eq!(h, Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0)));
        let about_z: Vec<Vec3> = (1..20).map(|k| Vec3::z() * k as f64).collect();
        assert_eq!(rotation_covariance(&about_z, 1.0), Err(Error::SingularInformation));

        // per-axis: [w]x^T [w]x = |w|^2 I - w w^T
        let w = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.5, 0.1, 0.7)];
        let oracle: Mat3 = w
            .iter()
            .map(|v| Mat3::identity() * v.norm_squared() - v * v.transpose())
            .sum::<Mat3>()
            / 4.0;
        assert_abs_diff_eq!(information_matrix(&w, 2.0), oracle, epsilon = 1e-12);
    }

    #[test]
    fn weaker_axis_increases_covariance_trace() {
        let base: Vec<Vec3> = (0..500)
            .map(|k| {
                let t = k as f64 * 0.01;
                Vec3::new((3.0 * t).sin(), (5.1 * t).cos(), (7.3 * t + 0.5).sin())
            })
            .collect();
        let e = base.iter().fold(Vec3::zeros(), |a, w| a + w.component_mul(w));
        let g = crate::sim::energy_preserving_gains(&e, Axis::X, 0.1).unwrap();
        let imb: Vec<Vec3> = base.iter().map(|w| w.component_mul(&g)).collect();
        let tb = rotation_covariance(&base, 0.01).unwrap().trace();
        let ti = rotation_covariance(&imb, 0.01).unwrap().trace();
        assert!(ti > tb);
    }

    #[test]
    fn skew_prediction_examples() {
        let z = SkewErrorModel::new(Mat3::zeros(), Mat3::zeros()).unwrap();
        assert_eq!(predict_skew_rotation_error(&z, &Rotation::identity()), Vec3::zeros());
        let mut s1 = Mat3::zeros();
        s1[(0, 1)] = 2e-4;
        let m = SkewErrorModel::new(s1, Mat3::zeros()).unwrap();
        assert_eq!(
            predict_skew_rotation_error(&m, &Rotation::identity()),
            Vec3::new(0.0, 0.0, -1e-4)
        );
        let mut lower = Mat3::zeros();
        lower[(1, 0)] = 1e-4;
        assert!(SkewErrorModel::new(lower, Mat3::zeros()).is_err());
    }

    #[test]
    fn skew_prediction_matches_noiseless_calibration() {
        // with no noise the only rotation error is the skewness one
        let sc = Scenario {
            model: SensorModel::noiseless(SensorModel::default().c_true),
            skew_sigma: Some(1e-4),
            ..Default::default()
        };
        let (p, t) = make_scenario(&sc, 4).unwrap();
        let r = calibrate(&p, &CalibrateOptions::default()).unwrap();
        let pred = predict_skew_rotation_error(&SkewErrorModel::from_intrinsics(&t.s1, &t.s2).unwrap(), &t.c);
        let meas = rotation_error_vector(&r.c, &t.c);
        assert!((meas - pred).norm() < 0.05 * pred.norm(), "{meas:?} {pred:?}");
    }

    #[test]
    fn residuals_vanish_for_exact_result() {
        let c = SensorModel::default().c_true;
        let s1 = ScaleVector::new(1.01, 0.99, 1.0).unwrap();
        let sc = Scenario {
            model: SensorModel::noiseless(c).with_scales(&s1, &ScaleVector::ones()),
            ..Default::default()
        };
        let (p, _) = make_scenario(&sc, 0).unwrap();
        let p = center(&p);
        let r = calibrate(&p, &CalibrateOptions::default()).unwrap();
        assert!(compute_residuals(&p, &r).iter().all(|v| v.norm() < 1e-10));
    }

    #[test]
    fn residual_spread_matches_combined_noise() {
        let (p, t) = make_scenario(&Scenario::default(), 6).unwrap();
        let p = center(&p);
        let r = calibrate(&p, &CalibrateOptions::default()).unwrap();
        let res = compute_residuals(&p, &r);
        for robust in [false, true] {
            let per_axis = residual_spread(&res, robust) / 3f64.sqrt();
            assert!((per_axis / t.sigma() - 1.0).abs() < 0.05, "{per_axis} vs {}", t.sigma());
        }
    }

    #[test]
    fn detect_flex_window_and_noise_floor() {
        let noise: Vec<Vec3> = (0..200)
            .map(|k| {
                let t = k as f64;
                Vec3::new((t * 1.3).sin(), (t * 2.9).cos(), (t * 0.7).sin()) * 1e-3
            })
            .collect();
        let m = detect_flex(&noise, &FlexOptions::default()).unwrap();
        assert!(m.keep.iter().all(|k| *k));

        let mut spiked = noise.clone();
        spiked[50] = Vec3::new(1.0, 0.0, 0.0);
        let m = detect_flex(
            &spiked,
            &FlexOptions {
                hysteresis: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let removed: Vec<usize> = (0..200).filter(|&k| !m.keep[k]).collect();
        assert_eq!(removed, vec![48, 49, 50, 51, 52]);
        assert!(detect_flex(&noise[..5], &FlexOptions::default()).is_err());
    }

    #[test]
    fn mitigation_on_rigid_data_is_nearly_noop() {
        let (p, t) = make_scenario(&Scenario::default(), 8).unwrap();
        let m = mitigate_and_recalibrate(&p, &CalibrateOptions::default(), &FlexOptions::default()).unwrap();
        assert!(m.mask.fraction_removed() < 0.01);
        let before = rotation_error(&m.before.c, &t.c);
        let diff = rotation_error(&m.before.c, &m.after.c);
        assert!(diff < before.max(1e-6));
        assert!(m.after.diagnostics.mitigation.is_some());
    }

    #[test]
    fn detection_is_idempotent_on_rigid_data() {
        let (p, _) = make_scenario(&Scenario::default(), 9).unwrap();
        let p = center(&p);
        let r = calibrate(&p, &CalibrateOptions::default()).unwrap();
        let opts = FlexOptions::default();
        let first = detect_flex(&compute_residuals(&p, &r), &opts).unwrap();
        let kept = center(&p.uncentered().subset(&first.keep).unwrap());
        let r2 = calibrate(&kept, &CalibrateOptions::default()).unwrap();
        let second = detect_flex(&compute_residuals(&kept, &r2), &opts).unwrap();
        assert!(second.fraction_removed() < 0.01);
    }

    #[test]
    fn everything_flagged_is_rank_deficient() {
        let (p, _) = make_scenario(&Scenario::default(), 1).unwrap();
        let opts = FlexOptions {
            threshold: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            mitigate_and_recalibrate(&p, &CalibrateOptions::default(), &opts),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn flex_residuals_track_rate_norm() {
        let profile = MotionProfile::default();
        let sc = Scenario {
            flex: Some(FlexSpec::evenly_spaced(profile.duration, 0.1, 4, deg_to_rad(0.5)).unwrap()),
            profile,
            ..Default::default()
        };
        let (p, t) = make_scenario(&sc, 5).unwrap();
        let p = center(&p);
        let r = calibrate(&p, &CalibrateOptions::default()).unwrap();
        let res = compute_residuals(&p, &r);
        let (rn, wn): (Vec<f64>, Vec<f64>) = res
            .iter()
            .zip(&p.uncentered().w1)
            .zip(&t.flexed)
            .filter(|(_, f)| **f)
            .map(|((r, w), _)| (r.norm(), w.norm()))
            .unzip();
        assert!(pearson(&rn, &wn) > 0.5);
    }

    #[test]
    fn zero_noise_mc_is_exact_and_deterministic() {
        let sc = Scenario {
            model: SensorModel::noiseless(SensorModel::default().c_true),
            profile: MotionProfile {
                duration: 5.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let s = mc_run(&sc, 4, 1, &CalibrateOptions::default()).unwrap();
        assert!(s.rmse_rotation < 1e-8 && s.rmse_scale < 1e-8);
        assert_eq!(s.snr, None);

        let noisy = Scenario {
            profile: sc.profile.clone(),
            ..Default::default()
        };
        let a = mc_run(&noisy, 6, 3, &CalibrateOptions::default()).unwrap();
        let b = mc_run(&noisy, 6, 3, &CalibrateOptions::default()).unwrap();
        assert_eq!(a, b);
        let expect = (a.rotation_errors.iter().map(|e| e * e).sum::<f64>() / 6.0).sqrt();
        assert_eq!(a.rmse_rotation, expect);
    }

    #[test]
    fn failed_runs_are_flagged() {
        let sc = Scenario {
            profile: MotionProfile {
                duration: 0.03,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(mc_run(&sc, 3, 0, &CalibrateOptions::default()).is_err());
        assert!(mc_run(&Scenario::default(), 0, 0, &CalibrateOptions::default()).is_err());
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 / v).collect();
        assert_abs_diff_eq!(loglog_slope(&x, &y), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn histogram_counts_everything() {
        let v: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let h = histogram(&v, 10);
        assert_eq!(h.len(), 10);
        assert_eq!(h.iter().map(|(_, c)| c).sum::<usize>(), 100);
        assert!(histogram(&[], 5).is_empty());
    }
}
