use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use gyrocal::analysis::{
    covariance_lower_bound, detect_flex, histogram, mitigate_and_recalibrate, pearson,
    rotation_covariance, sweep, FlexOptions, SnrMechanism,
};
use gyrocal::direct::{calibrate, resolve_global_scale, CalibrateOptions, CalibrationResult, ConfigClass};
use gyrocal::geometry::{deg_to_rad, rotation_error, Mat3};
use gyrocal::io::{read_stream_csv_path, read_truth_json, write_stream_csv, write_truth_json, TruthRecord};
use gyrocal::iterative::{iterate_calibrate, IterState, DEFAULT_MAX_ITER, DEFAULT_TOL};
use gyrocal::preprocess::{align, center, compute_snr, pairs_to_streams, select, AlignOptions, SelectionPolicy};
use gyrocal::sim::{make_scenario, random_scales, rng_for, FlexSpec, Scenario};
use gyrocal::{AlignedPairs, Error, Rotation};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use crate::args::{
    AnalyzeArgs, CalibrateArgs, Command, FlexArgs, InputArgs, MechanismArg, MonteCarloArgs, ScenarioArgs,
    SimulateArgs, SolverArg, DEFAULT_SEED, SEED_ENV,
};
use crate::report::*;
use crate::{CliError, CliResult};

/// RNG stream for the scale draw of `simulate`; the simulator owns 0..=3.
const STREAM_SCALES: u64 = 4;
/// Scale range drawn by `simulate` when none is given.
const SIM_SCALE_RANGE: (f64, f64) = (0.98, 1.02);

pub fn run(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => emit(&calibrate_cmd(a)?, a.input.out.as_deref()),
        Command::Montecarlo(a) => montecarlo(a),
        Command::Analyze(a) => emit(&analyze(a)?, a.input.out.as_deref()),
    }
}

/// Seed from the flag, then `$GYROCAL_SEED`, then the built-in default.
pub fn resolve_seed(flag: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> CliResult<()>) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path)
        .map_err(|e| CliError::Io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let json = |w: &mut dyn Write| -> CliResult<()> {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    };
    match out {
        Some(p) => write_atomic(p, json),
        None => json(&mut std::io::stdout().lock()),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let f = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| {
        CliError::Core(Error::Parse {
            row: e.line(),
            column: e.column().to_string(),
            message: format!("{}: {e}", path.display()),
        })
    })
}

fn read_truth(path: &Path) -> CliResult<TruthRecord> {
    let f = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(read_truth_json(BufReader::new(f))?)
}

fn set_diag(m: &mut Mat3, v: &[f64; 3]) {
    for (i, s) in v.iter().enumerate() {
        m[(i, i)] = *s;
    }
}

/// Scenario from the optional file with the flags applied on top.
pub fn build_scenario(a: &ScenarioArgs) -> CliResult<Scenario> {
    let mut sc: Scenario = match &a.scenario {
        Some(p) => read_json(p)?,
        None => Scenario::default(),
    };
    if let Some(d) = a.duration {
        sc.profile.duration = d;
    }
    if let Some(r) = a.rate {
        sc.model.rate_hz = r;
    }
    if let Some(s) = a.sigma_n {
        sc.model.sigma_n = deg_to_rad(s);
    }
    if let Some(s) = a.sigma_nu {
        sc.model.sigma_nu = deg_to_rad(s);
    }
    if let Some([r, p, y]) = a.euler {
        sc.model.c_true = Rotation::from_euler(deg_to_rad(r), deg_to_rad(p), deg_to_rad(y));
    }
    if let Some(s) = &a.scales1 {
        set_diag(&mut sc.model.s1, s);
    }
    if let Some(s) = &a.scales2 {
        set_diag(&mut sc.model.s2, s);
    }
    if let Some(b) = a.bias1 {
        sc.model.b1_0 = gyrocal::Vec3::from(b).map(deg_to_rad);
    }
    if let Some(b) = a.bias2 {
        sc.model.b2_0 = gyrocal::Vec3::from(b).map(deg_to_rad);
    }
    if a.skew_sigma.is_some() {
        sc.skew_sigma = a.skew_sigma;
    }
    if let Some(m) = a.motion_seed {
        sc.motion_seed = m;
    }
    if let Some(f) = a.flex_fraction {
        sc.flex = Some(FlexSpec::evenly_spaced(sc.profile.duration, f, a.flex_segments, deg_to_rad(a.flex_peak))?);
    }
    sc.model.validate()?;
    sc.profile.validate(sc.model.rate_hz)?;
    if let Some(f) = &sc.flex {
        f.validate(sc.profile.duration)?;
    }
    Ok(sc)
}

fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let seed = resolve_seed(a.seed)?;
    let mut sc = build_scenario(&a.scenario)?;
    if a.scenario.scenario.is_none() && a.scenario.scales1.is_none() && a.scenario.scales2.is_none() {
        let mut rng = rng_for(seed, STREAM_SCALES);
        let (lo, hi) = SIM_SCALE_RANGE;
        let s1 = random_scales(&mut rng, lo, hi);
        let s2 = random_scales(&mut rng, lo, hi);
        sc.model = sc.model.with_scales(&s1, &s2);
    }
    if !a.offset.is_finite() {
        return Err(CliError::Usage("offset must be finite".into()));
    }
    let (pairs, truth) = make_scenario(&sc, seed)?;
    let (g1, g2) = pairs_to_streams(&pairs, truth.rate_hz)?;
    let g2 = g2.shifted(a.offset);

    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Io(format!("{}: {e}", a.out_dir.display())))?;
    write_atomic(&a.out_dir.join("gyro1.csv"), |w| Ok(write_stream_csv(w, &g1)?))?;
    write_atomic(&a.out_dir.join("gyro2.csv"), |w| Ok(write_stream_csv(w, &g2)?))?;
    let rec = TruthRecord::from_truth(&truth, seed);
    write_atomic(&a.out_dir.join("truth.json"), |w| Ok(write_truth_json(w, &rec)?))?;
    Ok(())
}

/// Combined noise of one pair, rad/s.
fn pair_sigma(per_gyro_dps: f64) -> CliResult<f64> {
    if !(per_gyro_dps > 0.0 && per_gyro_dps.is_finite()) {
        return Err(CliError::Usage(format!("sigma must be positive, got {per_gyro_dps}")));
    }
    Ok(deg_to_rad(per_gyro_dps) * std::f64::consts::SQRT_2)
}

/// Reads, aligns and optionally selects pairs. Returns the pairs and the
/// applied gyro-2 offset.
fn load_pairs(a: &InputArgs) -> CliResult<(AlignedPairs, f64)> {
    let g1 = read_stream_csv_path(&a.gyro1, 1, a.rate)?;
    let g2 = read_stream_csv_path(&a.gyro2, 2, a.rate)?;
    let opts = AlignOptions {
        max_lag: a.max_lag,
        ..Default::default()
    };
    let al = align(&g1, &g2, &opts)?;
    let mut pairs = al.pairs;
    if a.min_norm.is_some() || a.max_norm.is_some() || a.target_snr.is_some() {
        let policy = SelectionPolicy {
            min_norm: a.min_norm.map_or(0.0, deg_to_rad),
            max_norm: a.max_norm.map_or(f64::INFINITY, deg_to_rad),
            target_snr_per_axis: a.target_snr.unwrap_or(f64::INFINITY),
            sigma: pair_sigma(a.sigma)?,
        };
        policy.validate()?;
        pairs = select(&pairs, &policy).pairs;
    }
    Ok((pairs, al.offset))
}

fn flex_options(f: &FlexArgs) -> CliResult<FlexOptions> {
    if f.flex_threshold.is_nan() || f.flex_threshold <= 0.0 {
        return Err(CliError::Usage("flex threshold must be positive".into()));
    }
    Ok(FlexOptions {
        hysteresis: f.hysteresis,
        threshold: f.flex_threshold,
        robust: !f.plain_spread,
        ..Default::default()
    })
}

pub fn calibrate_cmd(a: &CalibrateArgs) -> CliResult<CalibrationReport> {
    let sigma = pair_sigma(a.input.sigma)?;
    let (pairs, offset) = load_pairs(&a.input)?;
    let truth = a.input.truth.as_deref().map(read_truth).transpose()?;
    let opts = CalibrateOptions {
        rank_tol: a.rank_tol,
        classify_tol: a.classify_tol,
        prior_axis: a.prior_axis.map(Into::into),
        sigma: Some(sigma),
        force_general: false,
    };

    let (direct, kept, mitigation) = if a.mitigate_flex {
        let m = mitigate_and_recalibrate(&pairs, &opts, &flex_options(&a.flex)?)?;
        let kept = center(&pairs).uncentered().subset(&m.mask.keep)?;
        let report = MitigationReport {
            sigma_r: m.mask.sigma_r,
            fraction_removed: m.mask.fraction_removed(),
            n_removed: m.mask.n_removed(),
            passes: m.passes,
            before: SolutionReport::new("direct", &m.before, None, truth.as_ref())?,
        };
        (m.after, kept, Some(report))
    } else {
        (calibrate(&pairs, &opts)?, pairs.clone(), None)
    };
    if a.strict && direct.config != ConfigClass::General {
        return Err(CliError::Degenerate(format!(
            "degenerate placement: {}",
            direct.config.name()
        )));
    }

    let iterative = match a.solver {
        SolverArg::Direct => None,
        SolverArg::Iterative | SolverArg::Both => {
            let it = iterate_calibrate(&kept, &IterState::identity(), DEFAULT_TOL, DEFAULT_MAX_ITER)?;
            let mut r: CalibrationResult = it.result;
            if let Some(axis) = opts.prior_axis {
                r = resolve_global_scale(&r, axis)?;
            }
            Some((r, it.iterations))
        }
    };
    let solver_difference_mdeg = match (a.solver, &iterative) {
        (SolverArg::Both, Some((r, _))) => Some(mdeg(rotation_error(&direct.c, &r.c))),
        _ => None,
    };
    let (_, snr) = compute_snr(&center(&kept), sigma);
    Ok(CalibrationReport {
        n_pairs: kept.len(),
        time_offset_s: offset,
        snr_per_axis: [snr.x, snr.y, snr.z],
        direct: match a.solver {
            SolverArg::Iterative => None,
            _ => Some(SolutionReport::new("direct", &direct, None, truth.as_ref())?),
        },
        iterative: iterative
            .map(|(r, n)| SolutionReport::new("iterative", &r, Some(n), truth.as_ref()))
            .transpose()?,
        solver_difference_mdeg,
        mitigation,
    })
}

/// CSV row of the montecarlo plot data.
#[derive(Debug, Serialize, Deserialize)]
struct PlotRow {
    multiplier: f64,
    snr: Option<f64>,
    rmse_rotation_mrad: f64,
    rmse_scale_percent: f64,
    predicted_rotation_mrad: Option<f64>,
}

pub fn montecarlo_report(a: &MonteCarloArgs) -> CliResult<MonteCarloReport> {
    let seed = resolve_seed(a.seed)?;
    let sc = build_scenario(&a.scenario)?;
    let mechanism = match a.mechanism {
        MechanismArg::Rate => SnrMechanism::Rate,
        MechanismArg::Noise => SnrMechanism::Noise,
        MechanismArg::Duration => SnrMechanism::Duration,
    };
    if a.multipliers.is_empty() {
        return Err(CliError::Usage("at least one multiplier is required".into()));
    }
    let s = sweep(&sc, mechanism, &a.multipliers, a.runs, seed, &CalibrateOptions::default())?;
    let rows = s
        .rows
        .iter()
        .map(|r| McRow {
            multiplier: r.multiplier,
            snr: r.stats.snr,
            rmse_rotation_mrad: 1e3 * r.stats.rmse_rotation,
            rmse_scale_percent: 100.0 * r.stats.rmse_scale,
            predicted_rotation_mrad: r.stats.predicted_rmse().map(|p| 1e3 * p),
            successful_runs: r.stats.rotation_errors.len(),
            failed_runs: r.stats.failed_runs,
        })
        .collect();
    Ok(MonteCarloReport {
        mechanism,
        runs: a.runs,
        seed,
        rows,
        slope_rotation: s.slope_rotation,
        slope_scale: s.slope_scale,
    })
}

fn montecarlo(a: &MonteCarloArgs) -> CliResult<()> {
    let report = montecarlo_report(a)?;
    if let Some(path) = &a.plot_csv {
        write_atomic(path, |w| {
            let mut csv = csv::Writer::from_writer(w);
            for r in &report.rows {
                csv.serialize(PlotRow {
                    multiplier: r.multiplier,
                    snr: r.snr,
                    rmse_rotation_mrad: r.rmse_rotation_mrad,
                    rmse_scale_percent: r.rmse_scale_percent,
                    predicted_rotation_mrad: r.predicted_rotation_mrad,
                })
                .map_err(|e| CliError::Io(e.to_string()))?;
            }
            csv.flush()?;
            Ok(())
        })?;
    }
    emit(&report, a.out.as_deref())
}

/// Contiguous runs of `false` in `keep`, as timestamp spans.
fn removed_spans(keep: &[bool], t: &[f64]) -> Vec<(f64, f64)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (k, &kept) in keep.iter().enumerate() {
        match (kept, start) {
            (false, None) => start = Some(k),
            (true, Some(s)) => {
                spans.push((t[s], t[k - 1]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((t[s], t[keep.len() - 1]));
    }
    spans
}

fn masked_correlation(a: &[f64], b: &[f64], mask: &[bool]) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = a
        .iter()
        .zip(b)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((x, y), _)| (*x, *y))
        .unzip();
    if x.len() < 3 {
        return None;
    }
    finite(pearson(&x, &y))
}

pub fn analyze(a: &AnalyzeArgs) -> CliResult<AnalysisReport> {
    let sigma = pair_sigma(a.input.sigma)?;
    let (pairs, offset) = load_pairs(&a.input)?;
    let truth = a.input.truth.as_deref().map(read_truth).transpose()?;
    let (model, source) = match &a.result {
        Some(path) => {
            let rep: CalibrationReport = read_json(path)?;
            let sol = rep
                .direct
                .or(rep.iterative)
                .ok_or_else(|| CliError::Usage(format!("{}: report has no solution", path.display())))?;
            let c = sol.rotation()?;
            let s1 = Mat3::from_diagonal(&sol.scales1.into());
            let s2_inv = Mat3::from_diagonal(&gyrocal::Vec3::from(sol.scales2).map(|s| 1.0 / s));
            (s1 * c.matrix() * s2_inv, path.display().to_string())
        }
        None => {
            let r = calibrate(&pairs, &CalibrateOptions::default())?;
            (r.model_matrix(), "fit".to_string())
        }
    };

    let centered = center(&pairs);
    let residuals: Vec<gyrocal::Vec3> = centered
        .w1
        .iter()
        .zip(&centered.w2)
        .map(|(w1, w2)| w1 - model * w2)
        .collect();
    let norms: Vec<f64> = residuals.iter().map(|r| r.norm()).collect();
    let rates: Vec<f64> = pairs.w1.iter().map(|w| w.norm()).collect();
    let residual_rms = (norms.iter().map(|n| n * n).sum::<f64>() / norms.len() as f64).sqrt();

    let flex = flex_options(&a.flex)?;
    let mask = detect_flex(&residuals, &flex)?;
    let flagged: Vec<bool> = mask.keep.iter().map(|k| !k).collect();
    let truth_flex = truth.as_ref().filter(|t| !t.flex_segments.is_empty()).map(|t| {
        pairs
            .timestamps
            .iter()
            .map(|&x| t.flex_segments.iter().any(|&(s, e)| x >= s && x < e))
            .collect::<Vec<bool>>()
    });

    let (snr, _) = compute_snr(&centered, sigma);
    let lower = covariance_lower_bound(snr * snr);
    Ok(AnalysisReport {
        n_pairs: pairs.len(),
        time_offset_s: offset,
        model_source: source,
        residual_rms,
        histogram: histogram(&norms, a.bins)
            .into_iter()
            .map(|(lower, count)| HistogramBin { lower, count })
            .collect(),
        correlation: CorrelationReport {
            all: finite(pearson(&norms, &rates)),
            flagged: masked_correlation(&norms, &rates, &flagged),
            truth_flex: truth_flex.and_then(|m| masked_correlation(&norms, &rates, &m)),
        },
        mask: MaskReport {
            sigma_r: mask.sigma_r,
            threshold: flex.threshold,
            hysteresis: flex.hysteresis,
            n_removed: mask.n_removed(),
            fraction_removed: mask.fraction_removed(),
            spans: removed_spans(&mask.keep, &pairs.timestamps),
        },
        bound: BoundReport {
            snr,
            lower_bound_trace: lower,
            information_trace: rotation_covariance(&centered.w1, sigma).ok().map(|m| m.trace()),
            lower_bound_rmse_mdeg: mdeg(lower.sqrt()),
        },
    })
}
