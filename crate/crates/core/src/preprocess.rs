//! Synchronization and conditioning of raw gyroscope streams.
//!
//! The pipeline is `align -> select -> center`; [`compute_snr`] measures how
//! much excitation a set of pairs carries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GyroSample {
    /// Seconds.
    pub t: f64,
    /// Angular velocity, rad/s.
    pub w: Vec3,
}

impl GyroSample {
    pub fn new(t: f64, w: Vec3) -> Self {
        GyroSample { t, w }
    }
}

/// Time-ordered measurements from one gyroscope.
#[derive(Debug, Clone, PartialEq)]
pub struct GyroStream {
    gyro_id: u8,
    samples: Vec<GyroSample>,
    nominal_rate: f64,
}

impl GyroStream {
    pub fn new(gyro_id: u8, samples: Vec<GyroSample>, nominal_rate: f64) -> Result<Self> {
        if gyro_id != 1 && gyro_id != 2 {
            return Err(Error::InvalidStream(format!("gyro id {gyro_id} not in {{1, 2}}")));
        }
        if !(nominal_rate > 0.0 && nominal_rate.is_finite()) {
            return Err(Error::InvalidStream(format!("nominal rate {nominal_rate}")));
        }
        for (k, s) in samples.iter().enumerate() {
            if !s.t.is_finite() || s.w.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidStream(format!("non-finite sample at index {k}")));
            }
        }
        if let Some(k) = samples.windows(2).position(|w| w[1].t <= w[0].t) {
            return Err(Error::InvalidStream(format!(
                "timestamps not strictly increasing at index {}",
                k + 1
            )));
        }
        Ok(GyroStream {
            gyro_id,
            samples,
            nominal_rate,
        })
    }

    /// Builds a stream sampled at `t0 + k / rate`.
    pub fn uniform(gyro_id: u8, t0: f64, rate: f64, rates: &[Vec3]) -> Result<Self> {
        let samples = rates
            .iter()
            .enumerate()
            .map(|(k, w)| GyroSample::new(t0 + k as f64 / rate, *w))
            .collect();
        GyroStream::new(gyro_id, samples, rate)
    }

    pub fn gyro_id(&self) -> u8 {
        self.gyro_id
    }

    pub fn samples(&self) -> &[GyroSample] {
        &self.samples
    }

    pub fn nominal_rate(&self) -> f64 {
        self.nominal_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.samples.first().map_or(f64::NAN, |s| s.t)
    }

    pub fn end(&self) -> f64 {
        self.samples.last().map_or(f64::NAN, |s| s.t)
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn rates(&self) -> Vec<Vec3> {
        self.samples.iter().map(|s| s.w).collect()
    }

    /// Same samples with every timestamp shifted by `dt`.
    pub fn shifted(&self, dt: f64) -> GyroStream {
        GyroStream {
            gyro_id: self.gyro_id,
            samples: self
                .samples
                .iter()
                .map(|s| GyroSample::new(s.t + dt, s.w))
                .collect(),
            nominal_rate: self.nominal_rate,
        }
    }
}

/// Co-sampled measurement pairs `(w1(k), w2(k))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPairs {
    pub timestamps: Vec<f64>,
    pub w1: Vec<Vec3>,
    pub w2: Vec<Vec3>,
    /// Per-gyro sample means removed by [`center`]; `None` for raw pairs.
    pub means: Option<(Vec3, Vec3)>,
}

impl AlignedPairs {
    pub fn new(timestamps: Vec<f64>, w1: Vec<Vec3>, w2: Vec<Vec3>) -> Result<Self> {
        if w1.len() != w2.len() || w1.len() != timestamps.len() {
            return Err(Error::InvalidStream(format!(
                "length mismatch: {} timestamps, {} w1, {} w2",
                timestamps.len(),
                w1.len(),
                w2.len()
            )));
        }
        if w1.is_empty() {
            return Err(Error::InvalidStream("no pairs".into()));
        }
        Ok(AlignedPairs {
            timestamps,
            w1,
            w2,
            means: None,
        })
    }

    pub fn len(&self) -> usize {
        self.w1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w1.is_empty()
    }

    pub fn is_centered(&self) -> bool {
        self.means.is_some()
    }

    /// Keeps pairs where `keep[k]` is true, dropping any centering.
    pub fn subset(&self, keep: &[bool]) -> Result<AlignedPairs> {
        let idx: Vec<usize> = (0..self.len()).filter(|&k| keep[k]).collect();
        self.take(&idx)
    }

    fn take(&self, idx: &[usize]) -> Result<AlignedPairs> {
        AlignedPairs::new(
            idx.iter().map(|&k| self.timestamps[k]).collect(),
            idx.iter().map(|&k| self.w1[k]).collect(),
            idx.iter().map(|&k| self.w2[k]).collect(),
        )
    }

    /// Undoes [`center`], restoring raw measurements.
    pub fn uncentered(&self) -> AlignedPairs {
        match self.means {
            None => self.clone(),
            Some((m1, m2)) => AlignedPairs {
                timestamps: self.timestamps.clone(),
                w1: self.w1.iter().map(|w| w + m1).collect(),
                w2: self.w2.iter().map(|w| w + m2).collect(),
                means: None,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// rad/s
    pub min_norm: f64,
    /// rad/s
    pub max_norm: f64,
    pub target_snr_per_axis: f64,
    /// Noise standard deviation used for the SNR, rad/s.
    pub sigma: f64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            min_norm: 0.0,
            max_norm: f64::INFINITY,
            target_snr_per_axis: 4e3,
            sigma: crate::geometry::deg_to_rad(0.1) * std::f64::consts::SQRT_2,
        }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_norm >= 0.0 && self.min_norm < self.max_norm) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= min_norm < max_norm, got {} and {}",
                self.min_norm, self.max_norm
            )));
        }
        if !(self.target_snr_per_axis > 0.0) || !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig(
                "target SNR and sigma must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Output of [`select`].
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub pairs: AlignedPairs,
    pub snr_per_axis: Vec3,
    pub reached_target: bool,
}

/// Signal-to-noise ratio of the gyro-1 rates stored in `p`.
///
/// `total = sqrt(sum |w1|^2) / sigma`, and per axis the same with one
/// component. The stored rates are used as given: center first to use the
/// mean-removed measurements as a proxy for true rates.
pub fn compute_snr(p: &AlignedPairs, sigma: f64) -> (f64, Vec3) {
    let sq = p
        .w1
        .iter()
        .fold(Vec3::zeros(), |acc, w| acc + w.component_mul(w));
    let per_axis = sq.map(|v| v.sqrt() / sigma);
    ((sq.x + sq.y + sq.z).sqrt() / sigma, per_axis)
}

/// Replaces the rates with mean-subtracted rates and records the means.
pub fn center(p: &AlignedPairs) -> AlignedPairs {
    let n = p.len() as f64;
    let mean = |ws: &[Vec3]| ws.iter().fold(Vec3::zeros(), |a, w| a + w) / n;
    let m1 = mean(&p.w1);
    let m2 = mean(&p.w2);
    AlignedPairs {
        timestamps: p.timestamps.clone(),
        w1: p.w1.iter().map(|w| w - m1).collect(),
        w2: p.w2.iter().map(|w| w - m2).collect(),
        means: Some((m1, m2)),
    }
}

/// Keeps pairs whose gyro-1 rate norm lies in `[min_norm, max_norm]`, in
/// order, until every axis reaches the target SNR.
///
/// Rates are centered on the mean of all norm-qualified pairs before
/// accumulating the SNR.
pub fn select(p: &AlignedPairs, policy: &SelectionPolicy) -> Selection {
    let eligible: Vec<usize> = (0..p.len())
        .filter(|&k| {
            let n = p.w1[k].norm();
            n >= policy.min_norm && n <= policy.max_norm
        })
        .collect();
    let mean = if eligible.is_empty() {
        Vec3::zeros()
    } else {
        eligible.iter().fold(Vec3::zeros(), |a, &k| a + p.w1[k]) / eligible.len() as f64
    };

    let target_sq = (policy.target_snr_per_axis * policy.sigma).powi(2);
    let mut acc = Vec3::zeros();
    let mut taken = Vec::new();
    let mut reached = false;
    for &k in &eligible {
        let d = p.w1[k] - mean;
        acc += d.component_mul(&d);
        taken.push(k);
        if acc.iter().all(|&v| v >= target_sq) {
            reached = true;
            break;
        }
    }
    let snr_per_axis = acc.map(|v| v.sqrt() / policy.sigma);
    let pairs = if taken.is_empty() {
        AlignedPairs {
            timestamps: vec![],
            w1: vec![],
            w2: vec![],
            means: None,
        }
    } else {
        p.take(&taken).expect("indices are in range")
    };
    Selection {
        pairs,
        snr_per_axis,
        reached_target: reached,
    }
}

/// Natural cubic spline through `(x, y)` knots, one scalar channel.
struct CubicSpline<'a> {
    x: &'a [f64],
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl<'a> CubicSpline<'a> {
    fn new(x: &'a [f64], y: Vec<f64>) -> Self {
        let n = x.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior knots, M_0 = M_{n-1} = 0.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 1..k {
                let lower = x[i + 1] - x[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        CubicSpline { x, y, m }
    }

    fn eval_in(&self, i: usize, t: f64) -> f64 {
        let (x0, x1) = (self.x[i], self.x[i + 1]);
        let h = x1 - x0;
        let a = x1 - t;
        let b = t - x0;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        (m0 * a * a * a + m1 * b * b * b) / (6.0 * h)
            + (self.y[i] / h - m0 * h / 6.0) * a
            + (self.y[i + 1] / h - m1 * h / 6.0) * b
    }
}

fn interval_index(x: &[f64], t: f64) -> usize {
    // index i with x[i] <= t <= x[i+1]
    match x.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
        Ok(i) => i.min(x.len() - 2),
        Err(i) => i.saturating_sub(1).min(x.len() - 2),
    }
}

/// Evaluates a per-axis natural cubic spline of `s` at `query_times`.
pub fn resample(s: &GyroStream, query_times: &[f64]) -> Result<GyroStream> {
    if s.len() < 4 {
        return Err(Error::TooFewSamples {
            got: s.len(),
            need: 4,
        });
    }
    let (start, end) = (s.start(), s.end());
    if let Some(&t) = query_times
        .iter()
        .find(|&&t| !(t >= start && t <= end))
    {
        return Err(Error::OutOfRange { t, start, end });
    }
    let x = s.times();
    let splines: Vec<CubicSpline> = (0..3)
        .map(|a| CubicSpline::new(&x, s.samples.iter().map(|p| p.w[a]).collect()))
        .collect();
    let samples = query_times
        .iter()
        .map(|&t| {
            let i = interval_index(&x, t);
            let w = if x[i] == t {
                s.samples[i].w
            } else if x[i + 1] == t {
                s.samples[i + 1].w
            } else {
                Vec3::new(
                    splines[0].eval_in(i, t),
                    splines[1].eval_in(i, t),
                    splines[2].eval_in(i, t),
                )
            };
            GyroSample::new(t, w)
        })
        .collect();
    GyroStream::new(s.gyro_id, samples, s.nominal_rate)
}

/// Minimum common duration for offset estimation, seconds.
pub const MIN_OVERLAP_S: f64 = 2.0;

fn linear_at(x: &[f64], y: &[f64], t: f64) -> f64 {
    let i = interval_index(x, t);
    let h = x[i + 1] - x[i];
    let u = ((t - x[i]) / h).clamp(0.0, 1.0);
    y[i] * (1.0 - u) + y[i + 1] * u
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Estimates `d` such that `b(t) ~ a(t - d)` by maximizing the normalized
/// cross-correlation of rate norms, refined with a parabola through the
/// peak and its neighbours.
pub fn estimate_time_offset(a: &GyroStream, b: &GyroStream, max_lag: f64) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientOverlap {
            overlap: 0.0,
            required: MIN_OVERLAP_S,
        });
    }
    let lo = a.start().max(b.start());
    let hi = a.end().min(b.end());
    let overlap = hi - lo;
    if !(overlap >= MIN_OVERLAP_S) {
        return Err(Error::InsufficientOverlap {
            overlap: overlap.max(0.0),
            required: MIN_OVERLAP_S,
        });
    }
    if !(max_lag >= 0.0 && max_lag < 0.5 * overlap) {
        return Err(Error::InvalidConfig(format!(
            "max_lag {max_lag} s must be below half the overlap ({overlap} s)"
        )));
    }

    let dt = 1.0 / a.nominal_rate();
    let n = (overlap / dt).floor() as usize + 1;
    let grid: Vec<f64> = (0..n).map(|k| (lo + k as f64 * dt).min(hi)).collect();
    let norms = |s: &GyroStream| -> (Vec<f64>, Vec<f64>) {
        (s.times(), s.samples().iter().map(|p| p.w.norm()).collect())
    };
    let (ta, na) = norms(a);
    let (tb, nb) = norms(b);
    let ga: Vec<f64> = grid.iter().map(|&t| linear_at(&ta, &na, t)).collect();
    let gb: Vec<f64> = grid.iter().map(|&t| linear_at(&tb, &nb, t)).collect();

    for g in [&ga, &gb] {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        let var = g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / g.len() as f64;
        if var < 1e-12 {
            return Err(Error::FlatSignal { variance: var });
        }
    }

    let max_shift = (max_lag / dt).floor() as i64;
    let corr_at = |lag: i64| -> f64 {
        // pairs (a[i], b[i + lag])
        let (sa, sb) = if lag >= 0 {
            (&ga[..n - lag as usize], &gb[lag as usize..])
        } else {
            (&ga[(-lag) as usize..], &gb[..n - (-lag) as usize])
        };
        pearson(sa, sb).unwrap_or(f64::NEG_INFINITY)
    };
    let corr: Vec<f64> = (-max_shift..=max_shift).map(corr_at).collect();
    let best = corr
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let mut lag = best as f64 - max_shift as f64;
    if best > 0 && best + 1 < corr.len() {
        let (c0, c1, c2) = (corr[best - 1], corr[best], corr[best + 1]);
        let denom = c0 - 2.0 * c1 + c2;
        if denom < 0.0 {
            lag += (0.5 * (c0 - c2) / denom).clamp(-0.5, 0.5);
        }
    }
    Ok(lag * dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignOptions {
    /// Largest offset searched, seconds.
    pub max_lag: f64,
    /// Offsets smaller than this fraction of a sample period are treated as
    /// zero.
    pub snap_fraction: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            max_lag: 1.0,
            snap_fraction: 0.1,
        }
    }
}

/// Result of [`align`].
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub pairs: AlignedPairs,
    /// Applied offset, seconds (`b(t) ~ a(t - offset)`).
    pub offset: f64,
}

/// Estimates the time offset between the streams and resamples `b` onto
/// `a`'s timestamps over their common range.
pub fn align(a: &GyroStream, b: &GyroStream, opts: &AlignOptions) -> Result<Alignment> {
    let lo = a.start().max(b.start());
    let hi = a.end().min(b.end());
    let max_lag = opts.max_lag.min(0.49 * (hi - lo)).max(0.0);
    let mut offset = estimate_time_offset(a, b, max_lag)?;
    if offset.abs() < opts.snap_fraction / a.nominal_rate() {
        offset = 0.0;
    }
    let idx: Vec<usize> = (0..a.len())
        .filter(|&k| {
            let tq = a.samples[k].t + offset;
            tq >= b.start() && tq <= b.end()
        })
        .collect();
    if idx.is_empty() {
        return Err(Error::InsufficientOverlap {
            overlap: 0.0,
            required: MIN_OVERLAP_S,
        });
    }
    let query: Vec<f64> = idx.iter().map(|&k| a.samples[k].t + offset).collect();
    let rb = resample(b, &query)?;
    let pairs = AlignedPairs::new(
        idx.iter().map(|&k| a.samples[k].t).collect(),
        idx.iter().map(|&k| a.samples[k].w).collect(),
        rb.rates(),
    )?;
    Ok(Alignment { pairs, offset })
}

/// Turns an [`AlignedPairs`] back into two streams on shared timestamps.
pub fn pairs_to_streams(p: &AlignedPairs, rate: f64) -> Result<(GyroStream, GyroStream)> {
    let mk = |id: u8, ws: &[Vec3]| {
        GyroStream::new(
            id,
            p.timestamps
                .iter()
                .zip(ws)
                .map(|(t, w)| GyroSample::new(*t, *w))
                .collect(),
            rate,
        )
    };
    Ok((mk(1, &p.w1)?, mk(2, &p.w2)?))
}
