//! Ground-truth scenario generation.
//!
//! A scenario draws true gyro-1 rates, derives gyro-2 rates through the
//! (optionally flexing) extrinsic rotation, and corrupts both with
//! `w_m(k) = S w(k) + b(k) + n(k)`, where `b` is a random walk and `n` white
//! Gaussian noise. Every random draw comes from a ChaCha8 stream keyed by
//! the seed and a fixed stream index, so scenarios are bit-reproducible.

use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{deg_to_rad, so3_exp, Axis, Mat3, Rotation, ScaleVector, Vec3};
use crate::preprocess::{AlignedPairs, GyroStream};

/// White-noise standard deviation per gyro used by the defaults, rad/s.
pub const DEFAULT_SIGMA_N: f64 = 0.1 * std::f64::consts::PI / 180.0;
/// Bias random-walk step standard deviation, rad/s per sample.
pub const DEFAULT_SIGMA_NU: f64 = 57.3e-6 * std::f64::consts::PI / 180.0;
/// Standard deviation of the skewness entries when enabled.
pub const DEFAULT_SKEW_SIGMA: f64 = 2.357e-4;
pub const DEFAULT_RATE_HZ: f64 = 100.0;

const STREAM_MOTION: u64 = 0;
const STREAM_SKEW: u64 = 1;
const STREAM_NOISE1: u64 = 2;
const STREAM_NOISE2: u64 = 3;

/// Generator for one named stream of a seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub c_true: Rotation,
    /// Upper triangular: scale factors on the diagonal, skewness above.
    pub s1: Mat3,
    pub s2: Mat3,
    pub b1_0: Vec3,
    pub b2_0: Vec3,
    /// Per-gyro white noise, rad/s.
    pub sigma_n: f64,
    /// Bias walk step, rad/s.
    pub sigma_nu: f64,
    pub rate_hz: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            c_true: Rotation::from_euler(deg_to_rad(20.0), deg_to_rad(30.0), deg_to_rad(40.0)),
            s1: Mat3::identity(),
            s2: Mat3::identity(),
            b1_0: Vec3::zeros(),
            b2_0: Vec3::zeros(),
            sigma_n: DEFAULT_SIGMA_N,
            sigma_nu: DEFAULT_SIGMA_NU,
            rate_hz: DEFAULT_RATE_HZ,
        }
    }
}

impl SensorModel {
    /// Noise-free model with identity intrinsics.
    pub fn noiseless(c_true: Rotation) -> Self {
        SensorModel {
            c_true,
            sigma_n: 0.0,
            sigma_nu: 0.0,
            ..Default::default()
        }
    }

    pub fn with_scales(mut self, s1: &ScaleVector, s2: &ScaleVector) -> Self {
        for i in 0..3 {
            self.s1[(i, i)] = s1.as_vec()[i];
            self.s2[(i, i)] = s2.as_vec()[i];
        }
        self
    }

    pub fn scales1(&self) -> Vec3 {
        self.s1.diagonal()
    }

    pub fn scales2(&self) -> Vec3 {
        self.s2.diagonal()
    }

    pub fn validate(&self) -> Result<()> {
        for s in [&self.s1, &self.s2] {
            let d = s.diagonal();
            if d.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidScale([d.x, d.y, d.z]));
            }
            if s[(1, 0)] != 0.0 || s[(2, 0)] != 0.0 || s[(2, 1)] != 0.0 {
                return Err(Error::InvalidConfig(
                    "intrinsics must be upper triangular".into(),
                ));
            }
        }
        if !(self.sigma_n >= 0.0 && self.sigma_nu >= 0.0) {
            return Err(Error::InvalidConfig("noise levels must be >= 0".into()));
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::InvalidConfig(format!("rate {} Hz", self.rate_hz)));
        }
        Ok(())
    }
}

/// One term `amplitude * sin(2 pi frequency t + phase)` on one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineTerm {
    pub axis: Axis,
    /// rad/s
    pub amplitude: f64,
    pub frequency_hz: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionKind {
    SumOfSinusoids { terms: Vec<SineTerm> },
    /// `per_axis` terms per axis with amplitudes, frequencies and phases
    /// drawn uniformly from the seed.
    RandomSinusoids {
        per_axis: usize,
        amplitude: (f64, f64),
        frequency_hz: (f64, f64),
    },
    CsvImport { path: PathBuf },
    /// Scales `axis` by `gain` and the other two axes by a common factor
    /// that keeps the total squared rate of the base motion.
    AxisImbalanced {
        base: Box<MotionKind>,
        axis: Axis,
        gain: f64,
    },
    /// Fixed per-axis gains on the base motion.
    AxisGains { base: Box<MotionKind>, gains: [f64; 3] },
}

impl Default for MotionKind {
    fn default() -> Self {
        MotionKind::RandomSinusoids {
            per_axis: 3,
            amplitude: (0.5, 1.0),
            frequency_hz: (0.3, 2.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    pub kind: MotionKind,
    /// s
    pub duration: f64,
    /// Multiplies every generated rate.
    pub gain: f64,
}

impl Default for MotionProfile {
    fn default() -> Self {
        MotionProfile {
            kind: MotionKind::default(),
            duration: 60.0,
            gain: 1.0,
        }
    }
}

impl MotionProfile {
    pub fn new(kind: MotionKind, duration: f64) -> Self {
        MotionProfile {
            kind,
            duration,
            gain: 1.0,
        }
    }

    pub fn validate(&self, rate_hz: f64) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if !self.gain.is_finite() {
            return Err(Error::InvalidConfig("motion gain must be finite".into()));
        }
        validate_kind(&self.kind, rate_hz)
    }
}

fn validate_kind(kind: &MotionKind, rate_hz: f64) -> Result<()> {
    let nyquist = rate_hz / 2.0;
    match kind {
        MotionKind::SumOfSinusoids { terms } => {
            if let Some(t) = terms.iter().find(|t| !(t.frequency_hz < nyquist)) {
                return Err(Error::InvalidConfig(format!(
                    "frequency {} Hz at or above Nyquist {nyquist} Hz",
                    t.frequency_hz
                )));
            }
            Ok(())
        }
        MotionKind::RandomSinusoids {
            amplitude,
            frequency_hz,
            ..
        } => {
            if !(amplitude.0 <= amplitude.1 && frequency_hz.0 <= frequency_hz.1) {
                return Err(Error::InvalidConfig("empty draw range".into()));
            }
            if !(frequency_hz.1 < nyquist) {
                return Err(Error::InvalidConfig(format!(
                    "frequency {} Hz at or above Nyquist {nyquist} Hz",
                    frequency_hz.1
                )));
            }
            Ok(())
        }
        MotionKind::CsvImport { .. } => Ok(()),
        MotionKind::AxisImbalanced { base, gain, .. } => {
            if !(*gain > 0.0) {
                return Err(Error::InvalidConfig("imbalance gain must be positive".into()));
            }
            validate_kind(base, rate_hz)
        }
        MotionKind::AxisGains { base, gains } => {
            if gains.iter().any(|g| !g.is_finite()) {
                return Err(Error::InvalidConfig("axis gains must be finite".into()));
            }
            validate_kind(base, rate_hz)
        }
    }
}

fn sample_count(duration: f64, rate_hz: f64) -> usize {
    (duration * rate_hz).round() as usize
}

fn eval_terms(terms: &[SineTerm], n: usize, rate_hz: f64) -> Vec<Vec3> {
    let tau = 2.0 * std::f64::consts::PI;
    (0..n)
        .map(|k| {
            let t = k as f64 / rate_hz;
            let mut w = Vec3::zeros();
            for term in terms {
                w[term.axis.index()] +=
                    term.amplitude * (tau * term.frequency_hz * t + term.phase).sin();
            }
            w
        })
        .collect()
}

/// Gains for the imbalanced motion: `gain` on `axis`, and a common gain on
/// the other axes chosen so the total energy is unchanged.
pub fn energy_preserving_gains(energy: &Vec3, axis: Axis, gain: f64) -> Result<Vec3> {
    let i = axis.index();
    let total = energy.sum();
    let rest = total - energy[i];
    let remaining = total - gain * gain * energy[i];
    if !(rest > 0.0 && remaining > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "cannot preserve total energy with gain {gain} on axis {axis}"
        )));
    }
    let k = (remaining / rest).sqrt();
    let mut g = Vec3::repeat(k);
    g[i] = gain;
    Ok(g)
}

fn generate_kind(kind: &MotionKind, duration: f64, rate_hz: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec3>> {
    let n = sample_count(duration, rate_hz);
    match kind {
        MotionKind::SumOfSinusoids { terms } => Ok(eval_terms(terms, n, rate_hz)),
        MotionKind::RandomSinusoids {
            per_axis,
            amplitude,
            frequency_hz,
        } => {
            let mut terms = Vec::with_capacity(3 * per_axis);
            for axis in Axis::ALL {
                for _ in 0..*per_axis {
                    terms.push(SineTerm {
                        axis,
                        amplitude: rng.random_range(amplitude.0..=amplitude.1),
                        frequency_hz: rng.random_range(frequency_hz.0..=frequency_hz.1),
                        phase: rng.random_range(0.0..2.0 * std::f64::consts::PI),
                    });
                }
            }
            Ok(eval_terms(&terms, n, rate_hz))
        }
        MotionKind::CsvImport { path } => {
            let s = crate::io::read_stream_csv_path(path, 1, Some(rate_hz))?;
            Ok(s.rates())
        }
        MotionKind::AxisImbalanced { base, axis, gain } => {
            let w = generate_kind(base, duration, rate_hz, rng)?;
            let energy = w.iter().fold(Vec3::zeros(), |a, v| a + v.component_mul(v));
            let g = energy_preserving_gains(&energy, *axis, *gain)?;
            Ok(w.iter().map(|v| v.component_mul(&g)).collect())
        }
        MotionKind::AxisGains { base, gains } => {
            let g = Vec3::from(*gains);
            let w = generate_kind(base, duration, rate_hz, rng)?;
            Ok(w.iter().map(|v| v.component_mul(&g)).collect())
        }
    }
}

/// True gyro-1 rates sampled at `rate_hz` from `t = 0`.
pub fn generate_motion(profile: &MotionProfile, rate_hz: f64, seed: u64) -> Result<GyroStream> {
    profile.validate(rate_hz)?;
    let mut rng = rng_for(seed, STREAM_MOTION);
    let w = generate_kind(&profile.kind, profile.duration, rate_hz, &mut rng)?;
    let w: Vec<Vec3> = w.into_iter().map(|v| v * profile.gain).collect();
    GyroStream::uniform(1, 0.0, rate_hz, &w)
}

/// Time-varying perturbation of the extrinsic rotation.
///
/// Inside each `[start, end)` segment the rotation becomes
/// `exp([delta(k) axis]) C`, with `delta(k) = peak * |w(k)| / max |w|` over
/// that segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexSpec {
    pub segments: Vec<(f64, f64)>,
    /// rad
    pub peak: f64,
    /// Unit deflection axis in gyro-1 coordinates.
    pub axis: Vec3,
}

impl FlexSpec {
    pub fn default_axis() -> Vec3 {
        Vec3::new(0.3, 1.0, 0.5).normalize()
    }

    /// `count` equal segments covering `fraction` of `duration`, evenly
    /// spaced.
    pub fn evenly_spaced(duration: f64, fraction: f64, count: usize, peak: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0 && count > 0) {
            return Err(Error::InvalidConfig(
                "flex fraction must be in (0, 1) with at least one segment".into(),
            ));
        }
        let len = duration * fraction / count as f64;
        let pitch = duration / count as f64;
        let segments = (0..count)
            .map(|i| {
                let start = i as f64 * pitch + (pitch - len) / 2.0;
                (start, start + len)
            })
            .collect();
        Ok(FlexSpec {
            segments,
            peak,
            axis: Self::default_axis(),
        })
    }

    pub fn validate(&self, duration: f64) -> Result<()> {
        let mut segs = self.segments.clone();
        segs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (i, (a, b)) in segs.iter().enumerate() {
            if !(0.0 <= *a && a < b && *b <= duration) {
                return Err(Error::InvalidConfig(format!(
                    "flex segment [{a}, {b}) outside [0, {duration}]"
                )));
            }
            if i > 0 && segs[i - 1].1 > *a {
                return Err(Error::InvalidConfig("flex segments overlap".into()));
            }
        }
        if !((self.axis.norm() - 1.0).abs() < 1e-9) {
            return Err(Error::InvalidConfig("flex axis must be unit length".into()));
        }
        Ok(())
    }

    fn segment_of(&self, t: f64) -> Option<usize> {
        self.segments.iter().position(|&(a, b)| t >= a && t < b)
    }

    /// `true` for samples inside a segment.
    pub fn mask(&self, times: &[f64]) -> Vec<bool> {
        times.iter().map(|&t| self.segment_of(t).is_some()).collect()
    }
}

/// Gyro-2 rates `C(k)^T w1(k)`.
pub fn derive_second_gyro(w1: &GyroStream, c: &Rotation, flex: Option<&FlexSpec>) -> Result<GyroStream> {
    let times = w1.times();
    let rates = w1.rates();
    let mut peaks = vec![0.0f64; flex.map_or(0, |f| f.segments.len())];
    if let Some(f) = flex {
        for (t, w) in times.iter().zip(&rates) {
            if let Some(i) = f.segment_of(*t) {
                peaks[i] = peaks[i].max(w.norm());
            }
        }
    }
    let w2: Vec<Vec3> = times
        .iter()
        .zip(&rates)
        .map(|(t, w)| {
            let seg = flex.and_then(|f| f.segment_of(*t).map(|i| (f, i)));
            match seg {
                Some((f, i)) if peaks[i] > 0.0 => {
                    let delta = f.peak * w.norm() / peaks[i];
                    let ck = so3_exp(&(f.axis * delta)).matrix() * c.matrix();
                    ck.transpose() * w
                }
                _ => c.transpose().rotate(w),
            }
        })
        .collect();
    let samples = times
        .iter()
        .zip(w2)
        .map(|(t, w)| crate::preprocess::GyroSample::new(*t, w))
        .collect();
    GyroStream::new(2, samples, w1.nominal_rate())
}

/// Applies intrinsics, a bias random walk starting at `b0`, and white noise.
pub fn corrupt(w: &GyroStream, s: &Mat3, b0: &Vec3, sigma_n: f64, sigma_nu: f64, seed: u64) -> Result<GyroStream> {
    let stream = if w.gyro_id() == 1 { STREAM_NOISE1 } else { STREAM_NOISE2 };
    corrupt_with(w, s, b0, sigma_n, sigma_nu, &mut rng_for(seed, stream))
}

fn corrupt_with(
    w: &GyroStream,
    s: &Mat3,
    b0: &Vec3,
    sigma_n: f64,
    sigma_nu: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GyroStream> {
    let noise = Normal::new(0.0, sigma_n).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let walk = Normal::new(0.0, sigma_nu).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut bias = *b0;
    let mut out = Vec::with_capacity(w.len());
    for (k, sample) in w.samples().iter().enumerate() {
        if k > 0 {
            bias += Vec3::from_fn(|_, _| walk.sample(rng));
        }
        let n = Vec3::from_fn(|_, _| noise.sample(rng));
        out.push(crate::preprocess::GyroSample::new(sample.t, s * sample.w + bias + n));
    }
    GyroStream::new(w.gyro_id(), out, w.nominal_rate())
}

/// Everything needed to build one scenario except the noise seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub model: SensorModel,
    pub profile: MotionProfile,
    pub flex: Option<FlexSpec>,
    /// Standard deviation of the skewness entries added to both
    /// intrinsics; drawn per seed.
    pub skew_sigma: Option<f64>,
    /// Seed for the motion draw; the same motion is reused across noise
    /// seeds.
    pub motion_seed: u64,
}

/// Ground truth retained for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub c: Rotation,
    /// Full intrinsics including any drawn skewness.
    pub s1: Mat3,
    pub s2: Mat3,
    pub b1_0: Vec3,
    pub b2_0: Vec3,
    pub sigma_n: f64,
    pub sigma_nu: f64,
    pub rate_hz: f64,
    pub flex_segments: Vec<(f64, f64)>,
    /// Per-sample flag for samples inside a flex segment.
    pub flexed: Vec<bool>,
    /// Per-axis sum of squared mean-removed true gyro-1 rates.
    pub rate_energy: Vec3,
}

impl GroundTruth {
    pub fn scales1(&self) -> ScaleVector {
        ScaleVector::from_vec(self.s1.diagonal()).expect("validated")
    }

    pub fn scales2(&self) -> ScaleVector {
        ScaleVector::from_vec(self.s2.diagonal()).expect("validated")
    }

    /// Combined white-noise level of the pair, rad/s.
    pub fn sigma(&self) -> f64 {
        self.sigma_n * std::f64::consts::SQRT_2
    }

    /// Total SNR of the true rates against the combined noise.
    pub fn snr(&self) -> f64 {
        self.rate_energy.sum().sqrt() / self.sigma()
    }

    pub fn snr_per_axis(&self) -> Vec3 {
        self.rate_energy.map(|e| e.sqrt() / self.sigma())
    }
}

/// Draws skewness entries into the strictly upper part of `s`.
fn add_skew(s: &mut Mat3, sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for (r, c) in [(0, 1), (0, 2), (1, 2)] {
        s[(r, c)] += d.sample(rng);
    }
    Ok(())
}

/// Builds measurement pairs and the matching ground truth.
pub fn make_scenario(sc: &Scenario, seed: u64) -> Result<(AlignedPairs, GroundTruth)> {
    let m = &sc.model;
    m.validate()?;
    if let Some(f) = &sc.flex {
        f.validate(sc.profile.duration)?;
    }
    let truth_w1 = generate_motion(&sc.profile, m.rate_hz, sc.motion_seed)?;
    let truth_w2 = derive_second_gyro(&truth_w1, &m.c_true, sc.flex.as_ref())?;

    let (mut s1, mut s2) = (m.s1, m.s2);
    if let Some(sigma) = sc.skew_sigma {
        let mut rng = rng_for(seed, STREAM_SKEW);
        add_skew(&mut s1, sigma, &mut rng)?;
        add_skew(&mut s2, sigma, &mut rng)?;
    }
    let meas1 = corrupt(&truth_w1, &s1, &m.b1_0, m.sigma_n, m.sigma_nu, seed)?;
    let meas2 = corrupt(&truth_w2, &s2, &m.b2_0, m.sigma_n, m.sigma_nu, seed)?;

    let times = truth_w1.times();
    let rates = truth_w1.rates();
    let n = rates.len() as f64;
    let mean = rates.iter().fold(Vec3::zeros(), |a, w| a + w) / n;
    let rate_energy = rates
        .iter()
        .fold(Vec3::zeros(), |a, w| a + (w - mean).component_mul(&(w - mean)));
    let flexed = sc
        .flex
        .as_ref()
        .map_or_else(|| vec![false; times.len()], |f| f.mask(&times));

    let pairs = AlignedPairs::new(times, meas1.rates(), meas2.rates())?;
    let truth = GroundTruth {
        c: m.c_true,
        s1,
        s2,
        b1_0: m.b1_0,
        b2_0: m.b2_0,
        sigma_n: m.sigma_n,
        sigma_nu: m.sigma_nu,
        rate_hz: m.rate_hz,
        flex_segments: sc.flex.as_ref().map_or_else(Vec::new, |f| f.segments.clone()),
        flexed,
        rate_energy,
    };
    Ok((pairs, truth))
}

/// Uniform scale factors in `[lo, hi]`.
pub fn random_scales(rng: &mut impl Rng, lo: f64, hi: f64) -> ScaleVector {
    ScaleVector::from_vec(Vec3::from_fn(|_, _| rng.random_range(lo..=hi))).expect("positive range")
}

/// Uniformly distributed rotation (unit quaternion from a 4-D Gaussian).
pub fn random_rotation(rng: &mut impl Rng) -> Rotation {
    let q = nalgebra::Quaternion::new(
        rand_distr::StandardNormal.sample(rng),
        rand_distr::StandardNormal.sample(rng),
        rand_distr::StandardNormal.sample(rng),
        rand_distr::StandardNormal.sample(rng),
    );
    let uq = nalgebra::UnitQuaternion::from_quaternion(q);
    Rotation::from_matrix(*uq.to_rotation_matrix().matrix()).expect("unit quaternion")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::direct::{calibrate, CalibrateOptions, ConfigClass};
    use crate::geometry::{rotation_error, scale_error};
    use crate::preprocess::compute_snr;
    use approx::assert_abs_diff_eq;

    fn x_sine(amplitude: f64) -> MotionProfile {
        MotionProfile::new(
            MotionKind::SumOfSinusoids {
                terms: vec![SineTerm {
                    axis: Axis::X,
                    amplitude,
                    frequency_hz: 1.0,
                    phase: 0.0,
                }],
            },
            10.0,
        )
    }

    #[test]
    fn zero_amplitude_is_all_zero() {
        let s = generate_motion(&x_sine(0.0), 100.0, 1).unwrap();
        assert!(s.rates().iter().all(|w| *w == Vec3::zeros()));
    }

    #[test]
    fn single_sinusoid_shape() {
        let s = generate_motion(&x_sine(1.0), 100.0, 1).unwrap();
        assert_eq!(s.len(), 1000);
        let peak = s.rates().iter().map(|w| w.x.abs()).fold(0.0, f64::max);
        assert_abs_diff_eq!(peak, 1.0, epsilon = 1e-3);
        assert!(s.rates().iter().all(|w| w.y == 0.0 && w.z == 0.0));
    }

    #[test]
    fn motion_is_deterministic_and_seed_dependent() {
        let p = MotionProfile::default();
        let a = generate_motion(&p, 100.0, 7).unwrap();
        let b = generate_motion(&p, 100.0, 7).unwrap();
        let c = generate_motion(&p, 100.0, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        let p = MotionProfile {
            duration: 0.0,
            ..Default::default()
        };
        assert!(generate_motion(&p, 100.0, 0).is_err());
        let mut p = x_sine(1.0);
        if let MotionKind::SumOfSinusoids { terms } = &mut p.kind {
            terms[0].frequency_hz = 50.0;
        }
        assert!(generate_motion(&p, 100.0, 0).is_err());
    }

    #[test]
    fn axis_imbalance_preserves_total_snr() {
        let base = MotionProfile::default();
        let imb = MotionProfile::new(
            MotionKind::AxisImbalanced {
                base: Box::new(base.kind.clone()),
                axis: Axis::X,
                gain: 0.1,
            },
            base.duration,
        );
        let to_pairs = |s: &GyroStream| {
            crate::preprocess::center(&AlignedPairs::new(s.times(), s.rates(), s.rates()).unwrap())
        };
        let (tb, pb) = compute_snr(&to_pairs(&generate_motion(&base, 100.0, 3).unwrap()), 1.0);
        let (ti, pi) = compute_snr(&to_pairs(&generate_motion(&imb, 100.0, 3).unwrap()), 1.0);
        assert!((ti / tb - 1.0).abs() < 0.01);
        // x drops 10x relative to its base; y and z grow by a common factor
        assert_abs_diff_eq!(pi.x / pb.x, 0.1, epsilon = 1e-2);
        assert_abs_diff_eq!(pi.y / pb.y, pi.z / pb.z, epsilon = 1e-9);
    }

    #[test]
    fn derive_identity_and_quarter_turn() {
        let w = generate_motion(&MotionProfile::default(), 100.0, 1).unwrap();
        let same = derive_second_gyro(&w, &Rotation::identity(), None).unwrap();
        assert_eq!(same.rates(), w.rates());
        let rz = Rotation::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let d = derive_second_gyro(&w, &rz, None).unwrap();
        for (a, b) in w.rates().iter().zip(d.rates()) {
            // C^T w for a +90 deg turn about z: (x, y) -> (y, -x)
            assert_abs_diff_eq!(b, Vec3::new(a.y, -a.x, a.z), epsilon = 1e-12);
        }
    }

    #[test]
    fn flex_only_inside_segments() {
        let p = MotionProfile::default();
        let w = generate_motion(&p, 100.0, 1).unwrap();
        let c = SensorModel::default().c_true;
        let flex = FlexSpec::evenly_spaced(p.duration, 0.1, 3, deg_to_rad(0.5)).unwrap();
        let d = derive_second_gyro(&w, &c, Some(&flex)).unwrap();
        let mask = flex.mask(&w.times());
        for ((a, b), inside) in w.rates().iter().zip(d.rates()).zip(mask) {
            let dev = (b - c.transpose().rotate(a)).norm();
            if inside {
                assert!(dev > 0.0);
            } else {
                assert_eq!(dev, 0.0);
            }
        }
    }

    #[test]
    fn corrupt_identity_is_noop() {
        let w = generate_motion(&MotionProfile::default(), 100.0, 1).unwrap();
        let out = corrupt(&w, &Mat3::identity(), &Vec3::zeros(), 0.0, 0.0, 5).unwrap();
        assert_eq!(out.rates(), w.rates());
    }

    #[test]
    fn white_noise_level() {
        let zeros = vec![Vec3::zeros(); 10_000];
        let w = GyroStream::uniform(1, 0.0, 100.0, &zeros).unwrap();
        let out = corrupt(&w, &Mat3::identity(), &Vec3::zeros(), DEFAULT_SIGMA_N, 0.0, 9).unwrap();
        for a in 0..3 {
            let v: f64 = out.rates().iter().map(|x| x[a] * x[a]).sum::<f64>() / 1e4;
            assert!((v.sqrt() / DEFAULT_SIGMA_N - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn bias_walk_growth() {
        let k = 10_000;
        let zeros = vec![Vec3::zeros(); k + 1];
        let w = GyroStream::uniform(1, 0.0, 100.0, &zeros).unwrap();
        let mut sq = 0.0;
        let trials = 200;
        for seed in 0..trials {
            let out = corrupt(&w, &Mat3::identity(), &Vec3::zeros(), 0.0, DEFAULT_SIGMA_NU, seed).unwrap();
            sq += out.rates()[k].x.powi(2);
        }
        let std = (sq / trials as f64).sqrt();
        let expect = DEFAULT_SIGMA_NU * (k as f64).sqrt();
        assert!((std / expect - 1.0).abs() < 0.15, "{std} vs {expect}");
    }

    #[test]
    fn noiseless_round_trip() {
        let sc = Scenario {
            model: SensorModel::noiseless(Rotation::identity()),
            ..Default::default()
        };
        let (p, truth) = make_scenario(&sc, 0).unwrap();
        let r = calibrate(&p, &CalibrateOptions::default()).unwrap();
        assert!(matches!(r.config, ConfigClass::AllParallel { .. }));
        assert_eq!(*r.c.matrix(), *truth.c.matrix());

        let c = SensorModel::default().c_true;
        let s1 = ScaleVector::new(1.01, 0.99, 1.02).unwrap();
        let s2 = ScaleVector::new(0.98, 1.0, 1.015).unwrap();
        let sc = Scenario {
            model: SensorModel::noiseless(c).with_scales(&s1, &s2),
            ..Default::default()
        };
        let (p, truth) = make_scenario(&sc, 0).unwrap();
        let r = calibrate(&p, &CalibrateOptions::default()).unwrap();
        assert!(rotation_error(&r.c, &truth.c) < 1e-8);
        assert!(scale_error(&r.s1, &r.s2, &s1, &s2) < 1e-8);
        assert!((r.mixing - s1.diag() * c.matrix() * s2.inv_diag()).norm() < 1e-12);
    }

    #[test]
    fn scenarios_are_bitwise_deterministic() {
        let sc = Scenario {
            skew_sigma: Some(DEFAULT_SKEW_SIGMA),
            flex: Some(FlexSpec::evenly_spaced(60.0, 0.1, 4, deg_to_rad(0.5)).unwrap()),
            ..Default::default()
        };
        let (a, ta) = make_scenario(&sc, 11).unwrap();
        let (b, tb) = make_scenario(&sc, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = make_scenario(&sc, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn skew_entries_are_strictly_upper() {
        let sc = Scenario {
            skew_sigma: Some(DEFAULT_SKEW_SIGMA),
            ..Default::default()
        };
        let (_, t) = make_scenario(&sc, 2).unwrap();
        for s in [t.s1, t.s2] {
            assert_eq!(s.diagonal(), Vec3::repeat(1.0));
            assert!(s[(0, 1)] != 0.0 && s[(0, 2)] != 0.0 && s[(1, 2)] != 0.0);
            assert_eq!((s[(1, 0)], s[(2, 0)], s[(2, 1)]), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn flex_spec_validation() {
        let f = FlexSpec::evenly_spaced(10.0, 0.2, 2, 0.01).unwrap();
        assert!(f.validate(10.0).is_ok());
        let covered: f64 = f.segments.iter().map(|(a, b)| b - a).sum();
        assert_abs_diff_eq!(covered, 2.0, epsilon = 1e-12);
        let bad = FlexSpec {
            segments: vec![(1.0, 3.0), (2.0, 4.0)],
            ..f.clone()
        };
        assert!(bad.validate(10.0).is_err());
        assert!(FlexSpec::evenly_spaced(10.0, 0.0, 2, 0.01).is_err());
    }
}
