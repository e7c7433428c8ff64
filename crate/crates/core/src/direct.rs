//! Closed-form calibration.
//!
//! The measurement model `w1 = A w2 + b + n` with `A = S1 C S2^-1` is linear
//! in `A` and the combined bias `b`. Removing per-gyro means eliminates `b`,
//! leaving the normal equations `A (W2 W2^T) = W1 W2^T` over the centered
//! rate matrices. `A` is then factored into scales and rotation using the
//! orthonormality constraint `A S2^2 A^T = S1^2`, which is linear in the
//! squared scale factors:
//!
//! ```text
//! A_I s2 = s1          A_I = [a_ij^2]
//! A_0 s2 = 0           A_0 rows: products of A's rows (1,2), (2,3), (3,1)
//! ```
//!
//! How much of this is observable depends on how many axes of the two
//! sensors are parallel; see [`ConfigClass`].

use nalgebra::{DMatrix, Matrix3x4, Matrix4, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest_orthonormal, Axis, Mat3, Rotation, ScaleVector, Vec3};
use crate::preprocess::{center, compute_snr, AlignedPairs};

/// Relative tolerance on the smallest eigenvalue of the rate Gram matrix.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;
/// An entry of the balanced mixing matrix counts as zero below this.
pub const DEFAULT_CLASSIFY_TOL: f64 = 0.05;
/// Allowed magnitude of a wrong-signed null-vector component.
pub const NULL_SIGN_TOL: f64 = 1e-8;

/// Least-squares estimate of `A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingMatrix {
    pub a: Mat3,
    /// Eigenvalues of the centered gyro-2 Gram matrix, descending.
    pub gram_eigs: [f64; 3],
    /// RMS of `|w1(k) - A w2(k)|` over the centered pairs, rad/s.
    pub residual_rms: f64,
}

impl MixingMatrix {
    /// Wraps a known matrix with no data statistics attached.
    pub fn from_matrix(a: Mat3) -> Self {
        MixingMatrix {
            a,
            gram_eigs: [1.0; 3],
            residual_rms: 0.0,
        }
    }

    pub fn gram_condition(&self) -> f64 {
        self.gram_eigs[0] / self.gram_eigs[2]
    }
}

/// Running sums of `w2 w2^T` and `w1 w2^T`.
///
/// Sums from disjoint chunks can be combined with [`GramAccumulator::merge`],
/// so the O(N) pass may be split across threads.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GramAccumulator {
    pub w2w2: Mat3,
    pub w1w2: Mat3,
    pub n: usize,
}

impl GramAccumulator {
    pub fn push(&mut self, w1: &Vec3, w2: &Vec3) {
        self.w2w2 += w2 * w2.transpose();
        self.w1w2 += w1 * w2.transpose();
        self.n += 1;
    }

    pub fn merge(mut self, other: &GramAccumulator) -> GramAccumulator {
        self.w2w2 += other.w2w2;
        self.w1w2 += other.w1w2;
        self.n += other.n;
        self
    }

    pub fn from_pairs(w1: &[Vec3], w2: &[Vec3]) -> GramAccumulator {
        let mut acc = GramAccumulator::default();
        for (a, b) in w1.iter().zip(w2) {
            acc.push(a, b);
        }
        acc
    }

    /// Solves `A * w2w2 = w1w2`.
    pub fn solve(&self, rank_tol: f64) -> Result<(Mat3, [f64; 3])> {
        if self.n < 4 {
            return Err(Error::RankDeficient(format!(
                "{} pairs; at least 4 are required",
                self.n
            )));
        }
        let eig = SymmetricEigen::new(self.w2w2);
        let mut e = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
        e.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if !(e[2] > rank_tol * e[0]) {
            return Err(Error::RankDeficient(format!(
                "gram eigenvalues {e:?}: centered gyro-2 rates do not span 3 dof"
            )));
        }
        let inv = self
            .w2w2
            .try_inverse()
            .ok_or_else(|| Error::RankDeficient("gram matrix not invertible".into()))?;
        Ok((self.w1w2 * inv, e))
    }
}

/// Least-squares mixing matrix from mean-centered pairs.
pub fn solve_a(p: &AlignedPairs, rank_tol: f64) -> Result<MixingMatrix> {
    let acc = GramAccumulator::from_pairs(&p.w1, &p.w2);
    let (a, gram_eigs) = acc.solve(rank_tol)?;
    let sq: f64 = p
        .w1
        .iter()
        .zip(&p.w2)
        .map(|(w1, w2)| (w1 - a * w2).norm_squared())
        .sum();
    Ok(MixingMatrix {
        a,
        gram_eigs,
        residual_rms: (sq / p.len() as f64).sqrt(),
    })
}

/// Combined bias `b = mean(w1) - A mean(w2)`.
pub fn recover_bias(a: &Mat3, means: &(Vec3, Vec3)) -> Vec3 {
    means.0 - a * means.1
}

/// Elementwise squares of `A`, and the row-pair products
/// `A_0[r][j] = a[r][j] * a[(r + 1) % 3][j]`.
pub fn build_ai_a0(a: &Mat3) -> (Mat3, Mat3) {
    let ai = a.component_mul(a);
    let a0 = Mat3::from_fn(|r, j| a[(r, j)] * a[((r + 1) % 3, j)]);
    (ai, a0)
}

/// Which axes of the two gyroscopes are parallel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum ConfigClass {
    /// No parallel axes: rotation and five scale ratios observable.
    General,
    /// Gyro-1 axis `axis1` is parallel to gyro-2 axis `axis2`, pointing the
    /// same way if `sign > 0`.
    OneParallelPair { axis1: Axis, axis2: Axis, sign: i8 },
    /// All axes parallel: `C` is the given signed permutation, row major.
    AllParallel { permutation: [i8; 9] },
}

impl ConfigClass {
    pub fn name(&self) -> &'static str {
        match self {
            ConfigClass::General => "general",
            ConfigClass::OneParallelPair { .. } => "one_parallel_pair",
            ConfigClass::AllParallel { .. } => "all_parallel",
        }
    }
}

/// Sinkhorn-balances `[a_ij^2]` to a doubly stochastic matrix.
///
/// For `A = S1 C S2^-1` with diagonal positive scales the balanced matrix is
/// exactly `[c_ij^2]`, so entrywise square roots estimate `|C|` independently
/// of the scale factors.
pub fn balance(a: &Mat3) -> Mat3 {
    let mut b = a.component_mul(a);
    for _ in 0..1000 {
        for r in 0..3 {
            let s: f64 = b.row(r).sum();
            if s > 0.0 {
                b.row_mut(r).unscale_mut(s);
            }
        }
        for c in 0..3 {
            let s: f64 = b.column(c).sum();
            if s > 0.0 {
                b.column_mut(c).unscale_mut(s);
            }
        }
        let dev = (0..3)
            .map(|r| (b.row(r).sum() - 1.0).abs())
            .fold(0.0, f64::max);
        if dev < 1e-15 {
            break;
        }
    }
    b.map(f64::sqrt)
}

/// Classifies the placement from the zero pattern of `A`.
///
/// An entry is "zero" when its balanced magnitude is below `tol` (the
/// balanced rows have unit norm). A row or column is dominated when exactly
/// one entry is non-zero.
pub fn classify_configuration(a: &Mat3, tol: f64) -> ConfigClass {
    let b = balance(a);
    let nz = b.map(|v| v > tol);
    let single = |cells: [bool; 3]| -> Option<usize> {
        (cells.iter().filter(|&&x| x).count() == 1).then(|| cells.iter().position(|&x| x).unwrap())
    };
    let rows: Vec<Option<usize>> = (0..3)
        .map(|r| single([nz[(r, 0)], nz[(r, 1)], nz[(r, 2)]]))
        .collect();
    let cols: Vec<Option<usize>> = (0..3)
        .map(|c| single([nz[(0, c)], nz[(1, c)], nz[(2, c)]]))
        .collect();

    if rows.iter().all(Option::is_some) && cols.iter().all(Option::is_some) {
        let mut perm = [0i8; 9];
        let mut used = [false; 3];
        for r in 0..3 {
            let c = rows[r].unwrap();
            used[c] = true;
            perm[3 * r + c] = if a[(r, c)] >= 0.0 { 1 } else { -1 };
        }
        if used.iter().all(|&u| u) {
            return ConfigClass::AllParallel { permutation: perm };
        }
        return ConfigClass::General;
    }

    let dom_rows: Vec<usize> = (0..3).filter(|&r| rows[r].is_some()).collect();
    let dom_cols: Vec<usize> = (0..3).filter(|&c| cols[c].is_some()).collect();
    if dom_rows.len() == 1 && dom_cols.len() == 1 {
        let (r, c) = (dom_rows[0], dom_cols[0]);
        if rows[r] == Some(c) && cols[c] == Some(r) {
            return ConfigClass::OneParallelPair {
                axis1: Axis::from_index(r),
                axis2: Axis::from_index(c),
                sign: if a[(r, c)] >= 0.0 { 1 } else { -1 },
            };
        }
    }
    ConfigClass::General
}

/// Eigenvector of the smallest eigenvalue of a symmetric matrix, with the
/// ratio of the second-smallest to the smallest eigenvalue.
fn smallest_eigvec<const D: usize>(m: nalgebra::SMatrix<f64, D, D>) -> (Vec<f64>, f64)
where
    nalgebra::Const<D>: nalgebra::DimMin<nalgebra::Const<D>, Output = nalgebra::Const<D>>,
{
    let dm = DMatrix::from_iterator(D, D, m.iter().copied());
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..D).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let v: Vec<f64> = eig.eigenvectors.column(order[0]).iter().copied().collect();
    let ratio = eig.eigenvalues[order[1]].abs() / eig.eigenvalues[order[0]].abs().max(f64::MIN_POSITIVE);
    (v, ratio)
}

/// Normalizes a null vector to non-negative entries (flipping the sign when
/// its largest-magnitude entry is negative); mixed signs are an error.
fn positivize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let big = v
        .iter()
        .copied()
        .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
        .unwrap_or(0.0);
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    if v.iter().any(|&x| x < -NULL_SIGN_TOL) {
        return Err(Error::IndefiniteNullspace(v));
    }
    Ok(v)
}

/// Null vector of `A_0`, positivized and unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NullspaceResult {
    pub vector: Vec<f64>,
    /// Second-smallest over smallest eigenvalue of the normal matrix.
    pub second_smallest_eig_ratio: f64,
}

pub fn squared_scale_nullspace(a: &Mat3) -> Result<NullspaceResult> {
    let (_, a0) = build_ai_a0(a);
    let (v, ratio) = smallest_eigvec(a0.transpose() * a0);
    Ok(NullspaceResult {
        vector: positivize(v)?,
        second_smallest_eig_ratio: ratio,
    })
}

/// Factors a general-placement `A` into `(s1, s2, C)` with `|s2^2| = 1`.
pub fn decompose_general(a: &MixingMatrix) -> Result<(ScaleVector, ScaleVector, Rotation)> {
    let (ai, _) = build_ai_a0(&a.a);
    let ns = squared_scale_nullspace(&a.a)?;
    let s2_sq = Vec3::from_column_slice(&ns.vector);
    let s1_sq = ai * s2_sq;
    for sq in [&s2_sq, &s1_sq] {
        if sq.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NonPositiveScale([sq.x, sq.y, sq.z]));
        }
    }
    let s1 = ScaleVector::from_vec(s1_sq.map(f64::sqrt))?;
    let s2 = ScaleVector::from_vec(s2_sq.map(f64::sqrt))?;
    let c = nearest_orthonormal(&(s1.inv_diag() * a.a * s2.diag()))?;
    Ok((s1, s2, c))
}

/// Signed permutation taking `from_axis` to `e3 * sign`, completed
/// cyclically so the determinant is +1.
fn canonical_permutation(from_axis: usize, sign: f64) -> Mat3 {
    let mut p = Mat3::zeros();
    p[(2, from_axis)] = sign;
    p[(0, (from_axis + 1) % 3)] = sign;
    p[(1, (from_axis + 2) % 3)] = 1.0;
    p
}

/// What the scale outputs of a [`CalibrationResult`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observability {
    /// All six scales valid up to one global factor.
    Full,
    /// The four scales off the common axes share one global factor; on the
    /// common axes only `s1[axis1] / s2[axis2] = ratio` is known and the
    /// result stores `s2[axis2] = 1`.
    CommonAxisRatio { axis1: Axis, axis2: Axis, ratio: f64 },
    /// Only the per-axis ratios `s1[i] / s2[j]` of parallel pairs are
    /// known; the result stores `s2 = 1`.
    RatiosOnly { ratios: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalScale {
    /// `|s2^2| = 1` (or the degenerate-class convention).
    UnitNorm,
    /// Resolved with a near-unity prior on the given axis.
    Prior(Axis),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MitigationSummary {
    pub sigma_r: f64,
    pub fraction_removed: f64,
    pub n_removed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub snr_per_axis: Option<[f64; 3]>,
    pub residual_rms: f64,
    pub gram_condition: f64,
    pub n_pairs: usize,
    pub mitigation: Option<MitigationSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub c: Rotation,
    pub s1: ScaleVector,
    pub s2: ScaleVector,
    /// `b1 - A b2`, rad/s.
    pub combined_bias: Vec3,
    pub config: ConfigClass,
    pub observability: Observability,
    /// Observable scale ratio for degenerate placements.
    pub lambda: Option<f64>,
    pub global_scale: GlobalScale,
    /// The least-squares mixing matrix the result was factored from.
    pub mixing: Mat3,
    pub diagnostics: Diagnostics,
}

impl CalibrationResult {
    /// `S1 C S2^-1` from the factored parameters.
    pub fn model_matrix(&self) -> Mat3 {
        self.s1.diag() * self.c.matrix() * self.s2.inv_diag()
    }
}

fn bare_result(
    a: &MixingMatrix,
    c: Rotation,
    s1: ScaleVector,
    s2: ScaleVector,
    config: ConfigClass,
    observability: Observability,
    lambda: Option<f64>,
) -> CalibrationResult {
    CalibrationResult {
        c,
        s1,
        s2,
        combined_bias: Vec3::zeros(),
        config,
        observability,
        lambda,
        global_scale: GlobalScale::UnitNorm,
        mixing: a.a,
        diagnostics: Diagnostics {
            snr_per_axis: None,
            residual_rms: a.residual_rms,
            gram_condition: a.gram_condition(),
            n_pairs: 0,
            mitigation: None,
        },
    }
}

/// General-class result for externally estimated parameters on centered
/// pairs; the mixing matrix is the model matrix `S1 C S2^-1`.
pub(crate) fn bare_general_result(
    centered: &AlignedPairs,
    c: Rotation,
    s1: ScaleVector,
    s2: ScaleVector,
) -> CalibrationResult {
    let a = s1.diag() * c.matrix() * s2.inv_diag();
    let sq: f64 = centered
        .w1
        .iter()
        .zip(&centered.w2)
        .map(|(w1, w2)| (w1 - a * w2).norm_squared())
        .sum();
    let gram = GramAccumulator::from_pairs(&centered.w1, &centered.w2);
    let mut e: Vec<f64> = SymmetricEigen::new(gram.w2w2).eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mixing = MixingMatrix {
        a,
        gram_eigs: [e[0], e[1], e[2]],
        residual_rms: (sq / centered.len().max(1) as f64).sqrt(),
    };
    let mut r = bare_result(&mixing, c, s1, s2, ConfigClass::General, Observability::Full, None);
    if let Some(m) = &centered.means {
        r.combined_bias = recover_bias(&a, m);
    }
    r.diagnostics.n_pairs = centered.len();
    r
}

/// Canonical-frame quantities from [`decompose_one_parallel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneParallelParts {
    /// `a'_33 = s1_common / s2_common`.
    pub lambda_z: f64,
    /// Rotation angle about the common axis, radians.
    pub theta: f64,
    /// `(s2x, s2y, s1x, s1y)` in the canonical frames, unit global scale.
    pub zeta: [f64; 4],
}

/// Degenerate case with exactly one pair of parallel axes.
///
/// Both frames are first permuted so the common axes become `+z`, where
/// `A' = [[a11, a12, 0], [a21, a22, 0], [0, 0, a33]]`; `a33` is the common
/// scale ratio and the four remaining squared scales span the null space of
///
/// ```text
/// [a11^2  a12^2  -1   0]
/// [a21^2  a22^2   0  -1]
/// [a11a21 a12a22  0   0]
/// ```
pub fn decompose_one_parallel(
    a: &MixingMatrix,
    cfg: &ConfigClass,
) -> Result<(CalibrationResult, OneParallelParts)> {
    let (i, j, sign) = match *cfg {
        ConfigClass::OneParallelPair { axis1, axis2, sign } => {
            (axis1.index(), axis2.index(), f64::from(sign))
        }
        _ => {
            return Err(Error::InvalidConfig(
                "decompose_one_parallel needs a one-parallel-pair class".into(),
            ))
        }
    };
    let p1 = canonical_permutation(i, 1.0);
    let p2 = canonical_permutation(j, sign);
    let ac = p1 * a.a * p2.transpose();

    let lambda_z = ac[(2, 2)];
    if !(lambda_z > 0.0) {
        return Err(Error::DegenerateRatio(lambda_z));
    }
    let m = Matrix3x4::new(
        ac[(0, 0)].powi(2),
        ac[(0, 1)].powi(2),
        -1.0,
        0.0,
        ac[(1, 0)].powi(2),
        ac[(1, 1)].powi(2),
        0.0,
        -1.0,
        ac[(0, 0)] * ac[(1, 0)],
        ac[(0, 1)] * ac[(1, 1)],
        0.0,
        0.0,
    );
    let normal: Matrix4<f64> = m.transpose() * m;
    let eig = SymmetricEigen::new(normal);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // rank 3 means exactly one (near-)zero eigenvalue
    if !(ev[1] > DEFAULT_RANK_TOL * ev[3]) {
        return Err(Error::RankDeficient(format!(
            "one-parallel-pair scale system has eigenvalues {ev:?}"
        )));
    }
    let (zeta, _) = smallest_eigvec(normal);
    let zeta = positivize(zeta)?;
    if zeta.iter().any(|&z| !(z > 0.0)) {
        return Err(Error::NonPositiveScale([zeta[0], zeta[1], zeta[2]]));
    }
    let zb: Vec<f64> = zeta.iter().map(|z| z.sqrt()).collect();

    let theta = (ac[(1, 0)] * zb[0]).atan2(ac[(1, 1)] * zb[1]);
    let (st, ct) = theta.sin_cos();
    let c_canon = Mat3::new(ct, -st, 0.0, st, ct, 0.0, 0.0, 0.0, 1.0);
    let c = Rotation::from_matrix(p1.transpose() * c_canon * p2)?;

    // canonical scale diagonals back to the original axes: S = P^T S' P
    let s1c = Vec3::new(zb[2], zb[3], lambda_z);
    let s2c = Vec3::new(zb[0], zb[1], 1.0);
    let unperm = |p: &Mat3, s: &Vec3| (p.transpose() * Mat3::from_diagonal(s) * p).diagonal();
    let s1 = ScaleVector::from_vec(unperm(&p1, &s1c))?;
    let s2 = ScaleVector::from_vec(unperm(&p2, &s2c))?;

    let (axis1, axis2) = (Axis::from_index(i), Axis::from_index(j));
    let result = bare_result(
        a,
        c,
        s1,
        s2,
        *cfg,
        Observability::CommonAxisRatio {
            axis1,
            axis2,
            ratio: lambda_z,
        },
        Some(lambda_z),
    );
    Ok((
        result,
        OneParallelParts {
            lambda_z,
            theta,
            zeta: [zb[0], zb[1], zb[2], zb[3]],
        },
    ))
}

/// Fully parallel placement: `C` is `A` snapped to a signed permutation and
/// the dominant magnitudes are the pairwise scale ratios.
pub fn decompose_all_parallel(a: &MixingMatrix) -> Result<CalibrationResult> {
    let b = balance(&a.a);
    let mut snapped = Mat3::zeros();
    let mut ratios = [0.0; 3];
    let mut used = [false; 3];
    for r in 0..3 {
        let c = b.row(r).transpose().imax();
        if used[c] {
            return Err(Error::InvalidConfig(
                "mixing matrix is not a generalized permutation".into(),
            ));
        }
        used[c] = true;
        snapped[(r, c)] = a.a[(r, c)].signum();
        ratios[r] = a.a[(r, c)].abs();
    }
    let c = Rotation::from_matrix(snapped)?;
    let mut perm = [0i8; 9];
    for (k, v) in snapped.transpose().iter().enumerate() {
        perm[k] = *v as i8;
    }
    let s1 = ScaleVector::new(ratios[0], ratios[1], ratios[2])?;
    Ok(bare_result(
        a,
        c,
        s1,
        ScaleVector::ones(),
        ConfigClass::AllParallel { permutation: perm },
        Observability::RatiosOnly { ratios },
        None,
    ))
}

/// Closed-form minimizer of `(s1 - 1)^2 + (s2 - 1)^2` subject to
/// `s1 / s2 = lambda`.
pub fn prior_scale_pair(lambda: f64) -> Result<(f64, f64)> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::DegenerateRatio(lambda));
    }
    let d = lambda * lambda + 1.0;
    Ok((lambda * (lambda + 1.0) / d, (lambda + 1.0) / d))
}

/// Fixes the unobservable global scale assuming both gyros' `prior_axis`
/// scale factors are close to one. Other scales keep their ratios to the
/// anchor axis of the same gyro.
pub fn resolve_global_scale(result: &CalibrationResult, prior_axis: Axis) -> Result<CalibrationResult> {
    let k = prior_axis.index();
    // indices (per gyro) that share the anchored global factor
    let (group1, group2): (Vec<usize>, Vec<usize>) = match result.observability {
        Observability::Full => ((0..3).collect(), (0..3).collect()),
        Observability::CommonAxisRatio { axis1, axis2, .. } => {
            if axis1 == prior_axis || axis2 == prior_axis {
                return Err(Error::UnobservableScale(format!(
                    "prior axis {prior_axis} is a common axis"
                )));
            }
            (
                (0..3).filter(|&i| i != axis1.index()).collect(),
                (0..3).filter(|&i| i != axis2.index()).collect(),
            )
        }
        Observability::RatiosOnly { .. } => {
            return Err(Error::UnobservableScale(
                "all-parallel placement".into(),
            ))
        }
    };
    let s1 = *result.s1.as_vec();
    let s2 = *result.s2.as_vec();
    let lambda = s1[k] / s2[k];
    let (a1, a2) = prior_scale_pair(lambda)?;
    let (f1, f2) = (a1 / s1[k], a2 / s2[k]);
    let mut n1 = s1;
    let mut n2 = s2;
    group1.iter().for_each(|&i| n1[i] *= f1);
    group2.iter().for_each(|&i| n2[i] *= f2);
    let mut out = *result;
    out.s1 = ScaleVector::from_vec(n1)?;
    out.s2 = ScaleVector::from_vec(n2)?;
    out.global_scale = GlobalScale::Prior(prior_axis);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrateOptions {
    pub rank_tol: f64,
    pub classify_tol: f64,
    /// Resolve global scale with a near-unity prior on this axis.
    pub prior_axis: Option<Axis>,
    /// Noise level used for the SNR diagnostic, rad/s.
    pub sigma: Option<f64>,
    /// Always use the general factorization, ignoring the classifier.
    pub force_general: bool,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        CalibrateOptions {
            rank_tol: DEFAULT_RANK_TOL,
            classify_tol: DEFAULT_CLASSIFY_TOL,
            prior_axis: None,
            sigma: None,
            force_general: false,
        }
    }
}

/// Full direct pipeline: center, solve for `A`, recover the bias, classify,
/// factor, and optionally resolve the global scale.
///
/// Already-centered input is used as is (its recorded means give the bias).
pub fn calibrate(p: &AlignedPairs, opts: &CalibrateOptions) -> Result<CalibrationResult> {
    if p.len() < 4 {
        return Err(Error::RankDeficient(format!(
            "{} pairs; at least 4 are required",
            p.len()
        )));
    }
    let centered = if p.is_centered() { p.clone() } else { center(p) };
    let mixing = solve_a(&centered, opts.rank_tol)?;
    let config = if opts.force_general {
        ConfigClass::General
    } else {
        classify_configuration(&mixing.a, opts.classify_tol)
    };
    let mut result = match config {
        ConfigClass::General => {
            let (s1, s2, c) = decompose_general(&mixing)?;
            bare_result(&mixing, c, s1, s2, config, Observability::Full, None)
        }
        ConfigClass::OneParallelPair { .. } => decompose_one_parallel(&mixing, &config)?.0,
        ConfigClass::AllParallel { .. } => decompose_all_parallel(&mixing)?,
    };
    result.combined_bias = recover_bias(&mixing.a, &centered.means.expect("centered"));
    result.diagnostics.n_pairs = p.len();
    result.diagnostics.snr_per_axis = opts.sigma.map(|s| {
        let (_, per) = compute_snr(&centered, s);
        [per.x, per.y, per.z]
    });
    if let Some(axis) = opts.prior_axis {
        result = resolve_global_scale(&result, axis)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_error;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sv(x: f64, y: f64, z: f64) -> ScaleVector {
        ScaleVector::new(x, y, z).unwrap()
    }

    fn model(s1: &ScaleVector, c: &Rotation, s2: &ScaleVector) -> Mat3 {
        s1.diag() * c.matrix() * s2.inv_diag()
    }

    fn spanning_rates(n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|k| {
                let t = k as f64 * 0.37;
                Vec3::new(t.sin() * 2.0, (1.7 * t).cos(), (0.9 * t + 0.4).sin() * 1.5)
            })
            .collect()
    }

    fn pairs_for(a: &Mat3, w2: Vec<Vec3>) -> AlignedPairs {
        let w1 = w2.iter().map(|w| a * w).collect();
        AlignedPairs::new((0..w2.len()).map(|k| k as f64).collect(), w1, w2).unwrap()
    }

    fn general_c() -> Rotation {
        Rotation::from_euler(20f64.to_radians(), 30f64.to_radians(), 40f64.to_radians())
    }

    #[test]
    fn solve_a_recovers_forward_model() {
        let a = Mat3::new(0.9, -0.3, 0.2, 0.4, 1.1, -0.5, 0.05, 0.6, 0.8);
        let p = center(&pairs_for(&a, spanning_rates(50)));
        let m = solve_a(&p, DEFAULT_RANK_TOL).unwrap();
        assert_abs_diff_eq!(m.a, a, epsilon = 1e-10);
        assert!(m.residual_rms < 1e-12);
        assert!(m.gram_eigs[0] >= m.gram_eigs[1] && m.gram_eigs[1] >= m.gram_eigs[2]);
    }

    #[test]
    fn lemma_one_rank_gate() {
        let w = [
            Vec3::new(1.0, 0.2, -0.3),
            Vec3::new(-0.4, 1.3, 0.1),
            Vec3::new(0.2, -0.5, 0.9),
        ];
        let a = Mat3::identity();
        let three = center(&pairs_for(&a, w.to_vec()));
        assert!(matches!(
            solve_a(&three, DEFAULT_RANK_TOL),
            Err(Error::RankDeficient(_))
        ));

        let affine = (w[0] + w[1] + w[2]) / 3.0;
        let four = center(&pairs_for(&a, vec![w[0], w[1], w[2], affine]));
        assert!(matches!(
            solve_a(&four, DEFAULT_RANK_TOL),
            Err(Error::RankDeficient(_))
        ));

        let ok = w[0] * 0.5 + w[1] * 0.2 + w[2] * 0.1;
        let four = center(&pairs_for(&a, vec![w[0], w[1], w[2], ok]));
        assert!(solve_a(&four, DEFAULT_RANK_TOL).is_ok());
    }

    #[test]
    fn bias_examples() {
        let a = Mat3::new(1.0, 0.2, 0.0, 0.1, 0.9, 0.3, 0.0, 0.0, 1.1);
        assert_eq!(recover_bias(&a, &(Vec3::zeros(), Vec3::zeros())), Vec3::zeros());
        let m = Vec3::new(0.3, -0.1, 0.2);
        assert_eq!(recover_bias(&Mat3::identity(), &(m, m)), Vec3::zeros());
        assert_eq!(
            recover_bias(&Mat3::identity(), &(Vec3::x(), Vec3::zeros())),
            Vec3::x()
        );
    }

    #[test]
    fn ai_a0_examples() {
        let (ai, a0) = build_ai_a0(&Mat3::identity());
        assert_eq!(ai, Mat3::identity());
        assert_eq!(a0, Mat3::zeros());
        let (ai, a0) = build_ai_a0(&Mat3::from_diagonal(&Vec3::new(2.0, 3.0, 4.0)));
        assert_eq!(ai, Mat3::from_diagonal(&Vec3::new(4.0, 9.0, 16.0)));
        assert_eq!(a0, Mat3::zeros());
        let (ai, a0) = build_ai_a0(&Mat3::repeat(1.0));
        assert_eq!(ai, Mat3::repeat(1.0));
        assert_eq!(a0, Mat3::repeat(1.0));

        // row pattern (1,2), (2,3), (3,1)
        let a = Mat3::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0);
        let (_, a0) = build_ai_a0(&a);
        assert_eq!(a0, Mat3::new(4.0, 10.0, 18.0, 28.0, 40.0, 54.0, 7.0, 16.0, 27.0));
    }

    #[test]
    fn classify_examples() {
        let a = Mat3::from_diagonal(&Vec3::new(1.02, 0.99, 1.01));
        assert_eq!(
            classify_configuration(&a, DEFAULT_CLASSIFY_TOL),
            ConfigClass::AllParallel {
                permutation: [1, 0, 0, 0, 1, 0, 0, 0, 1]
            }
        );

        let c = Rotation::from_axis_angle(&Vec3::z(), 30f64.to_radians());
        let a = model(&sv(1.01, 0.99, 1.02), &c, &sv(0.98, 1.01, 1.0));
        assert_eq!(
            classify_configuration(&a, DEFAULT_CLASSIFY_TOL),
            ConfigClass::OneParallelPair {
                axis1: Axis::Z,
                axis2: Axis::Z,
                sign: 1
            }
        );

        let a = model(&sv(1.01, 0.99, 1.02), &general_c(), &sv(0.98, 1.01, 1.0));
        assert!(general_c().matrix().iter().all(|v| v.abs() > 0.03));
        assert_eq!(
            classify_configuration(&a, DEFAULT_CLASSIFY_TOL),
            ConfigClass::General
        );
    }

    #[test]
    fn balance_recovers_abs_rotation() {
        let c = general_c();
        let a = model(&sv(1.3, 0.7, 1.1), &c, &sv(0.6, 1.4, 0.9));
        assert_abs_diff_eq!(balance(&a), c.matrix().abs(), epsilon = 1e-12);
    }

    #[test]
    fn decompose_general_recovers_truth() {
        let c = general_c();
        let s1 = sv(1.02, 0.97, 1.01);
        let s2 = sv(0.99, 1.03, 0.98);
        let a = MixingMatrix::from_matrix(model(&s1, &c, &s2));
        let (e1, e2, ec) = decompose_general(&a).unwrap();
        assert!(rotation_error(&ec, &c) < 1e-8);

        // compare after normalizing both to unit |s2^2|
        let k = s2.as_vec().component_mul(s2.as_vec()).norm().sqrt();
        assert_abs_diff_eq!(*e1.as_vec(), s1.as_vec() / k, epsilon = 1e-8);
        assert_abs_diff_eq!(*e2.as_vec(), s2.as_vec() / k, epsilon = 1e-8);
        assert_abs_diff_eq!(e2.as_vec().component_mul(e2.as_vec()).norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn decompose_general_identity_intrinsics() {
        let c = general_c();
        let a = MixingMatrix::from_matrix(*c.matrix());
        let (e1, e2, ec) = decompose_general(&a).unwrap();
        let q = 3f64.powf(-0.25);
        assert_abs_diff_eq!(*e1.as_vec(), Vec3::repeat(q), epsilon = 1e-12);
        assert_abs_diff_eq!(*e2.as_vec(), Vec3::repeat(q), epsilon = 1e-12);
        assert_abs_diff_eq!(*ec.matrix(), *c.matrix(), epsilon = 1e-12);
    }

    #[test]
    fn decompose_general_rejects_mixed_sign_nullspace() {
        // A_0 = A's row products; choose A so null(A_0) = (1, -1, 1)/sqrt3
        // by making A_0 rows orthogonal to it.
        let a = Mat3::new(1.0, 1.0, 0.2, 1.0, 2.0, 1.0, 1.0, 1.0, 1.0);
        let (_, a0) = build_ai_a0(&a);
        let (v, _) = smallest_eigvec(a0.transpose() * a0);
        assert!(v.iter().any(|&x| x > 1e-3) && v.iter().any(|&x| x < -1e-3), "{v:?}");
        assert!(matches!(
            decompose_general(&MixingMatrix::from_matrix(a)),
            Err(Error::IndefiniteNullspace(_))
        ));
    }

    fn rz(theta: f64) -> Rotation {
        Rotation::from_axis_angle(&Vec3::z(), theta)
    }

    #[test]
    fn one_parallel_canonical_case() {
        let c = rz(30f64.to_radians());
        let a = MixingMatrix::from_matrix(*c.matrix());
        let cfg = classify_configuration(&a.a, DEFAULT_CLASSIFY_TOL);
        let (res, parts) = decompose_one_parallel(&a, &cfg).unwrap();
        assert_abs_diff_eq!(parts.lambda_z, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(parts.theta, 30f64.to_radians(), epsilon = 1e-8);
        for z in parts.zeta {
            assert_abs_diff_eq!(z, parts.zeta[0], epsilon = 1e-12);
        }
        assert!(rotation_error(&res.c, &c) < 1e-12);
    }

    #[test]
    fn one_parallel_common_axis_ratio() {
        let c = rz(-0.7);
        let a = MixingMatrix::from_matrix(model(&sv(0.99, 1.01, 1.02), &c, &sv(1.0, 0.98, 1.0)));
        let cfg = classify_configuration(&a.a, DEFAULT_CLASSIFY_TOL);
        let (res, parts) = decompose_one_parallel(&a, &cfg).unwrap();
        assert_abs_diff_eq!(parts.lambda_z, 1.02, epsilon = 1e-12);
        assert_eq!(res.lambda, Some(parts.lambda_z));
        assert_abs_diff_eq!(parts.theta, -0.7, epsilon = 1e-10);
    }

    #[test]
    fn one_parallel_opposite_axes_footnote_case() {
        // 1x parallel to 2y, pointing opposite ways
        let p1 = Mat3::from_columns(&[Vec3::z(), Vec3::y(), Vec3::x()]);
        let p2 = Mat3::from_columns(&[Vec3::x(), -Vec3::z(), -Vec3::y()]);
        // canonical frame: C' = Rz(theta); original C = P1^T C' P2
        let c = Rotation::from_matrix(p1.transpose() * rz(0.4).matrix() * p2).unwrap();
        assert_abs_diff_eq!(c.matrix() * Vec3::y(), -Vec3::x(), epsilon = 1e-15);
        let s1 = sv(1.01, 0.98, 1.02);
        let s2 = sv(0.99, 1.02, 1.0);
        let a = MixingMatrix::from_matrix(model(&s1, &c, &s2));
        let cfg = classify_configuration(&a.a, DEFAULT_CLASSIFY_TOL);
        assert_eq!(
            cfg,
            ConfigClass::OneParallelPair {
                axis1: Axis::X,
                axis2: Axis::Y,
                sign: -1
            }
        );
        let (res, _) = decompose_one_parallel(&a, &cfg).unwrap();
        assert!(rotation_error(&res.c, &c) < 1e-10);
        assert_abs_diff_eq!(res.lambda.unwrap(), 1.01 / 1.02, epsilon = 1e-12);
        assert_abs_diff_eq!(res.model_matrix(), a.a, epsilon = 1e-10);
    }

    #[test]
    fn all_parallel_examples() {
        let a = MixingMatrix::from_matrix(Mat3::from_diagonal(&Vec3::new(1.02, 0.98, 1.0)));
        let res = decompose_all_parallel(&a).unwrap();
        assert_eq!(*res.c.matrix(), Mat3::identity());
        assert_eq!(
            res.observability,
            Observability::RatiosOnly {
                ratios: [1.02, 0.98, 1.0]
            }
        );

        let r = Vec3::new(1.03, 0.97, 1.01);
        let a = Mat3::from_columns(&[Vec3::y(), -Vec3::x(), Vec3::z()]) * Mat3::from_diagonal(&r);
        let res = decompose_all_parallel(&MixingMatrix::from_matrix(a)).unwrap();
        assert_eq!(
            *res.c.matrix(),
            Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
        );
        // ratios are indexed by gyro-1 axis: row 0 pairs with column 1
        assert_eq!(
            res.observability,
            Observability::RatiosOnly {
                ratios: [0.97, 1.03, 1.01]
            }
        );

        let noisy = a + Mat3::new(1e-3, -2e-3, 3e-3, 0.0, 1e-3, -1e-3, 2e-3, 1e-3, 0.0);
        let res = decompose_all_parallel(&MixingMatrix::from_matrix(noisy)).unwrap();
        assert!(res.c.matrix().iter().all(|v| *v == 0.0 || v.abs() == 1.0));
    }

    #[test]
    fn global_scale_examples() {
        assert_eq!(prior_scale_pair(1.0).unwrap(), (1.0, 1.0));
        let (a, b) = prior_scale_pair(2.0).unwrap();
        assert_abs_diff_eq!(a, 6.0 / 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b, 3.0 / 5.0, epsilon = 1e-15);
        assert!(matches!(prior_scale_pair(0.0), Err(Error::DegenerateRatio(_))));
        assert!(matches!(prior_scale_pair(-1.0), Err(Error::DegenerateRatio(_))));
    }

    #[test]
    fn resolve_global_scale_keeps_ratios() {
        let s1 = sv(1.02, 0.97, 1.01);
        let s2 = sv(0.99, 1.03, 0.98);
        let a = MixingMatrix::from_matrix(model(&s1, &general_c(), &s2));
        let (e1, e2, c) = decompose_general(&a).unwrap();
        let base = bare_result(&a, c, e1, e2, ConfigClass::General, Observability::Full, None);
        let out = resolve_global_scale(&base, Axis::X).unwrap();
        let lambda = 1.02 / 0.99;
        let (a1, a2) = prior_scale_pair(lambda).unwrap();
        assert_abs_diff_eq!(out.s1.get(Axis::X), a1, epsilon = 1e-12);
        assert_abs_diff_eq!(out.s2.get(Axis::X), a2, epsilon = 1e-12);
        assert_abs_diff_eq!(out.s1.get(Axis::Y) / out.s1.get(Axis::X), 0.97 / 1.02, epsilon = 1e-12);
        assert_abs_diff_eq!(out.s2.get(Axis::Z) / out.s2.get(Axis::X), 0.98 / 0.99, epsilon = 1e-12);
        assert_eq!(out.global_scale, GlobalScale::Prior(Axis::X));
    }

    #[test]
    fn calibrate_needs_four_pairs() {
        let p = pairs_for(&Mat3::identity(), spanning_rates(3));
        assert!(matches!(
            calibrate(&p, &CalibrateOptions::default()),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn calibrate_noiseless_general() {
        let c = general_c();
        let s1 = sv(1.0, 0.97, 1.01);
        let s2 = sv(1.0, 1.03, 0.98);
        let a = model(&s1, &c, &s2);
        let bias = Vec3::new(0.01, -0.02, 0.005);
        let w2 = spanning_rates(200);
        let w1: Vec<Vec3> = w2.iter().map(|w| a * w + bias).collect();
        let p = AlignedPairs::new((0..200).map(|k| k as f64).collect(), w1, w2).unwrap();
        let opts = CalibrateOptions {
            prior_axis: Some(Axis::X),
            ..Default::default()
        };
        let r = calibrate(&p, &opts).unwrap();
        assert_eq!(r.config, ConfigClass::General);
        assert!(rotation_error(&r.c, &c) < 1e-8);
        assert!(crate::geometry::scale_error(&r.s1, &r.s2, &s1, &s2) < 1e-8);
        assert_abs_diff_eq!(r.combined_bias, bias, epsilon = 1e-10);
        assert_abs_diff_eq!(r.s1.get(Axis::X), 1.0, epsilon = 1e-10);
        assert_eq!(r.diagnostics.n_pairs, 200);
    }

    proptest! {
        #[test]
        fn solve_a_is_the_global_minimizer(seed in 0u64..50) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0)) + Mat3::identity();
            let w2: Vec<Vec3> = (0..40).map(|_| Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0))).collect();
            let w1: Vec<Vec3> = w2.iter().map(|w| a * w + Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1))).collect();
            let p = center(&AlignedPairs::new((0..40).map(|k| k as f64).collect(), w1, w2).unwrap());
            let m = solve_a(&p, DEFAULT_RANK_TOL).unwrap();
            let cost = |a: &Mat3| -> f64 { p.w1.iter().zip(&p.w2).map(|(x, y)| (x - a * y).norm_squared()).sum() };
            let best = cost(&m.a);
            for _ in 0..100 {
                let d = Mat3::from_fn(|_, _| rng.random_range(-1e-3..1e-3));
                prop_assert!(cost(&(m.a + d)) >= best);
            }
        }

        #[test]
        fn scale_ambiguity_invariance(k in 0.2..5.0f64, e in proptest::collection::vec(-0.05..0.05f64, 6)) {
            let s1 = sv(1.0 + e[0], 1.0 + e[1], 1.0 + e[2]);
            let s2 = sv(1.0 + e[3], 1.0 + e[4], 1.0 + e[5]);
            let c = general_c();
            let a = MixingMatrix::from_matrix(model(&s1, &c, &s2));
            let ak = MixingMatrix::from_matrix(model(&s1.scaled(k).unwrap(), &c, &s2.scaled(k).unwrap()));
            let (x1, x2, xc) = decompose_general(&a).unwrap();
            let (y1, y2, yc) = decompose_general(&ak).unwrap();
            prop_assert!(rotation_error(&xc, &yc) < 1e-10);
            prop_assert!((x1.as_vec() - y1.as_vec()).amax() < 1e-10);
            prop_assert!((x2.as_vec() - y2.as_vec()).amax() < 1e-10);
        }

        #[test]
        fn noiseless_reconstruction(roll in -3.0..3.0f64, pitch in -1.4..1.4f64, yaw in -3.0..3.0f64,
                                    e in proptest::collection::vec(-0.05..0.05f64, 6)) {
            let c = Rotation::from_euler(roll, pitch, yaw);
            prop_assume!(c.matrix().iter().all(|v| v.abs() > 0.1));
            let s1 = sv(1.0 + e[0], 1.0 + e[1], 1.0 + e[2]);
            let s2 = sv(1.0 + e[3], 1.0 + e[4], 1.0 + e[5]);
            let a = MixingMatrix::from_matrix(model(&s1, &c, &s2));
            let (x1, x2, xc) = decompose_general(&a).unwrap();
            prop_assert!((model(&x1, &xc, &x2) - a.a).norm() < 1e-9);
        }

        #[test]
        fn classification_ignores_scales(d in proptest::collection::vec(0.3..3.0f64, 6), theta in 0.2..1.2f64, which in 0usize..3) {
            let c = match which {
                0 => general_c(),
                1 => rz(theta),
                _ => Rotation::from_matrix(Mat3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0)).unwrap(),
            };
            let base = classify_configuration(c.matrix(), DEFAULT_CLASSIFY_TOL);
            let a = Mat3::from_diagonal(&Vec3::new(d[0], d[1], d[2])) * c.matrix()
                * Mat3::from_diagonal(&Vec3::new(d[3], d[4], d[5]));
            prop_assert_eq!(classify_configuration(&a, DEFAULT_CLASSIFY_TOL), base);
        }
    }
}
