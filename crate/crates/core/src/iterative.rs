//! Gauss-Newton reference solver.
//!
//! Linearizes the intrinsics-compensated residual
//! `r = S1^-1 w1 - C S2^-1 w2` about the current estimate. With
//! `C = exp(-[theta]) C_hat` and `S_i = S_i_hat (I + diag(ds_i))`,
//!
//! ```text
//! r(k) ~= [w1'(k)]x theta + Gamma w1'(k),   Gamma = diag(ds1) - C diag(ds2) C^T
//! ```
//!
//! The symmetric `Gamma` is estimated through its six upper entries and
//! mapped back to the scale corrections, which are only determined up to one
//! common offset; that offset is fixed by holding gyro-1's x scale.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix6x5, SMatrix, SVector, Vector6};
use serde::{Deserialize, Serialize};

use crate::direct::{
    bare_general_result, CalibrationResult, ConfigClass, Observability,
};
use crate::error::{Error, Result};
use crate::geometry::{skew, so3_exp, Rotation, ScaleVector, Vec3};
use crate::preprocess::{center, AlignedPairs};

pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Vec9 = SVector<f64, 9>;
type Jac = SMatrix<f64, 3, 9>;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 20;
/// Smallest singular value of the pinned scale map, relative to the largest.
pub const PHI_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterState {
    pub c_hat: Rotation,
    pub s1_hat: ScaleVector,
    pub s2_hat: ScaleVector,
    pub iteration: usize,
    pub last_step_norm: f64,
}

impl IterState {
    pub fn new(c_hat: Rotation, s1_hat: ScaleVector, s2_hat: ScaleVector) -> Self {
        IterState {
            c_hat,
            s1_hat,
            s2_hat,
            iteration: 0,
            last_step_norm: f64::INFINITY,
        }
    }

    /// Identity rotation, unit scales.
    pub fn identity() -> Self {
        Self::new(Rotation::identity(), ScaleVector::ones(), ScaleVector::ones())
    }

    pub fn from_result(r: &CalibrationResult) -> Self {
        Self::new(r.c, r.s1, r.s2)
    }
}

/// Rotation correction and the upper entries of `Gamma` in the order
/// `(11, 12, 13, 22, 23, 33)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnUpdate {
    pub theta_tilde: Vec3,
    pub gamma: [f64; 6],
}

impl GnUpdate {
    fn from_vec(x: &Vec9) -> Self {
        GnUpdate {
            theta_tilde: Vec3::new(x[0], x[1], x[2]),
            gamma: [x[3], x[4], x[5], x[6], x[7], x[8]],
        }
    }

    pub fn norm(&self) -> f64 {
        let g: f64 = self.gamma.iter().map(|v| v * v).sum();
        (self.theta_tilde.norm_squared() + g).sqrt()
    }
}

/// `Gamma w` as a linear map of the six upper entries of symmetric `Gamma`.
pub fn omega_matrix(w: &Vec3) -> SMatrix<f64, 3, 6> {
    SMatrix::<f64, 3, 6>::new(
        w.x, w.y, w.z, 0.0, 0.0, 0.0, //
        0.0, w.x, 0.0, w.y, w.z, 0.0, //
        0.0, 0.0, w.x, 0.0, w.y, w.z,
    )
}

/// Residual and Jacobian for each pair at the current state.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub residuals: Vec<Vec3>,
    pub jacobians: Vec<Jac>,
}

impl Linearization {
    /// `sum |r(k) - J(k) x|^2`.
    pub fn cost(&self, x: &Vec9) -> f64 {
        self.residuals
            .iter()
            .zip(&self.jacobians)
            .map(|(r, j)| (r - j * x).norm_squared())
            .sum()
    }
}

/// Expects mean-centered pairs.
pub fn gn_normalize(p: &AlignedPairs, state: &IterState) -> Linearization {
    let s1_inv = state.s1_hat.inv_diag();
    let s2_inv = state.s2_hat.inv_diag();
    let c = state.c_hat.matrix();
    let mut residuals = Vec::with_capacity(p.len());
    let mut jacobians = Vec::with_capacity(p.len());
    for (w1, w2) in p.w1.iter().zip(&p.w2) {
        let w1n = s1_inv * w1;
        let w2n = s2_inv * w2;
        residuals.push(w1n - c * w2n);
        let mut j = Jac::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&w1n));
        j.fixed_view_mut::<3, 6>(0, 3).copy_from(&omega_matrix(&w1n));
        jacobians.push(j);
    }
    Linearization {
        residuals,
        jacobians,
    }
}

/// Least-squares solution of the stacked `J x = r` via normal equations.
pub fn gn_solve_step(lin: &Linearization) -> Result<GnUpdate> {
    let mut h = Mat9::zeros();
    let mut g = Vec9::zeros();
    for (r, j) in lin.residuals.iter().zip(&lin.jacobians) {
        h += j.transpose() * j;
        g += j.transpose() * r;
    }
    if g.iter().all(|v| *v == 0.0) {
        return Ok(GnUpdate::from_vec(&Vec9::zeros()));
    }
    let max_diag = h.diagonal().max();
    let chol = Cholesky::new(h).ok_or(Error::SingularNormalEquations)?;
    let min_pivot = chol.l_dirty().diagonal().map(|v| v * v).min();
    if !(min_pivot > 1e-14 * max_diag) {
        return Err(Error::SingularNormalEquations);
    }
    Ok(GnUpdate::from_vec(&chol.solve(&g)))
}

/// `Phi` maps `[ds1; ds2]` to the upper entries of
/// `diag(ds1) - C diag(ds2) C^T`.
pub fn phi_matrix(c: &Rotation) -> SMatrix<f64, 6, 6> {
    let m = c.matrix();
    let pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
    let mut phi = SMatrix::<f64, 6, 6>::zeros();
    for (row, &(a, b)) in pairs.iter().enumerate() {
        if a == b {
            phi[(row, a)] = 1.0;
        }
        for k in 0..3 {
            phi[(row, 3 + k)] = -m[(a, k)] * m[(b, k)];
        }
    }
    phi
}

/// Scale corrections from `Gamma`, with gyro-1's x correction held at zero.
pub fn recover_scale_errors(gamma: &[f64; 6], c: &Rotation) -> Result<(Vec3, Vec3)> {
    solve_phi(gamma, c, false)
}

/// With `pseudo_inverse`, rank-deficient directions are left at zero
/// instead of failing (an intermediate estimate may be axis-aligned even
/// when the true placement is not).
fn solve_phi(gamma: &[f64; 6], c: &Rotation, pseudo_inverse: bool) -> Result<(Vec3, Vec3)> {
    let phi = phi_matrix(c);
    let pinned: Matrix6x5<f64> = phi.fixed_columns::<5>(1).into_owned();
    let svd = pinned.svd(true, true);
    let sv = &svd.singular_values;
    let singular = !(sv.min() > PHI_TOL * sv.max());
    if singular && !pseudo_inverse {
        return Err(Error::SingularPhi);
    }
    let rhs = Vector6::from_column_slice(gamma);
    let y = svd
        .solve(&rhs, PHI_TOL * sv.max())
        .map_err(|_| Error::SingularPhi)?;
    Ok((Vec3::new(0.0, y[0], y[1]), Vec3::new(y[2], y[3], y[4])))
}

/// Outcome of [`iterate_calibrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterativeResult {
    pub result: CalibrationResult,
    /// Number of updates computed, including the final sub-tolerance one.
    pub iterations: usize,
    pub last_step_norm: f64,
    /// `sum |r(k)|^2` at the returned state.
    pub final_cost: f64,
}

fn apply(state: &IterState, u: &GnUpdate, ds1: &Vec3, ds2: &Vec3) -> Result<IterState> {
    let c = Rotation::from_matrix(so3_exp(&-u.theta_tilde).matrix() * state.c_hat.matrix())?;
    let s1 = ScaleVector::from_vec(state.s1_hat.as_vec().component_mul(&ds1.add_scalar(1.0)))?;
    let s2 = ScaleVector::from_vec(state.s2_hat.as_vec().component_mul(&ds2.add_scalar(1.0)))?;
    Ok(IterState {
        c_hat: c,
        s1_hat: s1,
        s2_hat: s2,
        iteration: state.iteration + 1,
        last_step_norm: (u.theta_tilde.norm_squared() + ds1.norm_squared() + ds2.norm_squared()).sqrt(),
    })
}

/// Plain Gauss-Newton from `init` until the applied update
/// `(theta, ds1, ds2)` drops below `tol`.
///
/// The fitted `Gamma` generally has a part outside the range of the scale
/// map when the data are noisy; that part is never applied, so it is not
/// part of the convergence test.
///
/// Only general placements are supported: the scale map is singular when
/// axes are parallel, which is reported at the converged state.
pub fn iterate_calibrate(
    p: &AlignedPairs,
    init: &IterState,
    tol: f64,
    max_iter: usize,
) -> Result<IterativeResult> {
    let centered = if p.is_centered() { p.clone() } else { center(p) };
    let mut state = *init;
    state.iteration = 0;
    for _ in 0..max_iter {
        let lin = gn_normalize(&centered, &state);
        let u = gn_solve_step(&lin)?;
        let (ds1, ds2) = solve_phi(&u.gamma, &state.c_hat, true)?;
        state = apply(&state, &u, &ds1, &ds2)?;
        if state.last_step_norm < tol {
            recover_scale_errors(&[0.0; 6], &state.c_hat)?;
            let final_cost = gn_normalize(&centered, &state)
                .residuals
                .iter()
                .map(|r| r.norm_squared())
                .sum();
            let mut result = bare_general_result(
                &centered,
                state.c_hat,
                state.s1_hat,
                state.s2_hat,
            );
            result.config = ConfigClass::General;
            result.observability = Observability::Full;
            return Ok(IterativeResult {
                result,
                iterations: state.iteration,
                last_step_norm: state.last_step_norm,
                final_cost,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_step: state.last_step_norm,
    })
}

/// Dense `[r; J]` views for callers who want to inspect the stacked system.
pub fn stacked(lin: &Linearization) -> (DMatrix<f64>, DVector<f64>) {
    let n = lin.residuals.len();
    let mut j = DMatrix::zeros(3 * n, 9);
    let mut r = DVector::zeros(3 * n);
    for (k, (rk, jk)) in lin.residuals.iter().zip(&lin.jacobians).enumerate() {
        j.view_mut((3 * k, 0), (3, 9)).copy_from(jk);
        r.rows_mut(3 * k, 3).copy_from(rk);
    }
    (j, r)
}
