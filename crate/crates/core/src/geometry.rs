//! 3-D linear algebra, SO(3) maps and calibration error metrics.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Per-entry tolerance for `C^T C = I` and `det C = 1`.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Axis {
        match i {
            0 => Axis::X,
            1 => Axis::Y,
            2 => Axis::Z,
            _ => panic!("axis index {i} out of range"),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            _ => Err(Error::InvalidConfig(format!("unknown axis '{s}'"))),
        }
    }
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mat3", into = "Mat3")]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Accepts `m` only if it is orthonormal with unit determinant to within
    /// [`ORTHONORMAL_TOL`] per entry.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotARotation("non-finite entry".into()));
        }
        let dev = (m.transpose() * m - Mat3::identity()).amax();
        if dev > ORTHONORMAL_TOL {
            return Err(Error::NotARotation(format!(
                "orthonormality deviation {dev:e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::NotARotation(format!("determinant {det}")));
        }
        Ok(Rotation(m))
    }

    /// Rotation by `angle` radians about a unit `axis`.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        so3_exp(&(axis.normalize() * angle))
    }

    /// Z-Y-X Euler angles: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        let rx = so3_exp(&(Vec3::x() * roll));
        let ry = so3_exp(&(Vec3::y() * pitch));
        let rz = so3_exp(&(Vec3::z() * yaw));
        rz * ry * rx
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Rotation {
        self.transpose()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn log(&self) -> Vec3 {
        so3_log(self)
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Rotation::from_matrix(Mat3::from_row_slice(v))
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl TryFrom<Mat3> for Rotation {
    type Error = Error;

    fn try_from(m: Mat3) -> Result<Self> {
        Rotation::from_matrix(m)
    }
}

impl From<Rotation> for Mat3 {
    fn from(r: Rotation) -> Mat3 {
        r.0
    }
}

/// Diagonal of a scale-factor matrix; every entry strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct ScaleVector(Vec3);

impl ScaleVector {
    pub fn new(sx: f64, sy: f64, sz: f64) -> Result<Self> {
        Self::from_vec(Vec3::new(sx, sy, sz))
    }

    pub fn from_vec(v: Vec3) -> Result<Self> {
        if v.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(ScaleVector(v))
        } else {
            Err(Error::InvalidScale([v.x, v.y, v.z]))
        }
    }

    pub fn ones() -> Self {
        ScaleVector(Vec3::repeat(1.0))
    }

    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    pub fn get(&self, axis: Axis) -> f64 {
        self.0[axis.index()]
    }

    pub fn diag(&self) -> Mat3 {
        Mat3::from_diagonal(&self.0)
    }

    pub fn inv_diag(&self) -> Mat3 {
        Mat3::from_diagonal(&self.0.map(|s| 1.0 / s))
    }

    /// Multiplies all entries by `k > 0`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::from_vec(self.0 * k)
    }
}

impl TryFrom<[f64; 3]> for ScaleVector {
    type Error = Error;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        ScaleVector::new(v[0], v[1], v[2])
    }
}

impl From<ScaleVector> for [f64; 3] {
    fn from(s: ScaleVector) -> [f64; 3] {
        [s.0.x, s.0.y, s.0.z]
    }
}

/// Cross-product matrix: `skew(v) * u == v.cross(u)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the skew-symmetric part of `m`.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula.
pub fn so3_exp(theta: &Vec3) -> Rotation {
    let angle_sq = theta.norm_squared();
    let k = skew(theta);
    let (a, b) = if angle_sq < 1e-8 {
        // Taylor series of sin(t)/t and (1 - cos t)/t^2
        (
            1.0 - angle_sq / 6.0 + angle_sq * angle_sq / 120.0,
            0.5 - angle_sq / 24.0 + angle_sq * angle_sq / 720.0,
        )
    } else {
        let angle = angle_sq.sqrt();
        (angle.sin() / angle, (1.0 - angle.cos()) / angle_sq)
    };
    Rotation(Mat3::identity() + k * a + k * k * b)
}

/// Rotation vector of `r`, with norm in `[0, pi]`.
pub fn so3_log(r: &Rotation) -> Vec3 {
    let m = r.matrix();
    // sin(theta) * axis
    let s = vee(m);
    let sin_theta = s.norm();
    let cos_theta = (0.5 * (m.trace() - 1.0)).clamp(-1.0, 1.0);
    let angle = sin_theta.atan2(cos_theta);

    if sin_theta < 1e-12 && cos_theta > 0.0 {
        return s;
    }
    if cos_theta > -0.5 {
        // well away from pi: sin is a reliable divisor
        return s * (angle / sin_theta);
    }

    // Near pi: recover the axis from the symmetric part, which equals
    // cos(t) I + (1 - cos t) n n^T.
    let sym = (m + m.transpose()) * 0.5 - Mat3::identity() * cos_theta;
    let one_minus_cos = 1.0 - cos_theta;
    let diag = sym.diagonal();
    let i = diag.imax();
    let mut axis: Vec3 = sym.column(i).into_owned() / (diag[i] * one_minus_cos).sqrt();
    axis.normalize_mut();
    if axis.dot(&s) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

/// Closest rotation to `m` in the Frobenius norm, via SVD.
pub fn nearest_orthonormal(m: &Mat3) -> Result<Rotation> {
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => {
            return Err(Error::SingularInput {
                smallest: 0.0,
                largest: 0.0,
            })
        }
    };
    let sv = svd.singular_values;
    let largest = sv.max();
    let smallest = sv.min();
    if !(smallest >= 1e-12 * largest) || largest == 0.0 {
        return Err(Error::SingularInput { smallest, largest });
    }
    let d = (u * v_t).determinant().signum();
    let r = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t;
    Ok(Rotation(r))
}

/// Angle of `C_hat C_true^T`, radians.
pub fn rotation_error(c_hat: &Rotation, c_true: &Rotation) -> f64 {
    rotation_error_vector(c_hat, c_true).norm()
}

/// `Log(C_hat C_true^T)`: the small-angle error with `C_hat ~ (I + [theta]x) C_true`.
pub fn rotation_error_vector(c_hat: &Rotation, c_true: &Rotation) -> Vec3 {
    so3_log(&(*c_hat * c_true.transpose()))
}

/// RMS difference of all six scale factors after normalizing each set by its
/// gyro-1 x-axis scale. Invariant to a common global scale on either set.
pub fn scale_error(
    s1_hat: &ScaleVector,
    s2_hat: &ScaleVector,
    s1_true: &ScaleVector,
    s2_true: &ScaleVector,
) -> f64 {
    let stack = |a: &ScaleVector, b: &ScaleVector| -> [f64; 6] {
        let n = a.as_vec().x;
        let (a, b) = (a.as_vec() / n, b.as_vec() / n);
        [a.x, a.y, a.z, b.x, b.y, b.z]
    };
    let e = stack(s1_hat, s2_hat);
    let t = stack(s1_true, s2_true);
    let sq: f64 = e.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum();
    (sq / 5.0).sqrt()
}

pub fn deg_to_rad(d: f64) -> f64 {
    d * PI / 180.0
}

pub fn rad_to_deg(r: f64) -> f64 {
    r * 180.0 / PI
}
