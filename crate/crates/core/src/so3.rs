//! Rotations: validated matrices, the continuous 6D encoding, geodesic
//! error, Haar sampling and chordal averaging in 6D.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Elementwise tolerance for orthonormality and determinant checks.
pub const ROTATION_TOL: f64 = 1e-9;

/// An element of SO(3), stored as a 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    /// Validates `m` against `mᵀm = I` and `det m = +1` within [`ROTATION_TOL`].
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateInput("rotation has non-finite entries".into()));
        }
        let gram = m.transpose() * m - Matrix3::identity();
        if gram.amax() > ROTATION_TOL {
            return Err(Error::DegenerateInput(format!(
                "matrix is not orthonormal (max |mᵀm - I| = {:e})",
                gram.amax()
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::DegenerateInput(format!("determinant {det} is not +1")));
        }
        Ok(RotationMatrix(m))
    }

    /// Wraps a matrix that is orthonormal by construction.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        RotationMatrix(m)
    }

    pub fn from_row_major(values: &[f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(values))
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

    /// Right-handed rotation by `angle` radians about `axis`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let k = axis.normalize();
        let (s, c) = angle.sin_cos();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        RotationMatrix(Matrix3::identity() + kx * s + kx * kx * (1.0 - c))
    }

    /// Rotation from a (not necessarily normalized) quaternion `w + xi + yj + zk`.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        RotationMatrix(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.0 * x
    }
}

impl std::ops::Mul for RotationMatrix {
    type Output = RotationMatrix;

    fn mul(self, rhs: RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }
}

/// First two columns of a rotation, before re-orthonormalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SixDRep(pub [f64; 6]);

impl SixDRep {
    pub fn first(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn second(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }
}

pub fn rot_to_6d(r: &RotationMatrix) -> SixDRep {
    let m = r.matrix();
    SixDRep([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

/// Gram–Schmidt reconstruction of a rotation from its 6D encoding.
pub fn six_d_to_rot(a: &SixDRep) -> Result<RotationMatrix> {
    let a1 = a.first();
    let a2 = a.second();
    let n1 = a1.norm();
    let n2 = a2.norm();
    if !(n1 >= 1e-12) || !(n2 >= 1e-12) {
        return Err(Error::DegenerateInput(format!(
            "6D column norms {n1:e}, {n2:e} below 1e-12"
        )));
    }
    let c1 = a1 / n1;
    let perp = a2 - c1 * c1.dot(&a2);
    let np = perp.norm();
    if !(np >= 1e-12 * n2) {
        return Err(Error::DegenerateInput("6D columns are parallel".into()));
    }
    let c2 = perp / np;
    let c3 = c1.cross(&c2);
    Ok(RotationMatrix::from_matrix_unchecked(Matrix3::from_columns(&[
        c1, c2, c3,
    ])))
}

/// Geodesic distance on SO(3) in degrees, `arccos((tr(r_hatᵀ r_gt) - 1) / 2)`.
///
/// Evaluated as `atan2(sin θ, cos θ)` with `sin θ` taken from the skew part of
/// `r_hatᵀ r_gt`, which keeps full precision near 0° where `acos` does not.
pub fn geodesic_error_deg(r_hat: &RotationMatrix, r_gt: &RotationMatrix) -> f64 {
    let m = r_hat.0.transpose() * r_gt.0;
    let cos = (m[(0, 0)] + m[(1, 1)] + m[(2, 2)] - 1.0) / 2.0;
    let skew = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin = skew.norm() / 2.0;
    sin.atan2(cos).to_degrees()
}

/// Draws a Haar-uniform rotation from a normalized Gaussian quaternion.
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix {
    loop {
        let w: f64 = rng.sample(StandardNormal);
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        if w * w + x * x + y * y + z * z > 1e-20 {
            return RotationMatrix::from_quaternion(w, x, y, z);
        }
    }
}

/// Chordal mean in 6D followed by Gram–Schmidt.
///
/// The 6D vectors are summed in sorted order so the result does not depend on
/// the order of `rs`.
pub fn average_rotations(rs: &[RotationMatrix]) -> Result<RotationMatrix> {
    if rs.is_empty() {
        return Err(Error::DegenerateInput("cannot average zero rotations".into()));
    }
    let mut reps: Vec<[f64; 6]> = rs.iter().map(|r| rot_to_6d(r).0).collect();
    reps.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut acc = [0.0; 6];
    for rep in &reps {
        for (a, v) in acc.iter_mut().zip(rep) {
            *a += v;
        }
    }
    let n = reps.len() as f64;
    six_d_to_rot(&SixDRep(acc.map(|v| v / n)))
}
