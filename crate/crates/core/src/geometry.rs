//! Planar homographies.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible `|det|` and perspective denominator.
pub const DEGENERACY_EPS: f64 = 1e-9;

/// 3x3 projective transform with `h33 == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    /// Normalizes by `h33` and rejects singular matrices.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularHomography(f64::NAN));
        }
        let h33 = m[(2, 2)];
        if h33.abs() < DEGENERACY_EPS {
            return Err(Error::SingularHomography(0.0));
        }
        let m = m / h33;
        let det = m.determinant();
        if det.abs() <= DEGENERACY_EPS {
            return Err(Error::SingularHomography(det));
        }
        Ok(Homography(m))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.0[(r, c)]))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.0.try_inverse().ok_or(Error::SingularHomography(self.0.determinant()))?;
        Self::new(inv)
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Homography) -> Result<Self> {
        Self::new(self.0 * first.0)
    }

    pub fn is_identity(&self) -> bool {
        self.0 == Matrix3::identity()
    }

    pub fn warp_point(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let p = self.0 * Vector3::new(x, y, 1.0);
        if p.z.abs() <= DEGENERACY_EPS {
            return Err(Error::PointAtInfinity(p.z));
        }
        Ok((p.x / p.z, p.y / p.z))
    }

    /// The homography taking each `src[i]` to `dst[i]` (direct linear solve
    /// with `h33 = 1`).
    pub fn from_correspondences(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
            let r = 2 * i;
            a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let h = a.lu().solve(&b).ok_or(Error::SingularHomography(0.0))?;
        Self::new(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
    }
}

impl TryFrom<[[f64; 3]; 3]> for Homography {
    type Error = Error;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<Homography> for [[f64; 3]; 3] {
    fn from(h: Homography) -> Self {
        h.rows()
    }
}
