//! Real spherical harmonics basis up to degree 4 and SH-expanded colors.
//!
//! The basis is orthonormal over the unit sphere (`∫ Y_i Y_j dd = δ_ij`)
//! and uses the phase-free real convention common in graphics: every
//! leading constant is positive. Basis values are laid out flat in the
//! order `(0,0), (1,-1), (1,0), (1,1), (2,-2), ...`, i.e. index
//! `l² + l + m`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest supported SH degree.
pub const MAX_DEGREE: usize = 4;

/// Number of basis functions for a given degree: `(L+1)²`.
pub const fn basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Flat index of the `(l, m)` basis function.
pub const fn sh_index(l: usize, m: i64) -> usize {
    (l * l) as usize + (l as i64 + m) as usize
}

/// Maximum number of basis values (`basis_count(MAX_DEGREE)`).
pub const MAX_BASIS: usize = basis_count(MAX_DEGREE);

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ShError {
    #[error("direction must be a unit vector (|d| = {norm}, tolerance {UNIT_TOL})")]
    NonUnitDirection { norm: f64 },
    #[error("SH degree {degree} out of supported range 0..={MAX_DEGREE}")]
    DegreeOutOfRange { degree: usize },
    #[error("expected {expected} coefficients per channel for degree {degree}, got {got}")]
    CoeffCountMismatch {
        degree: usize,
        expected: usize,
        got: usize,
    },
}

// Leading constants of the real SH polynomials, degree 0..4.
const C0: f64 = 0.282_094_791_773_878_14; // 1/2 sqrt(1/pi)
const C1: f64 = 0.488_602_511_902_919_92; // sqrt(3/(4 pi))
const C2_N2: f64 = 1.092_548_430_592_079_2; // 1/2 sqrt(15/pi)
const C2_0: f64 = 0.315_391_565_252_520_05; // 1/4 sqrt(5/pi)
const C2_2: f64 = 0.546_274_215_296_039_6; // 1/4 sqrt(15/pi)
const C3_N3: f64 = 0.590_043_589_926_643_5; // 1/4 sqrt(35/(2 pi))
const C3_N2: f64 = 2.890_611_442_640_554; // 1/2 sqrt(105/pi)
const C3_N1: f64 = 0.457_045_799_464_465_74; // 1/4 sqrt(21/(2 pi))
const C3_0: f64 = 0.373_176_332_590_115_4; // 1/4 sqrt(7/pi)
const C3_2: f64 = 1.445_305_721_320_277; // 1/4 sqrt(105/pi)
const C4_N4: f64 = 2.503_342_941_796_704_5; // 3/4 sqrt(35/pi)
const C4_N3: f64 = 1.770_130_769_779_930_2; // 3/4 sqrt(35/(2 pi))
const C4_N2: f64 = 0.946_174_695_757_560_1; // 3/4 sqrt(5/pi)
const C4_N1: f64 = 0.669_046_543_557_289_2; // 3/4 sqrt(5/(2 pi))
const C4_0: f64 = 0.105_785_546_915_204_31; // 3/16 sqrt(1/pi)
const C4_2: f64 = 0.473_087_347_878_780_05; // 3/8 sqrt(5/pi)
const C4_3: f64 = 1.770_130_769_779_930_2; // 3/4 sqrt(35/(2 pi))
const C4_4: f64 = 0.625_835_735_449_176_1; // 3/16 sqrt(35/pi)

/// Fill `out` with basis values for `degree` at unit direction `d`.
///
/// No validation; callers on hot paths guarantee the preconditions.
/// Returns the number of values written.
pub(crate) fn fill_basis(degree: usize, d: &Vector3<f64>, out: &mut [f64; MAX_BASIS]) -> usize {
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = C0;
    if degree >= 1 {
        out[1] = C1 * y;
        out[2] = C1 * z;
        out[3] = C1 * x;
    }
    if degree >= 2 {
        let (x2, y2, z2) = (x * x, y * y, z * z);
        out[4] = C2_N2 * x * y;
        out[5] = C2_N2 * y * z;
        out[6] = C2_0 * (3.0 * z2 - 1.0);
        out[7] = C2_N2 * x * z;
        out[8] = C2_2 * (x2 - y2);
        if degree >= 3 {
            out[9] = C3_N3 * y * (3.0 * x2 - y2);
            out[10] = C3_N2 * x * y * z;
            out[11] = C3_N1 * y * (5.0 * z2 - 1.0);
            out[12] = C3_0 * z * (5.0 * z2 - 3.0);
            out[13] = C3_N1 * x * (5.0 * z2 - 1.0);
            out[14] = C3_2 * z * (x2 - y2);
            out[15] = C3_N3 * x * (x2 - 3.0 * y2);
        }
        if degree >= 4 {
            out[16] = C4_N4 * x * y * (x2 - y2);
            out[17] = C4_N3 * y * z * (3.0 * x2 - y2);
            out[18] = C4_N2 * x * y * (7.0 * z2 - 1.0);
            out[19] = C4_N1 * y * z * (7.0 * z2 - 3.0);
            out[20] = C4_0 * (35.0 * z2 * z2 - 30.0 * z2 + 3.0);
            out[21] = C4_N1 * x * z * (7.0 * z2 - 3.0);
            out[22] = C4_2 * (x2 - y2) * (7.0 * z2 - 1.0);
            out[23] = C4_3 * x * z * (x2 - 3.0 * y2);
            out[24] = C4_4 * (x2 * (x2 - 3.0 * y2) - y2 * (3.0 * x2 - y2));
        }
    }
    basis_count(degree)
}

fn check_unit(d: &Vector3<f64>) -> Result<(), ShError> {
    let norm = d.norm();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(ShError::NonUnitDirection { norm });
    }
    Ok(())
}

fn check_degree(degree: usize) -> Result<(), ShError> {
    if degree > MAX_DEGREE {
        return Err(ShError::DegreeOutOfRange { degree });
    }
    Ok(())
}

/// Evaluate the real SH basis of the given degree at a unit direction.
///
/// Values come back in flat `(l, m)` order, length `(degree+1)²`.
pub fn eval_basis(degree: usize, d: &Vector3<f64>) -> Result<Vec<f64>, ShError> {
    check_degree(degree)?;
    check_unit(d)?;
    let mut buf = [0.0; MAX_BASIS];
    let n = fill_basis(degree, d, &mut buf);
    Ok(buf[..n].to_vec())
}

/// Per-point SH coefficients for three color channels.
///
/// `data[sh_index(l, m)]` holds the `(l, m)` coefficient as an RGB triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShCoeffs {
    degree: usize,
    data: Vec<[f64; 3]>,
}

impl ShCoeffs {
    pub fn zeros(degree: usize) -> Result<Self, ShError> {
        check_degree(degree)?;
        Ok(Self {
            degree,
            data: vec![[0.0; 3]; basis_count(degree)],
        })
    }

    pub fn new(degree: usize, data: Vec<[f64; 3]>) -> Result<Self, ShError> {
        check_degree(degree)?;
        if data.len() != basis_count(degree) {
            return Err(ShError::CoeffCountMismatch {
                degree,
                expected: basis_count(degree),
                got: data.len(),
            });
        }
        Ok(Self { degree, data })
    }

    /// A view-independent color: only the `(0,0)` coefficient is set.
    pub fn constant_color(degree: usize, rgb: [f64; 3]) -> Result<Self, ShError> {
        let mut c = Self::zeros(degree)?;
        c.data[0] = [rgb[0] / C0, rgb[1] / C0, rgb[2] / C0];
        Ok(c)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coeffs(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn coeffs_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    pub fn get(&self, l: usize, m: i64) -> [f64; 3] {
        self.data[sh_index(l, m)]
    }

    pub fn set(&mut self, l: usize, m: i64, rgb: [f64; 3]) {
        self.data[sh_index(l, m)] = rgb;
    }

    /// Validate after deserialization (serde cannot enforce the length tie).
    pub fn validate(&self) -> Result<(), ShError> {
        check_degree(self.degree)?;
        if self.data.len() != basis_count(self.degree) {
            return Err(ShError::CoeffCountMismatch {
                degree: self.degree,
                expected: basis_count(self.degree),
                got: self.data.len(),
            });
        }
        Ok(())
    }
}

/// Evaluate the SH-expanded color along unit direction `d`.
///
/// The result is intentionally not clamped; estimated fields may
/// overshoot `[0, 1]`.
pub fn eval_color(coeffs: &ShCoeffs, d: &Vector3<f64>) -> Result<[f64; 3], ShError> {
    check_unit(d)?;
    let mut basis = [0.0; MAX_BASIS];
    let n = fill_basis(coeffs.degree, d, &mut basis);
    let mut rgb = [0.0; 3];
    for (j, &b) in basis[..n].iter().enumerate() {
        let c = coeffs.data[j];
        rgb[0] += c[0] * b;
        rgb[1] += c[1] * b;
        rgb[2] += c[2] * b;
    }
    Ok(rgb)
}
