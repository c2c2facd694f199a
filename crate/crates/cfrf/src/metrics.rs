//! Image and geometry quality metrics.
//!
//! IMRC (inverse mean residual color) scores a density field by how well
//! the closed-form color field explains the posed images: it is
//! `-10 log10` of the transmittance-and-opacity-weighted mean squared
//! final residual color over all occupied voxels and visible cameras.
//! Higher is better; wrong geometry (floaters, thick or eroded surfaces)
//! cannot reproduce the observed colors and scores lower.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::estimator::{estimate_voxel_sh, gather_observations, DirectionPdf, EstimatorConfig};
use crate::grid::DensityGrid;
use crate::sh::MAX_DEGREE;

/// PSNR values are capped here (identical inputs would be infinite).
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image shapes differ: {a_w}x{a_h} vs {b_w}x{b_h}")]
    ShapeMismatch {
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },
    #[error("depth maps have different lengths: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("reference depth map is constant; normalization undefined")]
    DegenerateReference,
    #[error("SH degree {0} out of supported range 0..={MAX_DEGREE}")]
    BadDegree(usize),
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// PSNR between two images with values in `[0, 1]`.
pub fn psnr(img: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<f64, MetricsError> {
    if img.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            a: img.len(),
            b: reference.len(),
        });
    }
    let mut acc = 0.0;
    for (a, b) in img.iter().zip(reference) {
        for ch in 0..3 {
            acc += (a[ch] - b[ch]).powi(2);
        }
    }
    let mse = acc / (img.len() as f64 * 3.0);
    Ok(psnr_from_mse(mse))
}

/// Depth PSNR: both maps are normalized to `[0, 1]` by the min/max of the
/// reference map, then compared. Not symmetric; the reference defines the
/// normalization.
pub fn depth_psnr(depth: &[f64], reference: &[f64]) -> Result<f64, MetricsError> {
    if depth.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            a: depth.len(),
            b: reference.len(),
        });
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in reference {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return Err(MetricsError::DegenerateReference);
    }
    let mut acc = 0.0;
    for (a, b) in depth.iter().zip(reference) {
        let na = (a - lo) / range;
        let nb = (b - lo) / range;
        acc += (na - nb).powi(2);
    }
    Ok(psnr_from_mse(acc / depth.len() as f64))
}

#[derive(Debug, Clone)]
pub struct ImrcConfig {
    /// Only voxels with stored density strictly above this take part.
    pub density_threshold: f64,
    pub estimator: EstimatorConfig,
}

impl Default for ImrcConfig {
    fn default() -> Self {
        Self {
            density_threshold: 0.0,
            estimator: EstimatorConfig::default(),
        }
    }
}

/// Inverse mean residual color of a density field, in dB.
///
/// Returns `None` when no voxel carries weight (empty scene): the metric
/// is undefined rather than infinite.
pub fn imrc(
    density: &DensityGrid,
    dataset: &Dataset,
    pdf: &DirectionPdf,
    degree: usize,
    cfg: &ImrcConfig,
) -> Result<Option<f64>, MetricsError> {
    if degree > MAX_DEGREE {
        return Err(MetricsError::BadDegree(degree));
    }
    let delta_v = density.half_width();
    let selected: Vec<usize> = density
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > cfg.density_threshold)
        .map(|(i, _)| i)
        .collect();

    // fixed-order reduction: per-voxel partial sums are combined in flat
    // index order regardless of the thread schedule
    let partials: Vec<(f64, f64)> = selected
        .par_iter()
        .map(|&flat| {
            let (i, j, k) = density.coords(flat);
            let center = density.voxel_center(i, j, k);
            let obs = gather_observations(&center, density, dataset, &cfg.estimator);
            let est = estimate_voxel_sh(&obs, pdf, degree, &cfg.estimator)
                .expect("degree validated above");
            let opacity = 1.0 - (-density.values()[flat] * delta_v).exp();
            let mut num = 0.0;
            let mut den = 0.0;
            for (r, &w) in est.residuals.iter().zip(&obs.weights) {
                let sq = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]) / 3.0;
                num += w * opacity * sq;
                den += w * opacity;
            }
            (num, den)
        })
        .collect();

    let mut num = 0.0;
    let mut den = 0.0;
    for (n, d) in partials {
        num += n;
        den += d;
    }
    if den <= 0.0 {
        return Ok(None);
    }
    Ok(Some(-10.0 * (num / den).log10()))
}

/// Aggregate quality report for a checkpoint against a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_psnr: Option<f64>,
    /// `None` when the scene carries no weight (undefined).
    pub imrc: Option<f64>,
    pub per_view: Vec<ViewMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_psnr: Option<f64>,
}

impl MetricReport {
    /// Human-readable table.
    pub fn to_table(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "view    psnr_db   depth_psnr_db");
        for v in &self.per_view {
            match v.depth_psnr {
                Some(d) => {
                    let _ = writeln!(out, "{:>4}  {:>9.3}  {:>13.3}", v.view, v.psnr, d);
                }
                None => {
                    let _ = writeln!(out, "{:>4}  {:>9.3}  {:>13}", v.view, v.psnr, "-");
                }
            }
        }
        let _ = writeln!(out, "mean  {:>9.3}", self.psnr);
        match self.imrc {
            Some(v) => {
                let _ = writeln!(out, "imrc  {v:>9.3}");
            }
            None => {
                let _ = writeln!(out, "imrc  undefined (no occupied voxels)");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn psnr_arithmetic_cases() {
        let a = vec![[0.5, 0.5, 0.5]; 100];
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);

        // MSE = 0.01 -> 20 dB
        let off: Vec<[f64; 3]> = a.iter().map(|p| [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]).collect();
        assert_abs_diff_eq!(psnr(&off, &a).unwrap(), 20.0, epsilon = 1e-9);

        // MSE = 1 -> 0 dB
        let black = vec![[0.0, 0.0, 0.0]; 4];
        let white = vec![[1.0, 1.0, 1.0]; 4];
        assert_abs_diff_eq!(psnr(&black, &white).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn psnr_is_symmetric() {
        let a = vec![[0.1, 0.9, 0.4]; 10];
        let b = vec![[0.3, 0.2, 0.8]; 10];
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = vec![[0.0; 3]; 4];
        let b = vec![[0.0; 3]; 5];
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn depth_psnr_reference_normalization() {
        let reference = vec![1.0, 2.0, 3.0, 4.0];
        let test = vec![1.1, 2.0, 2.9, 4.0];
        let v1 = depth_psnr(&test, &reference).unwrap();
        // scaling BOTH maps by 2 leaves the value unchanged
        let r2: Vec<f64> = reference.iter().map(|v| v * 2.0).collect();
        let t2: Vec<f64> = test.iter().map(|v| v * 2.0).collect();
        let v2 = depth_psnr(&t2, &r2).unwrap();
        assert_abs_diff_eq!(v1, v2, epsilon = 1e-9);

        assert_eq!(depth_psnr(&reference, &reference).unwrap(), PSNR_CAP);
    }

    #[test]
    fn depth_psnr_degenerate_reference() {
        let reference = vec![2.0; 8];
        let test = vec![1.0; 8];
        assert!(matches!(
            depth_psnr(&test, &reference),
            Err(MetricsError::DegenerateReference)
        ));
    }

    #[test]
    fn imrc_empty_scene_is_undefined() {
        use nalgebra::Vector3;
        let density = DensityGrid::zeros(
            [8, 8, 8],
            Vector3::new(-1.0, -1.0, -1.0),
            Vector3::new(1.0, 1.0, 1.0),
        )
        .unwrap();
        let dataset = Dataset { images: vec![] };
        let v = imrc(
            &density,
            &dataset,
            &DirectionPdf::Uniform,
            2,
            &ImrcConfig::default(),
        )
        .unwrap();
        assert!(v.is_none());
    }
}
