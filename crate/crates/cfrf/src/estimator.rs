//! Closed-form estimation of the SH color field from a density field and
//! posed images.
//!
//! Each voxel is estimated independently from the cameras that see it.
//! Observed colors are projected onto the SH basis by importance-weighted
//! Monte Carlo over the observed directions; transmittance to each camera
//! downweights occluded observations, and a residual scheme estimates the
//! coefficients in turn, subtracting every previously estimated component
//! from the observations before each projection. The residual scheme is
//! what keeps non-uniformly distributed views (e.g. hemisphere captures)
//! from leaking low-frequency energy into higher bands.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::Projection;
use crate::dataset::Dataset;
use crate::grid::{DensityGrid, ShColorGrid};
use crate::render::{transmittance_between, march_bounds, RenderConfig};
use crate::sh::{basis_count, fill_basis, ShCoeffs, MAX_BASIS, MAX_DEGREE};

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("vMF concentration must be nonnegative and finite, got {0}")]
    BadConcentration(f64),
    #[error("mixture needs at least one mode direction")]
    EmptyMixture,
    #[error("mode direction {index} is not a unit vector (|d| = {norm})")]
    NonUnitMode { index: usize, norm: f64 },
    #[error("SH degree {0} out of supported range 0..={MAX_DEGREE}")]
    BadDegree(usize),
}

/// Probability density of observation directions over the sphere.
#[derive(Debug, Clone)]
pub enum DirectionPdf {
    Uniform,
    MixtureVmf {
        modes: Vec<Vector3<f64>>,
        concentration: f64,
    },
}

impl DirectionPdf {
    pub fn mixture_vmf(
        modes: Vec<Vector3<f64>>,
        concentration: f64,
    ) -> Result<Self, EstimatorError> {
        if !(concentration >= 0.0 && concentration.is_finite()) {
            return Err(EstimatorError::BadConcentration(concentration));
        }
        if modes.is_empty() {
            return Err(EstimatorError::EmptyMixture);
        }
        for (index, m) in modes.iter().enumerate() {
            let norm = m.norm();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(EstimatorError::NonUnitMode { index, norm });
            }
        }
        Ok(Self::MixtureVmf {
            modes,
            concentration,
        })
    }

    /// Density at a unit direction.
    ///
    /// The von Mises-Fisher component is `c / (4 pi sinh c) * exp(c mu.d)`,
    /// which tends to the uniform `1/(4 pi)` as `c -> 0`.
    pub fn eval(&self, d: &Vector3<f64>) -> f64 {
        match self {
            DirectionPdf::Uniform => 1.0 / FOUR_PI,
            DirectionPdf::MixtureVmf {
                modes,
                concentration: c,
            } => {
                if *c < 1e-12 {
                    return 1.0 / FOUR_PI;
                }
                // ln(c / sinh c) in log space; sinh c = e^c (1 - e^{-2c}) / 2
                let ln_sinh = c + (-(-2.0 * c).exp()).ln_1p() - std::f64::consts::LN_2;
                let ln_coef = c.ln() - ln_sinh;
                let mut acc = 0.0;
                for mu in modes {
                    acc += (ln_coef + c * mu.dot(d)).exp();
                }
                acc / (FOUR_PI * modes.len() as f64)
            }
        }
    }
}

/// What one voxel sees: per visible camera, the unit direction toward the
/// camera, the bilinear observation color, and the transmittance weight.
#[derive(Debug, Clone, Default)]
pub struct VoxelObservations {
    pub dirs: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub camera_indices: Vec<usize>,
}

impl VoxelObservations {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }
}

fn default_true() -> bool {
    true
}
fn default_rounds() -> usize {
    1
}
fn default_one() -> f64 {
    1.0
}
fn default_min_weight() -> f64 {
    1e-9
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EstimatorConfig {
    /// Weight observations by transmittance toward each camera.
    #[serde(default = "default_true")]
    pub occlusion_weighting: bool,
    /// Subtract previously estimated components before each projection.
    #[serde(default = "default_true")]
    pub residual: bool,
    /// Rounds of in-turn estimation; rounds > 1 re-sweep with all other
    /// components subtracted.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Dead zone around the voxel in units of the grid half-width.
    #[serde(default = "default_one")]
    pub dead_zone_scale: f64,
    /// Transmittance marching step in units of the grid half-width.
    #[serde(default = "default_one")]
    pub step_scale: f64,
    /// Total weight below which a voxel is marked unestimated.
    #[serde(default = "default_min_weight")]
    pub min_total_weight: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            occlusion_weighting: true,
            residual: true,
            rounds: 1,
            dead_zone_scale: 1.0,
            step_scale: 1.0,
            min_total_weight: 1e-9,
        }
    }
}

/// Collect the observations of a world point from every camera that sees
/// it (in front of the camera and inside the image).
pub fn gather_observations(
    v: &Vector3<f64>,
    density: &DensityGrid,
    dataset: &Dataset,
    cfg: &EstimatorConfig,
) -> VoxelObservations {
    let step = density.half_width() * cfg.step_scale;
    let dead_zone = density.half_width() * cfg.dead_zone_scale;
    let mut obs = VoxelObservations::default();
    for (k, img) in dataset.images.iter().enumerate() {
        let Projection::InFront { px, .. } = img.camera.project(v) else {
            continue;
        };
        let Some(color) = img.sample(px) else {
            continue;
        };
        let origin = img.camera.origin();
        let delta = origin - v;
        let dist = delta.norm();
        if dist < 1e-12 {
            continue;
        }
        let weight = if cfg.occlusion_weighting {
            transmittance_between(density, v, &origin, step, dead_zone)
        } else {
            1.0
        };
        obs.dirs.push(delta / dist);
        obs.colors.push(color);
        obs.weights.push(weight);
        obs.camera_indices.push(k);
    }
    obs
}

/// Result of estimating one voxel.
#[derive(Debug, Clone)]
pub struct VoxelEstimate {
    pub coeffs: ShCoeffs,
    /// False when the observation set was empty or had ~zero weight;
    /// the coefficients are then all zero.
    pub estimated: bool,
    /// Per-observation residual color after subtracting the full
    /// reconstruction (what the geometry metric consumes).
    pub residuals: Vec<[f64; 3]>,
}

/// Weighted in-turn projection of observed colors onto the SH basis.
pub fn estimate_voxel_sh(
    obs: &VoxelObservations,
    pdf: &DirectionPdf,
    degree: usize,
    cfg: &EstimatorConfig,
) -> Result<VoxelEstimate, EstimatorError> {
    if degree > MAX_DEGREE {
        return Err(EstimatorError::BadDegree(degree));
    }
    let nb = basis_count(degree);
    let coeffs = ShCoeffs::zeros(degree).expect("degree checked");
    let wsum: f64 = obs.weights.iter().sum();
    if obs.is_empty() || wsum <= cfg.min_total_weight {
        return Ok(VoxelEstimate {
            coeffs,
            estimated: false,
            residuals: obs.colors.clone(),
        });
    }

    let n = obs.len();
    // Per-observation basis rows and 1/p(d) factors.
    let mut basis = vec![0.0f64; n * nb];
    let mut inv_pdf = vec![0.0f64; n];
    let mut buf = [0.0; MAX_BASIS];
    for (k, d) in obs.dirs.iter().enumerate() {
        fill_basis(degree, d, &mut buf);
        basis[k * nb..(k + 1) * nb].copy_from_slice(&buf[..nb]);
        inv_pdf[k] = 1.0 / pdf.eval(d);
    }

    let mut coeffs = coeffs;
    let mut residuals = obs.colors.clone();
    let rounds = if cfg.residual { cfg.rounds.max(1) } else { 1 };
    for round in 0..rounds {
        for j in 0..nb {
            if round > 0 {
                // re-sweep: lift this component back out of the residuals
                let prev = coeffs.coeffs()[j];
                for k in 0..n {
                    let y = basis[k * nb + j];
                    for ch in 0..3 {
                        residuals[k][ch] += prev[ch] * y;
                    }
                }
            }
            let source: &[[f64; 3]] = if cfg.residual { &residuals } else { &obs.colors };
            let mut h = [0.0f64; 3];
            for k in 0..n {
                let f = obs.weights[k] * basis[k * nb + j] * inv_pdf[k];
                for ch in 0..3 {
                    h[ch] += f * source[k][ch];
                }
            }
            for ch in 0..3 {
                h[ch] /= wsum;
            }
            coeffs.coeffs_mut()[j] = h;
            if cfg.residual {
                for k in 0..n {
                    let y = basis[k * nb + j];
                    for ch in 0..3 {
                        residuals[k][ch] -= h[ch] * y;
                    }
                }
            }
        }
    }
    if !cfg.residual {
        // residuals were never maintained: subtract the reconstruction
        for k in 0..n {
            for ch in 0..3 {
                let mut recon = 0.0;
                for j in 0..nb {
                    recon += coeffs.coeffs()[j][ch] * basis[k * nb + j];
                }
                residuals[k][ch] = obs.colors[k][ch] - recon;
            }
        }
    }
    Ok(VoxelEstimate {
        coeffs,
        estimated: true,
        residuals,
    })
}

/// Which voxels to estimate.
#[derive(Debug, Clone)]
pub enum VoxelSet<'a> {
    All,
    /// Voxels with stored density strictly above the threshold.
    DensityAbove(f64),
    /// Voxels whose values feed the trilinear samples of these rays.
    RayBatch(&'a [crate::camera::Ray]),
}

/// Flat indices selected by a [`VoxelSet`], in ascending order.
pub fn select_voxels(density: &DensityGrid, set: &VoxelSet, render_cfg: &RenderConfig) -> Vec<usize> {
    match set {
        VoxelSet::All => (0..density.voxel_count()).collect(),
        VoxelSet::DensityAbove(tau) => density
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > *tau)
            .map(|(i, _)| i)
            .collect(),
        VoxelSet::RayBatch(rays) => {
            let mut mask = vec![false; density.voxel_count()];
            for ray in rays.iter() {
                let Some((t0, n, dt)) = march_bounds(density, ray, render_cfg) else {
                    continue;
                };
                for i in 0..n {
                    let p = ray.point_at(t0 + (i as f64 + 0.5) * dt);
                    if let Some(stencil) = density.stencil(&p) {
                        let sigma: f64 =
                            stencil.iter().map(|&(idx, w)| w * density.values()[idx]).sum();
                        if sigma > 0.0 {
                            for &(idx, _) in &stencil {
                                mask[idx] = true;
                            }
                        }
                    }
                }
            }
            mask.iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(i, _)| i)
                .collect()
        }
    }
}

/// A full color-field estimate plus the per-voxel estimated mask.
#[derive(Debug, Clone)]
pub struct ColorFieldEstimate {
    pub grid: ShColorGrid,
    pub estimated: Vec<bool>,
    pub selected: usize,
}

/// Estimate the SH coefficients of every selected voxel independently.
/// Unselected voxels keep zero coefficients.
pub fn estimate_color_field(
    density: &DensityGrid,
    dataset: &Dataset,
    pdf: &DirectionPdf,
    degree: usize,
    set: &VoxelSet,
    cfg: &EstimatorConfig,
) -> Result<ColorFieldEstimate, EstimatorError> {
    if degree > MAX_DEGREE {
        return Err(EstimatorError::BadDegree(degree));
    }
    let render_cfg = RenderConfig::for_grid(density);
    let selected = select_voxels(density, set, &render_cfg);
    let results: Vec<(usize, VoxelEstimate)> = selected
        .par_iter()
        .map(|&flat| {
            let (i, j, k) = density.coords(flat);
            let center = density.voxel_center(i, j, k);
            let obs = gather_observations(&center, density, dataset, cfg);
            let est = estimate_voxel_sh(&obs, pdf, degree, cfg)
                .expect("degree validated above");
            (flat, est)
        })
        .collect();

    let mut grid = ShColorGrid::zeros(
        density.dims(),
        density.bbox_min(),
        density.bbox_max(),
        degree,
    )
    .expect("geometry comes from a valid grid");
    let mut estimated = vec![false; density.voxel_count()];
    for (flat, est) in &results {
        if est.estimated {
            let (i, j, k) = grid.coords(*flat);
            grid.set_coeffs_at(i, j, k, &est.coeffs);
            estimated[*flat] = true;
        }
    }
    Ok(ColorFieldEstimate {
        grid,
        estimated,
        selected: selected.len(),
    })
}
