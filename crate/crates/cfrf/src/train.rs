//! Density-field training with the closed-form color regularizer.
//!
//! Two losses drive the grids. The photometric loss renders rays through
//! the trainable density and SH color grids and backpropagates through
//! the quadrature to both. The CF loss re-estimates the SH colors of the
//! voxels touched by its ray batch from the current density in closed
//! form, renders through those frozen colors, and backpropagates to the
//! density only: both the estimated coefficients and the estimation
//! weights are treated as constants for the step, so the gradient is
//! exactly the photometric-style density gradient with the colors
//! substituted by the frozen estimates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Ray;
use crate::dataset::Dataset;
use crate::estimator::{estimate_color_field, DirectionPdf, EstimatorConfig, VoxelSet};
use crate::grid::{DensityGrid, ShColorGrid};
use crate::metrics::{depth_psnr, psnr, MetricsError};
use crate::render::{march_bounds, render_depth_map, render_image, RenderConfig};
use crate::sh::{basis_count, fill_basis, MAX_BASIS, MAX_DEGREE};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: L_p = {l_p}, L_cf = {l_cf}")]
    Diverged {
        iteration: usize,
        l_p: f64,
        l_cf: f64,
    },
    #[error("empty ray batch")]
    EmptyBatch,
    #[error("no training views remain after holdout")]
    NoTrainingViews,
    #[error("SH degree {0} out of supported range 0..={MAX_DEGREE}")]
    BadDegree(usize),
    #[error("grids disagree on dims/bbox")]
    GridMismatch,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// A batch of rays with their target pixel colors.
#[derive(Debug, Clone, Default)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub targets: Vec<[f64; 3]>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Loss and gradients of one batch.
#[derive(Debug)]
pub struct LossGrads {
    pub loss: f64,
    /// d loss / d sigma per voxel (flat, x fastest).
    pub density_grad: Vec<f64>,
    /// d loss / d coefficient, laid out like [`ShColorGrid::raw`];
    /// `None` when the color field was frozen.
    pub color_grad: Option<Vec<f64>>,
}

// Per-ray sparse backward record. Color gradients factorize per ray:
// the basis row is constant along a ray, so per corner we only carry
// the accumulated per-channel weight.
struct RayBackward {
    loss: f64,
    density: Vec<(usize, f64)>,
    color_corners: Vec<(usize, [f64; 3])>,
    basis: [f64; MAX_BASIS],
}

fn forward_backward_ray(
    density: &DensityGrid,
    color: &ShColorGrid,
    ray: &Ray,
    target: &[f64; 3],
    cfg: &RenderConfig,
    inv_batch: f64,
    want_grads: bool,
) -> RayBackward {
    let nb = basis_count(color.degree());
    let mut basis = [0.0; MAX_BASIS];
    fill_basis(color.degree(), &ray.dir, &mut basis);

    let mut out = RayBackward {
        loss: 0.0,
        density: Vec::new(),
        color_corners: Vec::new(),
        basis,
    };

    struct Sample {
        stencil: crate::grid::Stencil,
        t_before: f64,
        alpha: f64,
        rgb: [f64; 3],
    }

    let mut samples: Vec<Sample> = Vec::new();
    let mut rendered = [0.0f64; 3];
    let mut transmittance = 1.0;
    let mut step_dt = 0.0;
    if let Some((t0, n, dt)) = march_bounds(density, ray, cfg) {
        step_dt = dt;
        samples.reserve(n);
        let stride = color.voxel_stride();
        let mut coeff_buf = [0.0f64; 3 * MAX_BASIS];
        for i in 0..n {
            let p = ray.point_at(t0 + (i as f64 + 0.5) * dt);
            let Some(stencil) = density.stencil(&p) else {
                continue;
            };
            let sigma: f64 = stencil
                .iter()
                .map(|&(idx, w)| w * density.values()[idx])
                .sum();
            let alpha = 1.0 - (-sigma * dt).exp();
            // interpolated color at the sample
            let flat = &mut coeff_buf[..stride];
            flat.fill(0.0);
            for &(vox, w) in &stencil {
                if w == 0.0 {
                    continue;
                }
                let base = vox * stride;
                for (o, c) in flat.iter_mut().zip(&color.raw()[base..base + stride]) {
                    *o += w * c;
                }
            }
            let mut rgb = [0.0f64; 3];
            for ch in 0..3 {
                let coeffs = &flat[ch * nb..(ch + 1) * nb];
                rgb[ch] = coeffs.iter().zip(&basis[..nb]).map(|(c, b)| c * b).sum();
            }
            let weight = transmittance * alpha;
            for ch in 0..3 {
                rendered[ch] += weight * rgb[ch];
            }
            samples.push(Sample {
                stencil,
                t_before: transmittance,
                alpha,
                rgb,
            });
            transmittance *= 1.0 - alpha;
            if cfg.early_stop > 0.0 && transmittance < cfg.early_stop {
                break;
            }
        }
    }

    let mut dldc = [0.0f64; 3];
    for ch in 0..3 {
        let diff = rendered[ch] - target[ch];
        out.loss += diff * diff * inv_batch;
        dldc[ch] = 2.0 * diff * inv_batch;
    }
    if !want_grads || samples.is_empty() {
        return out;
    }
    let dt = step_dt;
    out.density.reserve(samples.len() * 8);
    out.color_corners.reserve(samples.len() * 8);
    let mut suffix = [0.0f64; 3];
    for s in samples.iter().rev() {
        // color: dC/dc_i = T_i alpha_i, factored through the stencil
        let w_color = s.t_before * s.alpha;
        for &(vox, w) in &s.stencil {
            if w == 0.0 {
                continue;
            }
            out.color_corners.push((
                vox,
                [
                    dldc[0] * w_color * w,
                    dldc[1] * w_color * w,
                    dldc[2] * w_color * w,
                ],
            ));
        }
        // density: dC/dsigma_i = dt * ((1 - alpha_i) T_i c_i - S_i)
        let mut dldsigma = 0.0;
        for ch in 0..3 {
            dldsigma +=
                dldc[ch] * dt * ((1.0 - s.alpha) * s.t_before * s.rgb[ch] - suffix[ch]);
        }
        for &(vox, w) in &s.stencil {
            if w != 0.0 {
                out.density.push((vox, dldsigma * w));
            }
        }
        let w = s.t_before * s.alpha;
        for ch in 0..3 {
            suffix[ch] += w * s.rgb[ch];
        }
    }
    out
}

/// Mean-squared photometric loss of a ray batch with gradients for both
/// grids, differentiated through the rendering quadrature.
pub fn photometric_loss(
    density: &DensityGrid,
    color: &ShColorGrid,
    batch: &RayBatch,
    cfg: &RenderConfig,
) -> Result<LossGrads, TrainError> {
    render_loss(density, color, batch, cfg, true)
}

/// Same loss with the color field frozen: gradients flow to density only.
pub fn frozen_color_loss(
    density: &DensityGrid,
    color: &ShColorGrid,
    batch: &RayBatch,
    cfg: &RenderConfig,
) -> Result<LossGrads, TrainError> {
    render_loss(density, color, batch, cfg, false)
}

/// Forward-only batch loss (the finite-difference oracle path).
pub fn batch_loss(
    density: &DensityGrid,
    color: &ShColorGrid,
    batch: &RayBatch,
    cfg: &RenderConfig,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let inv_batch = 1.0 / batch.len() as f64;
    let loss = batch
        .rays
        .par_iter()
        .zip(&batch.targets)
        .map(|(ray, target)| {
            forward_backward_ray(density, color, ray, target, cfg, inv_batch, false).loss
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(loss)
}

fn render_loss(
    density: &DensityGrid,
    color: &ShColorGrid,
    batch: &RayBatch,
    cfg: &RenderConfig,
    want_color_grad: bool,
) -> Result<LossGrads, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if density.dims() != color.dims() {
        return Err(TrainError::GridMismatch);
    }
    let inv_batch = 1.0 / batch.len() as f64;
    let per_ray: Vec<RayBackward> = batch
        .rays
        .par_iter()
        .zip(&batch.targets)
        .map(|(ray, target)| {
            forward_backward_ray(density, color, ray, target, cfg, inv_batch, true)
        })
        .collect();

    // deterministic accumulation: scatter in ray order
    let nb = basis_count(color.degree());
    let mut loss = 0.0;
    let mut density_grad = vec![0.0f64; density.voxel_count()];
    let mut color_grad = if want_color_grad {
        Some(vec![0.0f64; color.raw().len()])
    } else {
        None
    };
    for rb in &per_ray {
        loss += rb.loss;
        for &(vox, g) in &rb.density {
            density_grad[vox] += g;
        }
        if let Some(cg) = color_grad.as_mut() {
            for &(vox, a) in &rb.color_corners {
                for ch in 0..3 {
                    if a[ch] == 0.0 {
                        continue;
                    }
                    let base = color.coeff_offset(vox, ch, 0);
                    for j in 0..nb {
                        cg[base + j] += a[ch] * rb.basis[j];
                    }
                }
            }
        }
    }
    Ok(LossGrads {
        loss,
        density_grad,
        color_grad,
    })
}

/// The CF loss: estimate SH colors for the voxels the batch touches,
/// render through them frozen, and return the density gradient.
pub struct CfLoss {
    pub loss: f64,
    pub density_grad: Vec<f64>,
    /// The frozen color field used for this step.
    pub estimated: ShColorGrid,
}

pub fn cf_loss(
    density: &DensityGrid,
    dataset: &Dataset,
    batch: &RayBatch,
    pdf: &DirectionPdf,
    degree: usize,
    est_cfg: &EstimatorConfig,
    render_cfg: &RenderConfig,
) -> Result<CfLoss, TrainError> {
    if degree > MAX_DEGREE {
        return Err(TrainError::BadDegree(degree));
    }
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let estimate = estimate_color_field(
        density,
        dataset,
        pdf,
        degree,
        &VoxelSet::RayBatch(&batch.rays),
        est_cfg,
    )
    .map_err(|e| TrainError::Config(e.to_string()))?;
    let grads = frozen_color_loss(density, &estimate.grid, batch, render_cfg)?;
    Ok(CfLoss {
        loss: grads.loss,
        density_grad: grads.density_grad,
        estimated: estimate.grid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Per-parameter adaptive step (RMSProp style).
    RmsProp { decay: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::RmsProp {
            decay: 0.95,
            eps: 1e-8,
        }
    }
}

fn default_batch_rays() -> usize {
    512
}
fn default_cf_rays() -> usize {
    25
}
fn default_lambda() -> f64 {
    0.1
}
fn default_iterations() -> usize {
    500
}
fn default_sh_degree() -> usize {
    2
}
fn default_lr_density() -> f64 {
    2.0
}
fn default_lr_color() -> f64 {
    0.05
}
fn default_lr_decay() -> f64 {
    0.1
}
fn default_eval_every() -> usize {
    100
}
fn default_early_stop() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch_rays")]
    pub batch_rays: usize,
    /// Rays per step for the CF loss.
    #[serde(default = "default_cf_rays")]
    pub cf_rays: usize,
    /// Weight of the CF loss; 0 disables it entirely.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_sh_degree")]
    pub sh_degree: usize,
    #[serde(default = "default_lr_density")]
    pub lr_density: f64,
    #[serde(default = "default_lr_color")]
    pub lr_color: f64,
    /// Geometric learning-rate decay over the run (final/initial ratio).
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate held-out metrics every this many iterations (0 = never).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Camera indices excluded from training and used for evaluation.
    #[serde(default)]
    pub holdout: Vec<usize>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default = "default_early_stop")]
    pub render_early_stop: f64,
    /// Starting iteration (continues counting on resumed runs).
    #[serde(default)]
    pub start_iteration: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Parse and validate a training config from JSON bytes.
pub fn parse_train_config(bytes: &[u8]) -> Result<TrainConfig, TrainConfigError> {
    let cfg: TrainConfig = serde_json::from_slice(bytes)?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Error)]
pub enum TrainConfigError {
    #[error("train config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid train config: {0}")]
    Invalid(String),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainConfigError> {
        let bad = |msg: &str| Err(TrainConfigError::Invalid(msg.into()));
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return bad("lambda must be nonnegative");
        }
        if self.batch_rays == 0 {
            return bad("batch_rays must be positive");
        }
        if self.sh_degree > MAX_DEGREE {
            return bad("sh_degree out of range");
        }
        if !(self.lr_density > 0.0 && self.lr_color > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(self.render_early_stop >= 0.0 && self.render_early_stop < 1.0) {
            return bad("render_early_stop must be in [0, 1)");
        }
        Ok(())
    }
}

/// One CSV row of training progress.
#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub iteration: usize,
    pub l_p: f64,
    pub l_cf: f64,
    pub total: f64,
    pub psnr: Option<f64>,
    pub depth_psnr: Option<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iteration,l_p,l_cf,total,psnr,depth_psnr";

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.9},{:.9},{:.9},{},{}",
            self.iteration,
            self.l_p,
            self.l_cf,
            self.total,
            opt(self.psnr),
            opt(self.depth_psnr)
        )
    }
}

pub struct TrainOutput {
    pub density: DensityGrid,
    pub color: ShColorGrid,
    pub reports: Vec<LossReport>,
    pub next_iteration: usize,
}

struct RmsState {
    v: Vec<f64>,
}

impl RmsState {
    fn new(n: usize) -> Self {
        Self { v: vec![0.0; n] }
    }

    fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        kind: &OptimizerKind,
        floor: Option<f64>,
    ) {
        match kind {
            OptimizerKind::RmsProp { decay, eps } => {
                for i in 0..params.len() {
                    let g = grads[i];
                    self.v[i] = decay * self.v[i] + (1.0 - decay) * g * g;
                    if g != 0.0 {
                        params[i] -= lr * g / (self.v[i].sqrt() + eps);
                    }
                    if let Some(f) = floor {
                        if params[i] < f {
                            params[i] = f;
                        }
                    }
                }
            }
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    params[i] -= lr * grads[i];
                    if let Some(f) = floor {
                        if params[i] < f {
                            params[i] = f;
                        }
                    }
                }
            }
        }
    }
}

/// Sample `count` training rays (integer pixel centers) from the given
/// views using `rng`.
fn sample_batch(
    dataset: &Dataset,
    views: &[usize],
    count: usize,
    rng: &mut impl rand::Rng,
) -> RayBatch {
    let mut batch = RayBatch::default();
    for _ in 0..count {
        let view = views[rng.random_range(0..views.len())];
        let img = &dataset.images[view];
        let i = rng.random_range(0..img.camera.width);
        let j = rng.random_range(0..img.camera.height);
        let ray = img.camera.pixel_ray(i, j).expect("pixel in bounds");
        batch.rays.push(ray);
        batch.targets.push(img.pixel(i, j));
    }
    batch
}

/// Optimize the grids on a dataset. Deterministic per seed; the
/// photometric and CF ray streams are independent, so runs that differ
/// only in `lambda` sample identical photometric rays.
pub fn train(
    dataset: &Dataset,
    init_density: DensityGrid,
    init_color: ShColorGrid,
    cfg: &TrainConfig,
    ref_depths: Option<&[Vec<f64>]>,
) -> Result<TrainOutput, TrainError> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    cfg.validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    if init_density.dims() != init_color.dims() {
        return Err(TrainError::GridMismatch);
    }
    let train_views: Vec<usize> = (0..dataset.len())
        .filter(|i| !cfg.holdout.contains(i))
        .collect();
    if train_views.is_empty() {
        return Err(TrainError::NoTrainingViews);
    }

    let mut density = init_density;
    let mut color = init_color;
    let mut rng_photo = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x70_68_6f_74_6f);
    let mut rng_cf = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x63_66_72_61_79);
    let mut density_opt = RmsState::new(density.voxel_count());
    let mut color_opt = RmsState::new(color.raw().len());
    let pdf = DirectionPdf::Uniform;
    let mut reports = Vec::with_capacity(cfg.iterations);

    let use_cf = cfg.lambda > 0.0 && cfg.cf_rays > 0;
    for step in 0..cfg.iterations {
        let iteration = cfg.start_iteration + step;
        let render_cfg = RenderConfig::for_grid(&density)
            .with_early_stop(cfg.render_early_stop);
        let frac = if cfg.iterations > 1 {
            step as f64 / (cfg.iterations - 1) as f64
        } else {
            0.0
        };
        let lr_scale = cfg.lr_decay.powf(frac);

        let batch = sample_batch(dataset, &train_views, cfg.batch_rays, &mut rng_photo);
        let photo = photometric_loss(&density, &color, &batch, &render_cfg)?;

        let cf = if use_cf {
            let cf_batch = sample_batch(dataset, &train_views, cfg.cf_rays, &mut rng_cf);
            Some(cf_loss(
                &density,
                dataset,
                &cf_batch,
                &pdf,
                cfg.sh_degree,
                &cfg.estimator,
                &render_cfg,
            )?)
        } else {
            None
        };

        let l_p = photo.loss;
        let l_cf = cf.as_ref().map_or(0.0, |c| c.loss);
        let total = l_p + cfg.lambda * l_cf;
        if !total.is_finite() {
            return Err(TrainError::Diverged {
                iteration,
                l_p,
                l_cf,
            });
        }

        // combine density gradients
        let mut density_grad = photo.density_grad;
        if let Some(cf) = &cf {
            for (g, c) in density_grad.iter_mut().zip(&cf.density_grad) {
                *g += cfg.lambda * c;
            }
        }

        // density step with projection to sigma >= 0
        {
            let mut values = density.values().to_vec();
            density_opt.step(
                &mut values,
                &density_grad,
                cfg.lr_density * lr_scale,
                &cfg.optimizer,
                Some(0.0),
            );
            density = DensityGrid::new(
                density.dims(),
                density.bbox_min(),
                density.bbox_max(),
                values,
            )
            .expect("projection keeps densities valid");
        }
        // color step
        if let Some(cg) = &photo.color_grad {
            color_opt.step(
                color.raw_mut(),
                cg,
                cfg.lr_color * lr_scale,
                &cfg.optimizer,
                None,
            );
        }

        let eval_now = cfg.eval_every > 0
            && !cfg.holdout.is_empty()
            && (step + 1) % cfg.eval_every == 0;
        let (mut eval_psnr, mut eval_depth) = (None, None);
        if eval_now {
            let render_cfg = RenderConfig::for_grid(&density);
            let mut acc_psnr = 0.0;
            let mut acc_depth = 0.0;
            let mut n_depth = 0usize;
            for (slot, &view) in cfg.holdout.iter().enumerate() {
                let img = &dataset.images[view];
                let rendered = render_image(&density, &color, &img.camera, &render_cfg);
                acc_psnr += psnr(rendered.pixels(), img.pixels())?;
                if let Some(refs) = ref_depths {
                    if let Some(r) = refs.get(slot) {
                        let d = render_depth_map(&density, &img.camera, &render_cfg);
                        acc_depth += depth_psnr(&d, r)?;
                        n_depth += 1;
                    }
                }
            }
            eval_psnr = Some(acc_psnr / cfg.holdout.len() as f64);
            if n_depth > 0 {
                eval_depth = Some(acc_depth / n_depth as f64);
            }
        }

        reports.push(LossReport {
            iteration,
            l_p,
            l_cf,
            total,
            psnr: eval_psnr,
            depth_psnr: eval_depth,
        });
    }

    let next_iteration = cfg.start_iteration + cfg.iterations;
    Ok(TrainOutput {
        density,
        color,
        reports,
        next_iteration,
    })
}
