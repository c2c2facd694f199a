//! Discretized absorption-emission volume rendering.
//!
//! Rays march through the density grid with uniform steps; each segment
//! contributes `T_i * alpha_i * c_i` with `alpha_i = 1 - exp(-sigma_i * dt)`
//! and transmittance accumulated multiplicatively. The background is
//! black: rays that exit the grid simply keep their remaining
//! transmittance.

use nalgebra::Vector3;

use crate::camera::{Camera, PosedImage, Ray};
use crate::grid::{DensityGrid, ShColorGrid};

/// Optical depth beyond which a segment is treated as fully opaque.
const TAU_CUTOFF: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Marching step in world units.
    pub step: f64,
    /// Default near bound applied on top of each ray's own bounds.
    pub t_near: f64,
    /// Default far bound applied on top of each ray's own bounds.
    pub t_far: f64,
    /// Early termination threshold on transmittance; `0` disables.
    pub early_stop: f64,
}

impl RenderConfig {
    /// Defaults for a grid: step = half the smallest voxel edge.
    pub fn for_grid(grid: &DensityGrid) -> Self {
        Self {
            step: grid.half_width(),
            t_near: 0.0,
            t_far: f64::INFINITY,
            early_stop: 1e-6,
        }
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn with_early_stop(mut self, early_stop: f64) -> Self {
        self.early_stop = early_stop;
        self
    }

    pub fn with_far(mut self, t_far: f64) -> Self {
        self.t_far = t_far;
        self
    }
}

/// Intersect `[t0, t1]` of a ray with an axis-aligned box.
pub(crate) fn clip_to_bbox(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    bbox_min: &Vector3<f64>,
    bbox_max: &Vector3<f64>,
    mut t0: f64,
    mut t1: f64,
) -> Option<(f64, f64)> {
    for a in 0..3 {
        let d = dir[a];
        if d.abs() < 1e-15 {
            if origin[a] < bbox_min[a] || origin[a] > bbox_max[a] {
                return None;
            }
            continue;
        }
        let ta = (bbox_min[a] - origin[a]) / d;
        let tb = (bbox_max[a] - origin[a]) / d;
        let (lo, hi) = if ta <= tb { (ta, tb) } else { (tb, ta) };
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 >= t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Split `[t0, t1]` into equal segments no longer than `step`.
pub(crate) fn segment_count(t0: f64, t1: f64, step: f64) -> (usize, f64) {
    debug_assert!(step > 0.0 && t1 > t0);
    let n = ((t1 - t0) / step).ceil().max(1.0) as usize;
    (n, (t1 - t0) / n as f64)
}

/// Marching plan for a ray through a grid.
pub(crate) fn march_bounds(
    grid: &DensityGrid,
    ray: &Ray,
    cfg: &RenderConfig,
) -> Option<(f64, usize, f64)> {
    let t0 = ray.t_near.max(cfg.t_near);
    let t1 = ray.t_far.min(cfg.t_far);
    if t0 >= t1 {
        return None;
    }
    let (t0, t1) = clip_to_bbox(
        &ray.origin,
        &ray.dir,
        &grid.bbox_min(),
        &grid.bbox_max(),
        t0,
        t1,
    )?;
    let (n, dt) = segment_count(t0, t1, cfg.step);
    Some((t0, n, dt))
}

/// Render one ray. `color` maps (point, view direction along the ray) to
/// RGB. Returns the composited color and the final transmittance.
pub fn render_ray<F>(
    density: &DensityGrid,
    color: &F,
    ray: &Ray,
    cfg: &RenderConfig,
) -> ([f64; 3], f64)
where
    F: Fn(&Vector3<f64>, &Vector3<f64>) -> [f64; 3] + ?Sized,
{
    let Some((t0, n, dt)) = march_bounds(density, ray, cfg) else {
        return ([0.0; 3], 1.0);
    };
    let mut rgb = [0.0; 3];
    let mut transmittance = 1.0;
    for i in 0..n {
        let t = t0 + (i as f64 + 0.5) * dt;
        let p = ray.point_at(t);
        let sigma = density.sample(&p);
        if sigma > 0.0 {
            let alpha = 1.0 - (-sigma * dt).exp();
            let weight = transmittance * alpha;
            let c = color(&p, &ray.dir);
            for ch in 0..3 {
                rgb[ch] += weight * c[ch];
            }
            transmittance *= 1.0 - alpha;
            if transmittance < cfg.early_stop {
                break;
            }
        }
    }
    (rgb, transmittance)
}

/// Expected termination depth of a ray: the weight-averaged sample depth,
/// or the effective far bound when nothing is hit.
pub fn render_depth(density: &DensityGrid, ray: &Ray, cfg: &RenderConfig) -> f64 {
    let fallback = if cfg.t_far.is_finite() {
        cfg.t_far
    } else {
        ray.t_far
    };
    let Some((t0, n, dt)) = march_bounds(density, ray, cfg) else {
        return if fallback.is_finite() { fallback } else { 0.0 };
    };
    let fallback = if fallback.is_finite() { fallback } else { t0 + n as f64 * dt };
    let mut transmittance = 1.0;
    let mut weight_sum = 0.0;
    let mut depth_sum = 0.0;
    for i in 0..n {
        let t = t0 + (i as f64 + 0.5) * dt;
        let sigma = density.sample(&ray.point_at(t));
        if sigma > 0.0 {
            let alpha = 1.0 - (-sigma * dt).exp();
            let w = transmittance * alpha;
            weight_sum += w;
            depth_sum += w * t;
            transmittance *= 1.0 - alpha;
            if transmittance < cfg.early_stop {
                break;
            }
        }
    }
    if weight_sum < 1e-6 {
        fallback
    } else {
        depth_sum / weight_sum
    }
}

/// Transmittance along the segment from `v` to `o`, skipping a dead zone
/// around `v` so that a surface point is not occluded by its own voxel.
///
/// `dead_zone` is a distance in world units (normally one voxel
/// half-width).
pub fn transmittance_between(
    density: &DensityGrid,
    v: &Vector3<f64>,
    o: &Vector3<f64>,
    step: f64,
    dead_zone: f64,
) -> f64 {
    let delta = o - v;
    let len = delta.norm();
    if len <= dead_zone || len == 0.0 {
        return 1.0;
    }
    let dir = delta / len;
    let Some((s0, s1)) = clip_to_bbox(
        v,
        &dir,
        &density.bbox_min(),
        &density.bbox_max(),
        dead_zone,
        len,
    ) else {
        return 1.0;
    };
    let (n, ds) = segment_count(s0, s1, step);
    let mut tau = 0.0;
    for i in 0..n {
        let s = s0 + (i as f64 + 0.5) * ds;
        tau += density.sample(&(v + s * dir)) * ds;
        if tau > TAU_CUTOFF {
            return 0.0;
        }
    }
    (-tau).exp()
}

/// Render a full image through the SH color grid.
pub fn render_image(
    density: &DensityGrid,
    color: &ShColorGrid,
    camera: &Camera,
    cfg: &RenderConfig,
) -> PosedImage {
    render_image_with(density, &|p, d| color.sample_color(p, d), camera, cfg)
}

/// Render a full image with an arbitrary color source, in parallel rows.
pub fn render_image_with<F>(
    density: &DensityGrid,
    color: &F,
    camera: &Camera,
    cfg: &RenderConfig,
) -> PosedImage
where
    F: Fn(&Vector3<f64>, &Vector3<f64>) -> [f64; 3] + Sync + ?Sized,
{
    use rayon::prelude::*;
    let width = camera.width;
    let rows: Vec<Vec<[f64; 3]>> = (0..camera.height)
        .into_par_iter()
        .map(|j| {
            (0..width)
                .map(|i| {
                    let ray = camera.pixel_ray(i, j).expect("pixel in bounds");
                    render_ray(density, color, &ray, cfg).0
                })
                .collect()
        })
        .collect();
    let pixels = rows.into_iter().flatten().collect();
    PosedImage::new(camera.clone(), pixels).expect("pixel count matches camera")
}

/// Depth map for a camera (same marching as [`render_image`]).
pub fn render_depth_map(density: &DensityGrid, camera: &Camera, cfg: &RenderConfig) -> Vec<f64> {
    use rayon::prelude::*;
    let width = camera.width;
    let rows: Vec<Vec<f64>> = (0..camera.height)
        .into_par_iter()
        .map(|j| {
            (0..width)
                .map(|i| {
                    let ray = camera.pixel_ray(i, j).expect("pixel in bounds");
                    render_depth(density, &ray, cfg)
                })
                .collect()
        })
        .collect();
    rows.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_bbox_grid(dims: [usize; 3]) -> DensityGrid {
        DensityGrid::zeros(
            dims,
            Vector3::new(-1.0, -1.0, -1.0),
            Vector3::new(1.0, 1.0, 1.0),
        )
        .unwrap()
    }

    fn x_ray() -> Ray {
        Ray::new(
            Vector3::new(-3.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            0.0,
            f64::INFINITY,
        )
        .unwrap()
    }

    /// Uniform-density grid over a slab in x, for closed-form checks.
    fn slab_grid(sigma: f64) -> DensityGrid {
        // 1D in x: dense enough that trilinear edges stay sharp
        let dims = [64, 1, 1];
        let values = (0..64)
            .map(|i| {
                let x = -1.0 + (i as f64 + 0.5) / 32.0;
                if x.abs() <= 0.5 {
                    sigma
                } else {
                    0.0
                }
            })
            .collect();
        DensityGrid::new(
            dims,
            Vector3::new(-1.0, -1.0, -1.0),
            Vector3::new(1.0, 1.0, 1.0),
            values,
        )
        .unwrap()
    }

    const WHITE: fn(&Vector3<f64>, &Vector3<f64>) -> [f64; 3] = |_, _| [1.0, 1.0, 1.0];

    #[test]
    fn empty_space_renders_black() {
        let g = unit_bbox_grid([8, 8, 8]);
        let cfg = RenderConfig::for_grid(&g);
        let (rgb, t) = render_ray(&g, &WHITE, &x_ray(), &cfg);
        assert_eq!(rgb, [0.0; 3]);
        assert_eq!(t, 1.0);
    }

    #[test]
    fn homogeneous_slab_matches_closed_form() {
        // optical depth sigma * L = 2.0 * 1.0
        let g = slab_grid(2.0);
        let cfg = RenderConfig::for_grid(&g).with_early_stop(0.0);
        let color = |_: &Vector3<f64>, _: &Vector3<f64>| [0.8, 0.5, 0.25];
        let (rgb, t) = render_ray(&g, &color, &x_ray(), &cfg);
        let expect = 1.0 - (-2.0f64).exp();
        // piecewise-constant quadrature error is O(step) at the slab rim
        let bound = 2.0 * cfg.step * 2.0;
        assert!((rgb[0] - 0.8 * expect).abs() < bound, "{} vs {}", rgb[0], 0.8 * expect);
        assert!((rgb[1] - 0.5 * expect).abs() < bound);
        assert!((rgb[2] - 0.25 * expect).abs() < bound);
        assert!((t - (-2.0f64).exp()).abs() < bound);

        // halving the step halves the bound
        let fine = cfg.with_step(cfg.step / 2.0);
        let (rgb2, _) = render_ray(&g, &color, &x_ray(), &fine);
        assert!((rgb2[0] - 0.8 * expect).abs() < bound / 2.0);
    }

    #[test]
    fn opaque_wall_hides_back_wall() {
        // front wall color red, back wall green
        let dims = [64, 1, 1];
        let mut values = vec![0.0; 64];
        for i in 20..24 {
            values[i] = 500.0; // front
        }
        for i in 40..44 {
            values[i] = 500.0; // back
        }
        let g = DensityGrid::new(
            dims,
            Vector3::new(-1.0, -1.0, -1.0),
            Vector3::new(1.0, 1.0, 1.0),
            values,
        )
        .unwrap();
        let color = |p: &Vector3<f64>, _: &Vector3<f64>| {
            if p.x < 0.0 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 1.0, 0.0]
            }
        };
        let cfg = RenderConfig::for_grid(&g);
        let (rgb, t) = render_ray(&g, &color, &x_ray(), &cfg);
        assert!(rgb[0] > 0.999 && rgb[1] < 1e-9, "{rgb:?}");
        assert!(t < 1e-6);
    }

    #[test]
    fn transmittance_identities_along_ray() {
        // telescoping: sum of weights == 1 - T_final
        let g = slab_grid(1.3);
        let cfg = RenderConfig::for_grid(&g).with_early_stop(0.0);
        let ray = x_ray();
        let (t0, n, dt) = march_bounds(&g, &ray, &cfg).unwrap();
        let mut transmittance = 1.0;
        let mut weight_sum = 0.0;
        let mut prev_t = 1.0;
        for i in 0..n {
            let t = t0 + (i as f64 + 0.5) * dt;
            let sigma = g.sample(&ray.point_at(t));
            let alpha = 1.0 - (-sigma * dt).exp();
            weight_sum += transmittance * alpha;
            transmittance *= 1.0 - alpha;
            assert!(transmittance <= prev_t && transmittance > 0.0);
            prev_t = transmittance;
        }
        assert_abs_diff_eq!(weight_sum, 1.0 - transmittance, epsilon = 1e-12);
    }

    #[test]
    fn transmittance_of_empty_scene_is_one() {
        let g = unit_bbox_grid([8, 8, 8]);
        let t = transmittance_between(
            &g,
            &Vector3::new(0.0, 0.0, 0.0),
            &Vector3::new(0.0, 0.0, 5.0),
            g.half_width(),
            g.half_width(),
        );
        assert_eq!(t, 1.0);
    }

    #[test]
    fn transmittance_log_two_slab_is_half() {
        // slab of optical depth ln 2 between v and the camera
        let sigma = std::f64::consts::LN_2 / 1.0;
        let g = slab_grid(sigma);
        let v = Vector3::new(-2.9, 0.0, 0.0);
        let o = Vector3::new(2.9, 0.0, 0.0);
        let t = transmittance_between(&g, &v, &o, g.half_width() / 4.0, 0.01);
        assert!((t - 0.5).abs() < 0.01, "{t}");
    }

    #[test]
    fn occluded_point_has_tiny_transmittance() {
        let g = slab_grid(500.0);
        let v = Vector3::new(-2.0, 0.0, 0.0);
        let o = Vector3::new(2.0, 0.0, 0.0);
        let t = transmittance_between(&g, &v, &o, g.half_width(), 0.01);
        assert!(t < 1e-6, "{t}");
    }

    #[test]
    fn dead_zone_skips_own_voxel() {
        // a dense voxel must not occlude itself: skipping one half-width
        // leaves only the tail of its trilinear footprint
        let mut g = unit_bbox_grid([9, 9, 9]);
        g.set(4, 4, 4, 10.0);
        let v = g.voxel_center(4, 4, 4);
        let o = Vector3::new(0.0, 0.0, 5.0);
        let step = g.half_width() / 8.0;
        let with_dead = transmittance_between(&g, &v, &o, step, g.half_width());
        let without = transmittance_between(&g, &v, &o, step, 0.0);
        // analytic: footprint ramp integral is sigma*w/2 from the center,
        // sigma*w/8 beyond the half-width dead zone (w = voxel edge)
        let w = g.voxel_size().z;
        assert!((with_dead - (-10.0 * w / 8.0f64).exp()).abs() < 0.02, "{with_dead}");
        assert!((without - (-10.0 * w / 2.0f64).exp()).abs() < 0.02, "{without}");
        assert!(with_dead > 2.0 * without);
    }

    #[test]
    fn depth_of_single_surface() {
        // opaque wall at x = 0.0 -> depth ~ 2.0 from origin at -2
        let g = slab_grid(1000.0);
        let ray = Ray::new(
            Vector3::new(-2.5, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            0.0,
            f64::INFINITY,
        )
        .unwrap();
        let cfg = RenderConfig::for_grid(&g);
        let d = render_depth(&g, &ray, &cfg);
        assert!((d - 2.0).abs() < 2.0 * cfg.step, "{d}");
    }

    #[test]
    fn depth_of_empty_ray_is_far_bound() {
        let g = unit_bbox_grid([4, 4, 4]);
        let cfg = RenderConfig::for_grid(&g).with_far(7.5);
        let d = render_depth(&g, &x_ray(), &cfg);
        assert_eq!(d, 7.5);
    }

    #[test]
    fn depth_prefers_first_opaque_surface() {
        let dims = [64, 1, 1];
        let mut values = vec![0.0; 64];
        for i in 16..20 {
            values[i] = 800.0;
        }
        for i in 48..52 {
            values[i] = 800.0;
        }
        let g = DensityGrid::new(
            dims,
            Vector3::new(-1.0, -1.0, -1.0),
            Vector3::new(1.0, 1.0, 1.0),
            values,
        )
        .unwrap();
        let cfg = RenderConfig::for_grid(&g);
        let d = render_depth(&g, &x_ray(), &cfg);
        let first_surface = 3.0 - 1.0 + 0.5; // ray starts at -3, wall near x=-0.5
        assert!((d - first_surface).abs() < 0.1, "{d}");
    }
}
