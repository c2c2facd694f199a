//! Synthetic ground-truth scenes.
//!
//! A scene spec lists analytic primitives (spheres and boxes with a
//! density amplitude and an SH color), a grid resolution, and a camera
//! layout. The generator rasterizes the ground-truth fields at voxel
//! centers and renders the posed images with the same volume renderer
//! used everywhere else, so generated datasets are exactly reproducible
//! from the ground-truth checkpoint.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{look_at_rotation, Camera, CameraError};
use crate::dataset::Dataset;
use crate::grid::{DensityGrid, GridError, ShColorGrid};
use crate::render::{render_image, RenderConfig};
use crate::sh::{basis_count, ShCoeffs, ShError, MAX_DEGREE};

#[derive(Debug, Error)]
pub enum SceneSpecError {
    #[error("scene spec JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scene must have at least one camera")]
    NoCameras,
    #[error("camera field out of range: {0}")]
    BadCameraField(&'static str),
    #[error("primitive {index}: {reason}")]
    BadPrimitive { index: usize, reason: String },
    #[error("sh degree {0} out of supported range 0..={MAX_DEGREE}")]
    BadDegree(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Sh(#[from] ShError),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum ShapeSpec {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
}

impl ShapeSpec {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.signed_distance(p) <= 0.0
    }

    /// Signed distance to the primitive surface (negative inside).
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            ShapeSpec::Sphere { center, radius } => {
                (p - Vector3::from(*center)).norm() - radius
            }
            ShapeSpec::Box { min, max } => {
                let mut outside = 0.0f64;
                let mut inside = f64::NEG_INFINITY;
                for a in 0..3 {
                    let d_lo = min[a] - p[a];
                    let d_hi = p[a] - max[a];
                    outside += d_lo.max(0.0).powi(2) + d_hi.max(0.0).powi(2);
                    inside = inside.max(d_lo.max(d_hi));
                }
                if outside > 0.0 {
                    outside.sqrt()
                } else {
                    inside
                }
            }
        }
    }
}

/// Color of a primitive: a view-independent base color and/or explicit
/// SH coefficients (flat `(l, m)` order, any complete degree).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ColorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dc: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeffs: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    #[serde(flatten)]
    pub shape: ShapeSpec,
    pub density: f64,
    pub color: ColorSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraLayout {
    Sphere,
    Hemisphere,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraLayoutSpec {
    pub count: u32,
    pub layout: CameraLayout,
    pub radius: f64,
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
    /// Optional per-camera angular jitter (degrees), drawn from the seed.
    #[serde(default)]
    pub jitter_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid_dims: [u32; 3],
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub sh_degree: usize,
    pub primitives: Vec<PrimitiveSpec>,
    pub cameras: CameraLayoutSpec,
    pub seed: u64,
}

impl SceneSpec {
    /// Coefficients of one primitive at the scene degree (zero padded).
    fn primitive_coeffs(&self, index: usize) -> Result<ShCoeffs, SceneSpecError> {
        let prim = &self.primitives[index];
        let mut out = ShCoeffs::zeros(self.sh_degree)?;
        if let Some(dc) = prim.color.dc {
            out = ShCoeffs::constant_color(self.sh_degree, dc)?;
        }
        if let Some(coeffs) = &prim.color.coeffs {
            let n = coeffs.len();
            let valid = (0..=self.sh_degree).any(|l| basis_count(l) == n);
            if !valid {
                return Err(SceneSpecError::BadPrimitive {
                    index,
                    reason: format!(
                        "color.coeffs length {n} is not (l+1)^2 for any l <= {}",
                        self.sh_degree
                    ),
                });
            }
            for (j, rgb) in coeffs.iter().enumerate() {
                out.coeffs_mut()[j] = *rgb;
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), SceneSpecError> {
        if self.sh_degree > MAX_DEGREE {
            return Err(SceneSpecError::BadDegree(self.sh_degree));
        }
        if self.cameras.count == 0 {
            return Err(SceneSpecError::NoCameras);
        }
        if !(self.cameras.radius > 0.0 && self.cameras.radius.is_finite()) {
            return Err(SceneSpecError::BadCameraField("radius must be positive"));
        }
        if !(self.cameras.fov_deg > 0.0 && self.cameras.fov_deg < 180.0) {
            return Err(SceneSpecError::BadCameraField("fov_deg must be in (0, 180)"));
        }
        if self.cameras.width == 0 || self.cameras.height == 0 {
            return Err(SceneSpecError::BadCameraField("resolution must be positive"));
        }
        if !(self.cameras.jitter_deg >= 0.0 && self.cameras.jitter_deg < 90.0) {
            return Err(SceneSpecError::BadCameraField("jitter_deg must be in [0, 90)"));
        }
        for (index, prim) in self.primitives.iter().enumerate() {
            if !(prim.density >= 0.0 && prim.density.is_finite()) {
                return Err(SceneSpecError::BadPrimitive {
                    index,
                    reason: format!("density {} must be finite and nonnegative", prim.density),
                });
            }
            match &prim.shape {
                ShapeSpec::Sphere { radius, .. } if !(*radius > 0.0) => {
                    return Err(SceneSpecError::BadPrimitive {
                        index,
                        reason: "sphere radius must be positive".into(),
                    });
                }
                ShapeSpec::Box { min, max } if (0..3).any(|a| max[a] <= min[a]) => {
                    return Err(SceneSpecError::BadPrimitive {
                        index,
                        reason: "box max must exceed min componentwise".into(),
                    });
                }
                _ => {}
            }
            self.primitive_coeffs(index)?;
        }
        // grid geometry is validated by construction
        let dims = [
            self.grid_dims[0] as usize,
            self.grid_dims[1] as usize,
            self.grid_dims[2] as usize,
        ];
        DensityGrid::zeros(dims, self.bbox_min.into(), self.bbox_max.into())?;
        Ok(())
    }
}

/// Parse and validate a scene spec from JSON bytes.
pub fn parse_scene_spec(bytes: &[u8]) -> Result<SceneSpec, SceneSpecError> {
    let spec: SceneSpec = serde_json::from_slice(bytes)?;
    spec.validate()?;
    Ok(spec)
}

/// A generated scene: ground-truth fields plus rendered posed images.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub density: DensityGrid,
    pub color: ShColorGrid,
    pub dataset: Dataset,
}

/// Camera positions for a layout, centered on `center`.
pub fn layout_cameras(
    spec: &CameraLayoutSpec,
    center: Vector3<f64>,
    seed: u64,
) -> Result<Vec<Camera>, SceneSpecError> {
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let k = spec.count as usize;
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let fov = spec.fov_deg.to_radians();
    let fx = 0.5 * spec.width as f64 / (0.5 * fov).tan();
    let mut cameras = Vec::with_capacity(k);
    for i in 0..k {
        // Fibonacci spiral: near-uniform coverage of the (hemi)sphere
        let frac = (i as f64 + 0.5) / k as f64;
        let z = match spec.layout {
            CameraLayout::Sphere => 1.0 - 2.0 * frac,
            CameraLayout::Hemisphere => 1.0 - frac,
        };
        let phi = golden * i as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let mut dir = Vector3::new(r * phi.cos(), r * phi.sin(), z);
        if spec.jitter_deg > 0.0 {
            let ang = spec.jitter_deg.to_radians();
            let jitter = Vector3::new(
                rng.random_range(-ang..ang),
                rng.random_range(-ang..ang),
                rng.random_range(-ang..ang),
            );
            dir = (dir + jitter.cross(&dir)).normalize();
            if spec.layout == CameraLayout::Hemisphere && dir.z < 0.0 {
                dir.z = -dir.z;
            }
        }
        let origin = center + spec.radius * dir;
        let rot = look_at_rotation(origin, center, Vector3::new(0.0, 0.0, 1.0));
        cameras.push(Camera::new(
            fx,
            fx,
            spec.width as f64 / 2.0,
            spec.height as f64 / 2.0,
            spec.width,
            spec.height,
            rot,
            origin,
        )?);
    }
    Ok(cameras)
}

/// Rasterize the ground-truth fields and render the dataset.
///
/// Primitive densities add; where primitives overlap, the color of the
/// later primitive wins. Grid values are rounded through f32 so the
/// checkpoint round trip is exact. Images are quantized to 8 bits, the
/// same as saving and reloading them.
pub fn synth_scene(spec: &SceneSpec) -> Result<SynthScene, SceneSpecError> {
    use rayon::prelude::*;

    spec.validate()?;
    let dims = [
        spec.grid_dims[0] as usize,
        spec.grid_dims[1] as usize,
        spec.grid_dims[2] as usize,
    ];
    let bbox_min: Vector3<f64> = spec.bbox_min.into();
    let bbox_max: Vector3<f64> = spec.bbox_max.into();
    let mut density = DensityGrid::zeros(dims, bbox_min, bbox_max)?;
    let mut color = ShColorGrid::zeros(dims, bbox_min, bbox_max, spec.sh_degree)?;

    let prim_coeffs: Vec<ShCoeffs> = (0..spec.primitives.len())
        .map(|i| spec.primitive_coeffs(i))
        .collect::<Result<_, _>>()?;

    // Colors are painted into a shell around each primitive so that
    // trilinear color lookups at the surface interpolate the primitive
    // color instead of blending toward the empty-space zeros.
    let dilate = 2.0 * density.voxel_size().max();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = density.voxel_center(i, j, k);
                let mut sigma = 0.0;
                let mut paint = None;
                for (pi, prim) in spec.primitives.iter().enumerate() {
                    let sdf = prim.shape.signed_distance(&p);
                    if sdf <= 0.0 {
                        sigma += prim.density;
                    }
                    if sdf <= dilate {
                        paint = Some(pi);
                    }
                }
                if sigma > 0.0 {
                    density.set(i, j, k, (sigma as f32) as f64);
                }
                if let Some(pi) = paint {
                    color.set_coeffs_at(i, j, k, &prim_coeffs[pi]);
                }
            }
        }
    }
    for v in color.raw_mut() {
        *v = (*v as f32) as f64;
    }

    let center = 0.5 * (bbox_min + bbox_max);
    let cameras = layout_cameras(&spec.cameras, center, spec.seed)?;
    let cfg = RenderConfig::for_grid(&density);
    let images: Vec<_> = cameras
        .par_iter()
        .map(|cam| {
            let mut img = render_image(&density, &color, cam, &cfg);
            img.quantize8();
            img
        })
        .collect();

    Ok(SynthScene {
        density,
        color,
        dataset: Dataset { images },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Projection;

    pub(crate) fn sphere_scene_spec() -> SceneSpec {
        SceneSpec {
            grid_dims: [32, 32, 32],
            bbox_min: [-1.0, -1.0, -1.0],
            bbox_max: [1.0, 1.0, 1.0],
            sh_degree: 2,
            primitives: vec![PrimitiveSpec {
                shape: ShapeSpec::Sphere {
                    center: [0.0, 0.0, 0.0],
                    radius: 0.45,
                },
                density: 300.0,
                color: ColorSpec {
                    dc: Some([0.7, 0.4, 0.2]),
                    coeffs: None,
                },
            }],
            cameras: CameraLayoutSpec {
                count: 12,
                layout: CameraLayout::Sphere,
                radius: 3.0,
                fov_deg: 45.0,
                width: 48,
                height: 48,
                jitter_deg: 0.0,
            },
            seed: 7,
        }
    }

    #[test]
    fn empty_scene_is_black_and_zero() {
        let mut spec = sphere_scene_spec();
        spec.primitives.clear();
        let scene = synth_scene(&spec).unwrap();
        assert!(scene.density.values().iter().all(|&v| v == 0.0));
        for img in &scene.dataset.images {
            assert!(img.pixels().iter().all(|p| *p == [0.0; 3]));
        }
    }

    #[test]
    fn opaque_dc_sphere_renders_its_color_inside_silhouette() {
        let spec = sphere_scene_spec();
        let scene = synth_scene(&spec).unwrap();
        let want = [
            (0.7f64 * 255.0).round() / 255.0,
            (0.4f64 * 255.0).round() / 255.0,
            (0.2f64 * 255.0).round() / 255.0,
        ];
        for img in &scene.dataset.images {
            // pixels within half the projected radius of the center
            let center_px = match img.camera.project(&Vector3::zeros()) {
                Projection::InFront { px, .. } => px,
                Projection::Behind => panic!("camera looks at the origin"),
            };
            let depth = (img.camera.origin()).norm();
            let proj_radius = img.camera.fx * 0.45 / depth;
            let mut checked = 0;
            for j in 0..img.camera.height {
                for i in 0..img.camera.width {
                    let dx = i as f64 + 0.5 - center_px[0];
                    let dy = j as f64 + 0.5 - center_px[1];
                    if (dx * dx + dy * dy).sqrt() < 0.5 * proj_radius {
                        let p = img.pixel(i, j);
                        for ch in 0..3 {
                            assert!(
                                (p[ch] - want[ch]).abs() <= 1.5 / 255.0,
                                "pixel ({i},{j}) = {p:?}, want {want:?}"
                            );
                        }
                        checked += 1;
                    }
                }
            }
            assert!(checked > 10, "silhouette should cover pixels");
        }
    }

    #[test]
    fn hemisphere_layout_constraint() {
        let mut spec = sphere_scene_spec();
        spec.cameras.count = 100;
        spec.cameras.layout = CameraLayout::Hemisphere;
        let cams = layout_cameras(&spec.cameras, Vector3::zeros(), spec.seed).unwrap();
        assert_eq!(cams.len(), 100);
        for cam in &cams {
            assert!(cam.origin().z >= 0.0);
            assert!((cam.origin().norm() - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let spec = sphere_scene_spec();
        let a = synth_scene(&spec).unwrap();
        let b = synth_scene(&spec).unwrap();
        assert_eq!(a.density, b.density);
        assert_eq!(a.color, b.color);
        for (x, y) in a.dataset.images.iter().zip(&b.dataset.images) {
            assert_eq!(x.pixels(), y.pixels());
        }
    }

    #[test]
    fn zero_cameras_rejected() {
        let mut spec = sphere_scene_spec();
        spec.cameras.count = 0;
        assert!(matches!(
            synth_scene(&spec),
            Err(SceneSpecError::NoCameras)
        ));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = sphere_scene_spec();
        let bytes = serde_json::to_vec(&spec).unwrap();
        let back = parse_scene_spec(&bytes).unwrap();
        assert_eq!(back.grid_dims, spec.grid_dims);
        assert_eq!(back.primitives.len(), 1);
    }

    #[test]
    fn bad_coeff_length_rejected() {
        let mut spec = sphere_scene_spec();
        spec.primitives[0].color.coeffs = Some(vec![[0.1, 0.1, 0.1]; 5]);
        assert!(matches!(
            spec.validate(),
            Err(SceneSpecError::BadPrimitive { index: 0, .. })
        ));
    }
}
