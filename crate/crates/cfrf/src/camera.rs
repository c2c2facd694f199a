//! Pinhole cameras, rays, and posed images.
//!
//! Camera space is OpenCV-style: x right, y down, z forward (into the
//! scene). Continuous pixel coordinates cover `[0, width] x [0, height]`
//! with the center of integer pixel `(i, j)` at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("focal lengths must be positive (fx = {fx}, fy = {fy})")]
    BadFocal { fx: f64, fy: f64 },
    #[error("rotation block is not orthonormal with det +1 (deviation {deviation})")]
    BadRotation { deviation: f64 },
    #[error("image dimensions must be positive")]
    ZeroResolution,
    #[error("pixel ({x}, {y}) outside image bounds {width}x{height}")]
    PixelOutOfBounds {
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("ray bounds invalid: t_near {t_near}, t_far {t_far}")]
    BadRayBounds { t_near: f64, t_far: f64 },
    #[error("direction must be a unit vector (|d| = {0})")]
    NonUnitDirection(f64),
    #[error("pixel buffer has {got} pixels, camera resolution needs {expected}")]
    PixelCountMismatch { expected: usize, got: usize },
}

/// A ray `o + t d` with march bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(
        origin: Vector3<f64>,
        dir: Vector3<f64>,
        t_near: f64,
        t_far: f64,
    ) -> Result<Self, CameraError> {
        let n = dir.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(CameraError::NonUnitDirection(n));
        }
        if !(t_near >= 0.0 && t_near < t_far) {
            return Err(CameraError::BadRayBounds { t_near, t_far });
        }
        Ok(Self {
            origin,
            dir,
            t_near,
            t_far,
        })
    }

    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.dir
    }
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// Pixel coordinates (possibly outside the image) and z-depth.
    InFront { px: [f64; 2], depth: f64 },
    /// The point lies behind the image plane.
    Behind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(CameraError::BadFocal { fx, fy });
        }
        if width == 0 || height == 0 {
            return Err(CameraError::ZeroResolution);
        }
        let gram = rotation.transpose() * rotation;
        let mut deviation = (gram - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        deviation = deviation.max((det - 1.0).abs());
        if !deviation.is_finite() || deviation > 1e-6 {
            return Err(CameraError::BadRotation { deviation });
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        })
    }

    /// Camera center in world coordinates.
    pub fn origin(&self) -> Vector3<f64> {
        self.translation
    }

    /// World-space optical axis (+z of camera space).
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation * Vector3::new(0.0, 0.0, 1.0)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// The camera-to-world matrix as 12 row-major values (3x4, [R|t]).
    pub fn cam_to_world(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_cam_to_world(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        m: &[f64; 12],
    ) -> Result<Self, CameraError> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        Self::new(fx, fy, cx, cy, width, height, rotation, translation)
    }

    pub fn in_bounds(&self, px: [f64; 2]) -> bool {
        px[0] >= 0.0 && px[0] <= self.width as f64 && px[1] >= 0.0 && px[1] <= self.height as f64
    }

    /// Ray through the continuous pixel coordinate, with open bounds.
    pub fn generate_ray(&self, px: [f64; 2]) -> Result<Ray, CameraError> {
        if !self.in_bounds(px) {
            return Err(CameraError::PixelOutOfBounds {
                x: px[0],
                y: px[1],
                width: self.width,
                height: self.height,
            });
        }
        let dir_cam = Vector3::new((px[0] - self.cx) / self.fx, (px[1] - self.cy) / self.fy, 1.0);
        let dir = (self.rotation * dir_cam).normalize();
        Ok(Ray {
            origin: self.translation,
            dir,
            t_near: 0.0,
            t_far: f64::INFINITY,
        })
    }

    /// Ray through the center of integer pixel `(i, j)`.
    pub fn pixel_ray(&self, i: u32, j: u32) -> Result<Ray, CameraError> {
        self.generate_ray([i as f64 + 0.5, j as f64 + 0.5])
    }

    /// Perspective projection of a world point.
    pub fn project(&self, v: &Vector3<f64>) -> Projection {
        let vc = self.rotation.transpose() * (v - self.translation);
        if vc.z <= 1e-12 {
            return Projection::Behind;
        }
        Projection::InFront {
            px: [
                self.fx * vc.x / vc.z + self.cx,
                self.fy * vc.y / vc.z + self.cy,
            ],
            depth: vc.z,
        }
    }

    /// Back-project a pixel at a given z-depth; inverse of [`Self::project`].
    pub fn unproject(&self, px: [f64; 2], depth: f64) -> Vector3<f64> {
        let dir_cam = Vector3::new((px[0] - self.cx) / self.fx, (px[1] - self.cy) / self.fy, 1.0);
        self.translation + self.rotation * (dir_cam * depth)
    }
}

/// An RGB image with the camera that captured it. Pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedImage {
    pub camera: Camera,
    pixels: Vec<[f64; 3]>,
}

impl PosedImage {
    pub fn new(camera: Camera, pixels: Vec<[f64; 3]>) -> Result<Self, CameraError> {
        let expected = camera.width as usize * camera.height as usize;
        if pixels.len() != expected {
            return Err(CameraError::PixelCountMismatch {
                expected,
                got: pixels.len(),
            });
        }
        Ok(Self { camera, pixels })
    }

    pub fn black(camera: Camera) -> Self {
        let n = camera.width as usize * camera.height as usize;
        Self {
            camera,
            pixels: vec![[0.0; 3]; n],
        }
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.pixels
    }

    pub fn pixel(&self, i: u32, j: u32) -> [f64; 3] {
        self.pixels[j as usize * self.camera.width as usize + i as usize]
    }

    pub fn set_pixel(&mut self, i: u32, j: u32, rgb: [f64; 3]) {
        self.pixels[j as usize * self.camera.width as usize + i as usize] = rgb;
    }

    /// Bilinear sample at continuous pixel coordinates; `None` when the
    /// query lies outside the image.
    pub fn sample(&self, px: [f64; 2]) -> Option<[f64; 3]> {
        if !self.camera.in_bounds(px) {
            return None;
        }
        let (w, h) = (self.camera.width as usize, self.camera.height as usize);
        let sample_axis = |coord: f64, n: usize| {
            let g = (coord - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = (g.floor() as usize).min(n.saturating_sub(2));
            let lo = if n == 1 { 0 } else { lo };
            let hi = (lo + 1).min(n - 1);
            (lo, hi, g - lo as f64)
        };
        let (x0, x1, fx) = sample_axis(px[0], w);
        let (y0, y1, fy) = sample_axis(px[1], h);
        let at = |x: usize, y: usize| self.pixels[y * w + x];
        let mut rgb = [0.0; 3];
        for ch in 0..3 {
            let top = (1.0 - fx) * at(x0, y0)[ch] + fx * at(x1, y0)[ch];
            let bot = (1.0 - fx) * at(x0, y1)[ch] + fx * at(x1, y1)[ch];
            rgb[ch] = (1.0 - fy) * top + fy * bot;
        }
        Some(rgb)
    }

    /// Quantize pixels to 8 bits per channel, as image files store them.
    pub fn quantize8(&mut self) {
        for p in &mut self.pixels {
            for c in p.iter_mut() {
                *c = (c.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
}

/// Deterministic look-at pose: forward along `target - origin`, image up
/// roughly aligned with `up`.
pub fn look_at_rotation(origin: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Matrix3<f64> {
    let forward = (target - origin).normalize();
    let mut right = forward.cross(&up);
    if right.norm() < 1e-9 {
        // looking straight along up: pick any stable horizontal axis
        right = forward.cross(&Vector3::new(1.0, 0.0, 0.0));
        if right.norm() < 1e-9 {
            right = forward.cross(&Vector3::new(0.0, 1.0, 0.0));
        }
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    Matrix3::from_columns(&[right, down, forward])
}
