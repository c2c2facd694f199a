//! Posed-image dataset directories.
//!
//! A dataset is a directory holding `cameras.json` (an array of camera
//! records) plus one 8-bit RGB PNG per view. Pixel values map linearly
//! to `[0, 1]`; no gamma handling.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, CameraError, PosedImage};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed cameras.json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("camera record {index} invalid: {source}")]
    Camera { index: usize, source: CameraError },
    #[error("missing image file {file}")]
    MissingImage { file: String },
    #[error("image {file} decode failed: {source}")]
    Image {
        file: String,
        source: image::ImageError,
    },
    #[error("image {file} is {got_w}x{got_h}, camera record says {want_w}x{want_h}")]
    ResolutionMismatch {
        file: String,
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
}

/// One entry of `cameras.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// 3x4 camera-to-world matrix, row major.
    pub cam_to_world: [f64; 12],
    pub file: String,
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera, CameraError> {
        Camera::from_cam_to_world(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            &self.cam_to_world,
        )
    }

    pub fn from_camera(camera: &Camera, file: String) -> Self {
        Self {
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            width: camera.width,
            height: camera.height,
            cam_to_world: camera.cam_to_world(),
            file,
        }
    }
}

/// Parse and validate camera records from `cameras.json` bytes.
pub fn parse_cameras_json(bytes: &[u8]) -> Result<Vec<CameraRecord>, DatasetError> {
    let records: Vec<CameraRecord> = serde_json::from_slice(bytes)?;
    for (index, rec) in records.iter().enumerate() {
        rec.to_camera()
            .map_err(|source| DatasetError::Camera { index, source })?;
    }
    Ok(records)
}

/// A set of posed images of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<PosedImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn cameras(&self) -> impl Iterator<Item = &Camera> {
        self.images.iter().map(|im| &im.camera)
    }

    /// Quantize all images to 8 bits per channel (what saving does).
    pub fn quantize8(&mut self) {
        for im in &mut self.images {
            im.quantize8();
        }
    }
}

fn pixels_to_rgb8(img: &PosedImage) -> image::RgbImage {
    let (w, h) = (img.camera.width, img.camera.height);
    let mut out = image::RgbImage::new(w, h);
    for j in 0..h {
        for i in 0..w {
            let p = img.pixel(i, j);
            out.put_pixel(
                i,
                j,
                image::Rgb([
                    (p[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (p[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (p[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
    }
    out
}

/// Write `cameras.json` and one `NNN.png` per view.
pub fn save_dataset<P: AsRef<Path>>(dir: P, dataset: &Dataset) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut records = Vec::with_capacity(dataset.images.len());
    for (i, img) in dataset.images.iter().enumerate() {
        let file = format!("{i:03}.png");
        let path = dir.join(&file);
        pixels_to_rgb8(img)
            .save(&path)
            .map_err(|source| DatasetError::Image {
                file: file.clone(),
                source,
            })?;
        records.push(CameraRecord::from_camera(&img.camera, file));
    }
    let json = serde_json::to_vec_pretty(&records)?;
    let path = dir.join("cameras.json");
    fs::write(&path, json).map_err(|source| DatasetError::Io { path, source })?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset<P: AsRef<Path>>(dir: P) -> Result<Dataset, DatasetError> {
    let dir = dir.as_ref();
    let json_path = dir.join("cameras.json");
    let bytes = fs::read(&json_path).map_err(|source| DatasetError::Io {
        path: json_path,
        source,
    })?;
    let records = parse_cameras_json(&bytes)?;
    let mut images = Vec::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        let camera = rec
            .to_camera()
            .map_err(|source| DatasetError::Camera { index, source })?;
        let path = dir.join(&rec.file);
        if !path.is_file() {
            return Err(DatasetError::MissingImage {
                file: rec.file.clone(),
            });
        }
        let decoded = image::open(&path)
            .map_err(|source| DatasetError::Image {
                file: rec.file.clone(),
                source,
            })?
            .into_rgb8();
        if decoded.width() != rec.width || decoded.height() != rec.height {
            return Err(DatasetError::ResolutionMismatch {
                file: rec.file.clone(),
                want_w: rec.width,
                want_h: rec.height,
                got_w: decoded.width(),
                got_h: decoded.height(),
            });
        }
        let pixels = decoded
            .pixels()
            .map(|p| {
                [
                    p.0[0] as f64 / 255.0,
                    p.0[1] as f64 / 255.0,
                    p.0[2] as f64 / 255.0,
                ]
            })
            .collect();
        images.push(PosedImage::new(camera, pixels).expect("decoded size checked"));
    }
    Ok(Dataset { images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::look_at_rotation;
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn tiny_dataset() -> Dataset {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut images = Vec::new();
        for k in 0..3 {
            let origin = Vector3::new(k as f64 + 0.5, -2.0, 1.0);
            let rot = look_at_rotation(origin, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0));
            let cam = Camera::new(20.0, 22.0, 8.0, 6.0, 16, 12, rot, origin).unwrap();
            let mut img = PosedImage::black(cam);
            for p in img.pixels_mut() {
                *p = [rng.random(), rng.random(), rng.random()];
            }
            img.quantize8();
            images.push(img);
        }
        Dataset { images }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.images.iter().zip(&back.images) {
            // poses within 1e-9 (stored as JSON doubles: exact here)
            assert!((a.camera.origin() - b.camera.origin()).norm() < 1e-9);
            let da = a.camera.cam_to_world();
            let db = b.camera.cam_to_world();
            for (x, y) in da.iter().zip(db.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
            // pixels exact: quantization was already applied before save
            assert_eq!(a.pixels(), b.pixels());
        }
    }

    #[test]
    fn missing_image_is_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        fs::remove_file(dir.path().join("001.png")).unwrap();
        match load_dataset(dir.path()) {
            Err(DatasetError::MissingImage { file }) => assert_eq!(file, "001.png"),
            other => panic!("expected MissingImage, got {other:?}"),
        }
    }

    #[test]
    fn loader_returns_exactly_k_images() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap().len(), 3);
    }

    #[test]
    fn malformed_json_is_an_error() {
        assert!(matches!(
            parse_cameras_json(b"{not json"),
            Err(DatasetError::Json(_))
        ));
        // valid JSON, invalid camera (fx = 0)
        let bad = serde_json::json!([{
            "fx": 0.0, "fy": 1.0, "cx": 0.0, "cy": 0.0,
            "width": 2, "height": 2,
            "cam_to_world": [1.0,0,0,0, 0,1.0,0,0, 0,0,1.0,0],
            "file": "000.png"
        }]);
        let bytes = serde_json::to_vec(&bad).unwrap();
        assert!(matches!(
            parse_cameras_json(&bytes),
            Err(DatasetError::Camera { index: 0, .. })
        ));
    }

    #[test]
    fn resolution_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        // overwrite with a wrong-size image
        image::RgbImage::new(4, 4).save(dir.path().join("000.png")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DatasetError::ResolutionMismatch { .. })
        ));
    }
}
