//! Binary checkpoint I/O for field grids.
//!
//! Little-endian layout: magic `CFRF`, version u32 = 1, flags u32
//! (bit 0 = color grid present), dims 3xu32, bbox 6xf64 (min then max),
//! SH degree u32, density as f32 (x fastest), then SH coefficients as
//! f32 (voxel-major, channel-major, `(l, m)` order).
//!
//! [`decode_checkpoint`] accepts untrusted bytes: every size is checked
//! before any allocation and malformed input yields a structured error.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::grid::{DensityGrid, GridError, ShColorGrid};
use crate::sh::{basis_count, MAX_DEGREE};

pub const MAGIC: [u8; 4] = *b"CFRF";
pub const VERSION: u32 = 1;
const FLAG_COLOR: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported flag bits {0:#x}")]
    UnsupportedFlags(u32),
    #[error("truncated checkpoint: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint size mismatch: expected {expected} bytes of payload, got {got}")]
    PayloadSizeMismatch { expected: u64, got: usize },
    #[error("grid dimensions overflow the addressable size")]
    DimensionOverflow,
    #[error("SH degree {0} out of supported range 0..={MAX_DEGREE}")]
    BadDegree(u32),
    #[error("non-finite value in checkpoint payload at element {0}")]
    NonFiniteValue(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("checkpoint has no color grid")]
    MissingColor,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32_array(&mut self, count: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(count * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Serialize grids to the checkpoint byte format.
pub fn encode_checkpoint(density: &DensityGrid, color: Option<&ShColorGrid>) -> Vec<u8> {
    let dims = density.dims();
    let degree = color.map_or(0, |c| c.degree());
    let mut flags = 0u32;
    if color.is_some() {
        flags |= FLAG_COLOR;
    }
    let coeff_len = color.map_or(0, |c| c.raw().len());
    let mut out = Vec::with_capacity(76 + 4 * (density.values().len() + coeff_len));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in [density.bbox_min(), density.bbox_max()] {
        for a in 0..3 {
            out.extend_from_slice(&v[a].to_le_bytes());
        }
    }
    out.extend_from_slice(&(degree as u32).to_le_bytes());
    for &v in density.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(c) = color {
        for &v in c.raw() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parse a checkpoint from bytes.
pub fn decode_checkpoint(
    bytes: &[u8],
) -> Result<(DensityGrid, Option<ShColorGrid>), CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let flags = r.u32()?;
    if flags & !FLAG_COLOR != 0 {
        return Err(CheckpointError::UnsupportedFlags(flags & !FLAG_COLOR));
    }
    let has_color = flags & FLAG_COLOR != 0;
    let dims_u32 = [r.u32()?, r.u32()?, r.u32()?];
    let bbox_min = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
    let bbox_max = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
    let degree = r.u32()?;
    if degree > MAX_DEGREE as u32 {
        return Err(CheckpointError::BadDegree(degree));
    }
    let degree = degree as usize;

    // Validate the total payload size before allocating anything.
    let voxels = dims_u32
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or(CheckpointError::DimensionOverflow)?;
    let coeff_count = if has_color {
        voxels
            .checked_mul(3 * basis_count(degree) as u64)
            .ok_or(CheckpointError::DimensionOverflow)?
    } else {
        0
    };
    let payload = voxels
        .checked_add(coeff_count)
        .and_then(|n| n.checked_mul(4))
        .ok_or(CheckpointError::DimensionOverflow)?;
    let remaining = (bytes.len() - r.pos) as u64;
    if remaining != payload {
        return Err(CheckpointError::PayloadSizeMismatch {
            expected: payload,
            got: remaining as usize,
        });
    }
    if voxels > usize::MAX as u64 {
        return Err(CheckpointError::DimensionOverflow);
    }
    let dims = [
        dims_u32[0] as usize,
        dims_u32[1] as usize,
        dims_u32[2] as usize,
    ];

    let density_values = r.f32_array(voxels as usize)?;
    let density = DensityGrid::new(dims, bbox_min, bbox_max, density_values)?;
    let color = if has_color {
        let coeffs = r.f32_array(coeff_count as usize)?;
        if let Some(i) = coeffs.iter().position(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFiniteValue(i));
        }
        Some(ShColorGrid::from_raw(
            dims, bbox_min, bbox_max, degree, coeffs,
        )?)
    } else {
        None
    };
    Ok((density, color))
}

pub fn save_checkpoint<P: AsRef<Path>>(
    path: P,
    density: &DensityGrid,
    color: Option<&ShColorGrid>,
) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(density, color))?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(
    path: P,
) -> Result<(DensityGrid, Option<ShColorGrid>), CheckpointError> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn random_grids(seed: u64) -> (DensityGrid, ShColorGrid) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dims = [4, 3, 5];
        let bmin = Vector3::new(-1.0, -2.0, 0.5);
        let bmax = Vector3::new(1.0, 0.0, 2.5);
        // f32-representable values so the f64 -> f32 -> f64 trip is exact
        let values = (0..60)
            .map(|_| rng.random_range(0.0f32..5.0) as f64)
            .collect();
        let density = DensityGrid::new(dims, bmin, bmax, values).unwrap();
        let mut color = ShColorGrid::zeros(dims, bmin, bmax, 2).unwrap();
        for v in color.raw_mut() {
            *v = rng.random_range(-1.0f32..1.0) as f64;
        }
        (density, color)
    }

    #[test]
    fn round_trip_bitwise() {
        let (density, color) = random_grids(42);
        let bytes = encode_checkpoint(&density, Some(&color));
        let (d2, c2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(density, d2);
        assert_eq!(Some(color), c2);
        // file-level: decode(encode(x)) re-encodes to identical bytes
        let bytes2 = encode_checkpoint(&d2, c2.as_ref());
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn density_only_round_trip() {
        let (density, _) = random_grids(7);
        let bytes = encode_checkpoint(&density, None);
        let (d2, c2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(density, d2);
        assert!(c2.is_none());
    }

    #[test]
    fn truncated_file_is_an_error() {
        let (density, color) = random_grids(3);
        let bytes = encode_checkpoint(&density, Some(&color));
        for cut in [0, 3, 10, 75, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(
                    err,
                    CheckpointError::Truncated { .. }
                        | CheckpointError::PayloadSizeMismatch { .. }
                ),
                "cut at {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn rejects_corrupt_headers() {
        let (density, _) = random_grids(9);
        let good = encode_checkpoint(&density, None);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(CheckpointError::BadMagic)
        ));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(CheckpointError::UnsupportedVersion(9))
        ));

        let mut bad = good.clone();
        bad[8] = 0xfe;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(CheckpointError::UnsupportedFlags(_))
        ));

        // huge dims must fail cleanly without allocating
        let mut bad = good;
        bad[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        bad[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        bad[20..24].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_checkpoint(&bad).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.cfrf");
        let (density, color) = random_grids(11);
        save_checkpoint(&path, &density, Some(&color)).unwrap();
        let (d2, c2) = load_checkpoint(&path).unwrap();
        assert_eq!(density, d2);
        assert_eq!(Some(color), c2);
    }
}
