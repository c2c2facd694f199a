//! Voxel grids for the density and SH color fields.
//!
//! Both grids share the same axis-aligned bounding box and resolution.
//! Values live at voxel centers; queries interpolate trilinearly between
//! the eight surrounding centers (clamped at the boundary) and are zero
//! outside the bounding box.

use nalgebra::Vector3;
use thiserror::Error;

use crate::sh::{self, basis_count, ShCoeffs};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid dimensions must be positive, got {0:?}")]
    ZeroDims([usize; 3]),
    #[error("bbox_max must exceed bbox_min componentwise: min {min:?}, max {max:?}")]
    BadBbox { min: [f64; 3], max: [f64; 3] },
    #[error("expected {expected} values for dims {dims:?}, got {got}")]
    ValueCountMismatch {
        dims: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("density values must be finite and nonnegative (value {value} at index {index})")]
    NegativeDensity { index: usize, value: f64 },
    #[error("SH degree error: {0}")]
    Sh(#[from] sh::ShError),
}

fn check_geometry(
    dims: [usize; 3],
    bbox_min: Vector3<f64>,
    bbox_max: Vector3<f64>,
) -> Result<(), GridError> {
    if dims.iter().any(|&n| n == 0) {
        return Err(GridError::ZeroDims(dims));
    }
    let ok = (0..3).all(|a| {
        bbox_min[a].is_finite() && bbox_max[a].is_finite() && bbox_max[a] > bbox_min[a]
    });
    if !ok {
        return Err(GridError::BadBbox {
            min: bbox_min.into(),
            max: bbox_max.into(),
        });
    }
    Ok(())
}

/// Trilinear interpolation stencil: eight (flat index, weight) pairs.
pub type Stencil = [(usize, f64); 8];

macro_rules! grid_geometry {
    () => {
        pub fn dims(&self) -> [usize; 3] {
            self.dims
        }

        pub fn bbox_min(&self) -> Vector3<f64> {
            self.bbox_min
        }

        pub fn bbox_max(&self) -> Vector3<f64> {
            self.bbox_max
        }

        pub fn voxel_count(&self) -> usize {
            self.dims[0] * self.dims[1] * self.dims[2]
        }

        /// World-space edge lengths of one voxel.
        pub fn voxel_size(&self) -> Vector3<f64> {
            Vector3::new(
                (self.bbox_max.x - self.bbox_min.x) / self.dims[0] as f64,
                (self.bbox_max.y - self.bbox_min.y) / self.dims[1] as f64,
                (self.bbox_max.z - self.bbox_min.z) / self.dims[2] as f64,
            )
        }

        /// Half of the smallest voxel edge; the default marching step.
        pub fn half_width(&self) -> f64 {
            let s = self.voxel_size();
            0.5 * s.x.min(s.y).min(s.z)
        }

        /// Flat index with x fastest.
        pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
            debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
            i + self.dims[0] * (j + self.dims[1] * k)
        }

        /// Inverse of [`Self::index`].
        pub fn coords(&self, flat: usize) -> (usize, usize, usize) {
            let i = flat % self.dims[0];
            let j = (flat / self.dims[0]) % self.dims[1];
            let k = flat / (self.dims[0] * self.dims[1]);
            (i, j, k)
        }

        pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
            let s = self.voxel_size();
            Vector3::new(
                self.bbox_min.x + (i as f64 + 0.5) * s.x,
                self.bbox_min.y + (j as f64 + 0.5) * s.y,
                self.bbox_min.z + (k as f64 + 0.5) * s.z,
            )
        }

        pub fn contains(&self, p: &Vector3<f64>) -> bool {
            (0..3).all(|a| p[a] >= self.bbox_min[a] && p[a] <= self.bbox_max[a])
        }

        /// Interpolation stencil at `p`, or `None` outside the bbox.
        ///
        /// Grid coordinates are clamped to the voxel-center lattice, so
        /// the half-voxel shell inside the boundary extends the edge
        /// values instead of blending toward zero.
        pub fn stencil(&self, p: &Vector3<f64>) -> Option<Stencil> {
            if !self.contains(p) {
                return None;
            }
            let s = self.voxel_size();
            let mut i0 = [0usize; 3];
            let mut i1 = [0usize; 3];
            let mut f = [0f64; 3];
            for a in 0..3 {
                let g = (p[a] - self.bbox_min[a]) / s[a] - 0.5;
                let max = (self.dims[a] - 1) as f64;
                let g = g.clamp(0.0, max);
                let lo = g.floor().min(max - 1.0).max(0.0);
                i0[a] = lo as usize;
                i1[a] = (i0[a] + 1).min(self.dims[a] - 1);
                f[a] = (g - lo).clamp(0.0, 1.0);
            }
            let w = |a: usize, hi: bool| if hi { f[a] } else { 1.0 - f[a] };
            let mut out = [(0usize, 0f64); 8];
            let mut n = 0;
            for dz in [false, true] {
                for dy in [false, true] {
                    for dx in [false, true] {
                        let idx = self.index(
                            if dx { i1[0] } else { i0[0] },
                            if dy { i1[1] } else { i0[1] },
                            if dz { i1[2] } else { i0[2] },
                        );
                        out[n] = (idx, w(0, dx) * w(1, dy) * w(2, dz));
                        n += 1;
                    }
                }
            }
            Some(out)
        }
    };
}

/// Nonnegative scalar density field on a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    dims: [usize; 3],
    bbox_min: Vector3<f64>,
    bbox_max: Vector3<f64>,
    values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(
        dims: [usize; 3],
        bbox_min: Vector3<f64>,
        bbox_max: Vector3<f64>,
        values: Vec<f64>,
    ) -> Result<Self, GridError> {
        check_geometry(dims, bbox_min, bbox_max)?;
        let expected = dims[0] * dims[1] * dims[2];
        if values.len() != expected {
            return Err(GridError::ValueCountMismatch {
                dims,
                expected,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(GridError::NegativeDensity {
                index,
                value: values[index],
            });
        }
        Ok(Self {
            dims,
            bbox_min,
            bbox_max,
            values,
        })
    }

    pub fn zeros(
        dims: [usize; 3],
        bbox_min: Vector3<f64>,
        bbox_max: Vector3<f64>,
    ) -> Result<Self, GridError> {
        check_geometry(dims, bbox_min, bbox_max)?;
        Ok(Self {
            dims,
            bbox_min,
            bbox_max,
            values: vec![0.0; dims[0] * dims[1] * dims[2]],
        })
    }

    grid_geometry!();

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// Write one voxel. Densities must stay nonnegative; the optimizer
    /// projects before writing, so a violation here is a bug.
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        assert!(
            value.is_finite() && value >= 0.0,
            "density write must be finite and nonnegative, got {value}"
        );
        let idx = self.index(i, j, k);
        self.values[idx] = value;
    }

    pub fn set_flat(&mut self, flat: usize, value: f64) {
        assert!(
            value.is_finite() && value >= 0.0,
            "density write must be finite and nonnegative, got {value}"
        );
        self.values[flat] = value;
    }

    /// Trilinear density at `p`; zero outside the bbox.
    pub fn sample(&self, p: &Vector3<f64>) -> f64 {
        match self.stencil(p) {
            Some(st) => st.iter().map(|&(idx, w)| w * self.values[idx]).sum(),
            None => 0.0,
        }
    }
}

/// Per-voxel SH coefficients for three color channels.
///
/// Flat layout per voxel: channel-major, then `(l, m)` index, matching
/// the checkpoint file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ShColorGrid {
    dims: [usize; 3],
    bbox_min: Vector3<f64>,
    bbox_max: Vector3<f64>,
    degree: usize,
    coeffs: Vec<f64>,
}

impl ShColorGrid {
    pub fn zeros(
        dims: [usize; 3],
        bbox_min: Vector3<f64>,
        bbox_max: Vector3<f64>,
        degree: usize,
    ) -> Result<Self, GridError> {
        check_geometry(dims, bbox_min, bbox_max)?;
        if degree > sh::MAX_DEGREE {
            return Err(GridError::Sh(sh::ShError::DegreeOutOfRange { degree }));
        }
        let n = dims[0] * dims[1] * dims[2] * 3 * basis_count(degree);
        Ok(Self {
            dims,
            bbox_min,
            bbox_max,
            degree,
            coeffs: vec![0.0; n],
        })
    }

    pub fn from_raw(
        dims: [usize; 3],
        bbox_min: Vector3<f64>,
        bbox_max: Vector3<f64>,
        degree: usize,
        coeffs: Vec<f64>,
    ) -> Result<Self, GridError> {
        check_geometry(dims, bbox_min, bbox_max)?;
        if degree > sh::MAX_DEGREE {
            return Err(GridError::Sh(sh::ShError::DegreeOutOfRange { degree }));
        }
        let expected = dims[0] * dims[1] * dims[2] * 3 * basis_count(degree);
        if coeffs.len() != expected {
            return Err(GridError::ValueCountMismatch {
                dims,
                expected,
                got: coeffs.len(),
            });
        }
        Ok(Self {
            dims,
            bbox_min,
            bbox_max,
            degree,
            coeffs,
        })
    }

    grid_geometry!();

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Coefficients per voxel (`3 * (degree+1)²`).
    pub fn voxel_stride(&self) -> usize {
        3 * basis_count(self.degree)
    }

    pub fn raw(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// Flat offset of (voxel, channel, basis j) in the raw buffer.
    pub fn coeff_offset(&self, voxel: usize, channel: usize, j: usize) -> usize {
        voxel * self.voxel_stride() + channel * basis_count(self.degree) + j
    }

    pub fn coeffs_at(&self, i: usize, j: usize, k: usize) -> ShCoeffs {
        let nb = basis_count(self.degree);
        let base = self.index(i, j, k) * self.voxel_stride();
        let mut data = vec![[0.0; 3]; nb];
        for ch in 0..3 {
            for b in 0..nb {
                data[b][ch] = self.coeffs[base + ch * nb + b];
            }
        }
        ShCoeffs::new(self.degree, data).expect("layout is consistent by construction")
    }

    pub fn set_coeffs_at(&mut self, i: usize, j: usize, k: usize, c: &ShCoeffs) {
        assert_eq!(c.degree(), self.degree, "coefficient degree mismatch");
        let nb = basis_count(self.degree);
        let base = self.index(i, j, k) * self.voxel_stride();
        for ch in 0..3 {
            for b in 0..nb {
                self.coeffs[base + ch * nb + b] = c.coeffs()[b][ch];
            }
        }
    }

    /// Trilinear coefficients at `p` written into `out` (channel-major,
    /// length `voxel_stride()`); zeros outside the bbox.
    pub fn sample_into(&self, p: &Vector3<f64>, out: &mut [f64]) {
        let stride = self.voxel_stride();
        assert_eq!(out.len(), stride);
        out.fill(0.0);
        if let Some(st) = self.stencil(p) {
            for &(vox, w) in &st {
                if w == 0.0 {
                    continue;
                }
                let base = vox * stride;
                for (o, c) in out.iter_mut().zip(&self.coeffs[base..base + stride]) {
                    *o += w * c;
                }
            }
        }
    }

    pub fn sample_coeffs(&self, p: &Vector3<f64>) -> ShCoeffs {
        let nb = basis_count(self.degree);
        let mut flat = vec![0.0; self.voxel_stride()];
        self.sample_into(p, &mut flat);
        let mut data = vec![[0.0; 3]; nb];
        for ch in 0..3 {
            for b in 0..nb {
                data[b][ch] = flat[ch * nb + b];
            }
        }
        ShCoeffs::new(self.degree, data).expect("layout is consistent by construction")
    }

    /// Trilinear SH color at `p` viewed along unit `d`.
    pub fn sample_color(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> [f64; 3] {
        let nb = basis_count(self.degree);
        let mut flat = [0.0; 3 * sh::MAX_BASIS];
        let stride = self.voxel_stride();
        let flat = &mut flat[..stride];
        flat.fill(0.0);
        if let Some(st) = self.stencil(p) {
            for &(vox, w) in &st {
                if w == 0.0 {
                    continue;
                }
                let base = vox * stride;
                for (o, c) in flat.iter_mut().zip(&self.coeffs[base..base + stride]) {
                    *o += w * c;
                }
            }
        }
        let mut basis = [0.0; sh::MAX_BASIS];
        let n = sh::fill_basis(self.degree, d, &mut basis);
        debug_assert_eq!(n, nb);
        let mut rgb = [0.0; 3];
        for ch in 0..3 {
            let coeffs = &flat[ch * nb..(ch + 1) * nb];
            rgb[ch] = coeffs
                .iter()
                .zip(&basis[..nb])
                .map(|(c, b)| c * b)
                .sum();
        }
        rgb
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_grid() -> DensityGrid {
        // 4x4x4 on [0,4]^3, value = flat index
        let dims = [4, 4, 4];
        let values = (0..64).map(|v| v as f64).collect();
        DensityGrid::new(
            dims,
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(4.0, 4.0, 4.0),
            values,
        )
        .unwrap()
    }

    #[test]
    fn voxel_center_identity() {
        let g = small_grid();
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let c = g.voxel_center(i, j, k);
                    assert_abs_diff_eq!(g.sample(&c), g.get(i, j, k), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn outside_bbox_is_zero() {
        let g = small_grid();
        assert_eq!(g.sample(&Vector3::new(-0.01, 2.0, 2.0)), 0.0);
        assert_eq!(g.sample(&Vector3::new(2.0, 2.0, 4.01)), 0.0);
        assert_eq!(g.sample(&Vector3::new(100.0, 100.0, 100.0)), 0.0);
    }

    #[test]
    fn midpoint_is_mean_of_neighbors() {
        let mut g = DensityGrid::zeros(
            [4, 4, 4],
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(4.0, 4.0, 4.0),
        )
        .unwrap();
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    g.set(i, j, k, 3.0);
                }
            }
        }
        g.set(1, 2, 2, 2.0);
        g.set(2, 2, 2, 4.0);
        let mid = 0.5 * (g.voxel_center(1, 2, 2) + g.voxel_center(2, 2, 2));
        assert_abs_diff_eq!(g.sample(&mid), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn finite_difference_slope_matches_value_gap() {
        let g = small_grid();
        let a = g.voxel_center(1, 1, 1);
        let b = g.voxel_center(2, 1, 1);
        let spacing = (b - a).norm();
        let h = 1e-5;
        let mid = 0.5 * (a + b);
        let slope = (g.sample(&(mid + Vector3::new(h, 0.0, 0.0)))
            - g.sample(&(mid - Vector3::new(h, 0.0, 0.0))))
            / (2.0 * h);
        let expected = (g.get(2, 1, 1) - g.get(1, 1, 1)) / spacing;
        assert_abs_diff_eq!(slope, expected, epsilon = 1e-6);
    }

    #[test]
    fn rejects_negative_values() {
        let r = DensityGrid::new(
            [2, 2, 2],
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 1.0),
            vec![0.0, 1.0, 2.0, -0.5, 0.0, 0.0, 0.0, 0.0],
        );
        assert!(matches!(r, Err(GridError::NegativeDensity { index: 3, .. })));
    }

    #[test]
    fn sh_grid_voxel_roundtrip_and_exterior() {
        let mut g = ShColorGrid::zeros(
            [3, 3, 3],
            Vector3::new(-1.0, -1.0, -1.0),
            Vector3::new(1.0, 1.0, 1.0),
            2,
        )
        .unwrap();
        let mut c = ShCoeffs::zeros(2).unwrap();
        c.set(0, 0, [1.0, 2.0, 3.0]);
        c.set(2, -1, [0.5, -0.5, 0.25]);
        g.set_coeffs_at(1, 2, 0, &c);
        assert_eq!(g.coeffs_at(1, 2, 0), c);
        let got = g.sample_coeffs(&g.voxel_center(1, 2, 0));
        for b in 0..9 {
            for ch in 0..3 {
                assert_abs_diff_eq!(
                    got.coeffs()[b][ch],
                    c.coeffs()[b][ch],
                    epsilon = 1e-12
                );
            }
        }
        let outside = g.sample_coeffs(&Vector3::new(2.0, 0.0, 0.0));
        assert!(outside.coeffs().iter().all(|rgb| *rgb == [0.0; 3]));
    }

    #[test]
    fn sh_grid_midpoint_blend() {
        let mut g = ShColorGrid::zeros(
            [2, 1, 1],
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(2.0, 1.0, 1.0),
            1,
        )
        .unwrap();
        let mut a = ShCoeffs::zeros(1).unwrap();
        a.set(0, 0, [2.0, 0.0, 4.0]);
        let mut b = ShCoeffs::zeros(1).unwrap();
        b.set(0, 0, [4.0, 2.0, 0.0]);
        g.set_coeffs_at(0, 0, 0, &a);
        g.set_coeffs_at(1, 0, 0, &b);
        let mid = g.sample_coeffs(&Vector3::new(1.0, 0.5, 0.5));
        assert_abs_diff_eq!(mid.get(0, 0)[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mid.get(0, 0)[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mid.get(0, 0)[2], 2.0, epsilon = 1e-12);
    }
}
