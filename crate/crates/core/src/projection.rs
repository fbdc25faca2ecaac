//! Spherical range-image projection.
//!
//! Column convention: `col = ⌊0.5·(1 − atan2(y, x)/π)·W⌋ mod W`, so the +x
//! axis lands in column `⌊W/2⌋` and azimuth increases to the left. Row 0 is
//! the top of the vertical field of view; elevations outside the field of
//! view clamp to the edge rows so every point keeps a cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Resolution and vertical field of view of a (virtual) spinning LiDAR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub height: usize,
    pub width: usize,
    pub fov_min_deg: f64,
    pub fov_max_deg: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 256,
            fov_min_deg: -22.5,
            fov_max_deg: 22.5,
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "sensor grid must be non-empty, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.fov_min_deg < self.fov_max_deg) {
            return Err(Error::Config(format!(
                "vertical field of view [{}, {}] is empty",
                self.fov_min_deg, self.fov_max_deg
            )));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn column(&self, x: f64, y: f64) -> usize {
        let az = if x == 0.0 && y == 0.0 { 0.0 } else { y.atan2(x) };
        let c = (0.5 * (1.0 - az / std::f64::consts::PI) * self.width as f64).floor() as i64;
        c.rem_euclid(self.width as i64) as usize
    }

    pub fn row(&self, elevation_rad: f64) -> usize {
        let (lo, hi) = (self.fov_min_deg.to_radians(), self.fov_max_deg.to_radians());
        let e = elevation_rad.clamp(lo, hi);
        let r = ((hi - e) / (hi - lo) * self.height as f64).floor() as i64;
        r.clamp(0, self.height as i64 - 1) as usize
    }

    /// Cell index (`row * W + col`) and range of one point.
    pub fn cell_of(&self, p: [f64; 3]) -> (usize, f64) {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let elevation = if r > 0.0 { (p[2] / r).asin() } else { 0.0 };
        let row = self.row(elevation);
        let col = self.column(p[0], p[1]);
        (row * self.width + col, r)
    }
}

/// Point-to-cell assignment of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    pub cell_id: Vec<usize>,
    pub range: Vec<f64>,
    pub occupancy: Vec<u32>,
}

impl RangeImage {
    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }
}

pub fn project_points(xyz: &[[f64; 3]], spec: &SensorSpec) -> Result<RangeImage> {
    spec.validate()?;
    let mut occupancy = vec![0u32; spec.num_cells()];
    let mut cell_id = Vec::with_capacity(xyz.len());
    let mut range = Vec::with_capacity(xyz.len());
    for &p in xyz {
        let (c, r) = spec.cell_of(p);
        occupancy[c] += 1;
        cell_id.push(c);
        range.push(r);
    }
    Ok(RangeImage {
        height: spec.height,
        width: spec.width,
        cell_id,
        range,
        occupancy,
    })
}

pub fn project(scan: &crate::scan::PointScan, spec: &SensorSpec) -> Result<RangeImage> {
    project_points(&scan.xyz, spec)
}

/// Per-point copy of the feature row of the point's cell.
pub fn unproject<T: Scalar>(cell_feats: &Tensor<T>, image: &RangeImage) -> Result<Tensor<T>> {
    let (c, d) = cell_feats.dims2()?;
    if c != image.num_cells() {
        return Err(Error::dim("unproject", &[c, d], &[image.num_cells()]));
    }
    let mut data = Vec::with_capacity(image.cell_id.len() * d);
    for &id in &image.cell_id {
        data.extend_from_slice(cell_feats.row(id));
    }
    Tensor::new(vec![image.cell_id.len(), d], data)
}

/// One range image inside a stacked `(Σ Hᵢ·Wᵢ) × D` cell tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageBlock {
    pub offset: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageBlock {
    pub fn single(height: usize, width: usize) -> Self {
        Self {
            offset: 0,
            height,
            width,
        }
    }
}

fn check_window(cells: usize, blocks: &[ImageBlock], k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::Config(format!("window size must be odd, got {k}")));
    }
    let mut next = 0;
    for b in blocks {
        if b.offset != next {
            return Err(Error::Config("image blocks must tile the cell tensor in order".into()));
        }
        if k > b.height.min(2 * b.width - 1) {
            return Err(Error::Config(format!(
                "window {k} too large for a {}x{} image",
                b.height, b.width
            )));
        }
        next += b.height * b.width;
    }
    if next != cells {
        return Err(Error::dim("window_mean", &[cells], &[next]));
    }
    Ok(())
}

/// Visits every (output cell, source cell) pair of the k×k window.
fn for_each_window_pair(blocks: &[ImageBlock], k: usize, mut f: impl FnMut(usize, usize)) {
    let half = (k / 2) as i64;
    for b in blocks {
        let (h, w) = (b.height as i64, b.width as i64);
        for r in 0..h {
            for c in 0..w {
                let out = b.offset + (r * w + c) as usize;
                for dr in -half..=half {
                    let sr = (r + dr).clamp(0, h - 1);
                    for dc in -half..=half {
                        let sc = (c + dc).rem_euclid(w);
                        f(out, b.offset + (sr * w + sc) as usize);
                    }
                }
            }
        }
    }
}

pub(crate) fn window_mean_kernel<T: Scalar>(
    x: &[T],
    cells: usize,
    d: usize,
    blocks: &[ImageBlock],
    k: usize,
) -> Result<Vec<T>> {
    check_window(cells, blocks, k)?;
    let mut out = vec![T::zero(); cells * d];
    for_each_window_pair(blocks, k, |o, s| {
        let (dst, src) = (o * d, s * d);
        for ch in 0..d {
            out[dst + ch] += x[src + ch];
        }
    });
    let inv = T::one() / T::of((k * k) as f64);
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

pub(crate) fn window_mean_adjoint<T: Scalar>(
    g: &[T],
    cells: usize,
    d: usize,
    blocks: &[ImageBlock],
    k: usize,
) -> Result<Vec<T>> {
    check_window(cells, blocks, k)?;
    let inv = T::one() / T::of((k * k) as f64);
    let mut out = vec![T::zero(); cells * d];
    for_each_window_pair(blocks, k, |o, s| {
        for ch in 0..d {
            out[s * d + ch] += g[o * d + ch] * inv;
        }
    });
    Ok(out)
}

/// k×k neighborhood mean of a single `(H·W) × D` range image.
///
/// Columns wrap around (azimuth is periodic), rows clamp to the edge, and the
/// divisor is always k², so empty (zero) cells pull the mean down and the
/// operation stays linear.
pub fn window_mean<T: Scalar>(cell_feats: &Tensor<T>, height: usize, width: usize, k: usize) -> Result<Tensor<T>> {
    let (c, d) = cell_feats.dims2()?;
    let out = window_mean_kernel(cell_feats.data(), c, d, &[ImageBlock::single(height, width)], k)?;
    Tensor::new(vec![c, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plus_x_axis_lands_in_middle_column() {
        let spec = SensorSpec::default();
        let (cell, r) = spec.cell_of([10.0, 0.0, 0.0]);
        assert_eq!(cell % spec.width, spec.width / 2);
        assert_eq!(cell / spec.width, spec.height / 2);
        assert_eq!(r, 10.0);
        // +y is a quarter turn: column W/4
        assert_eq!(spec.column(0.01, 5.0), spec.width / 4);
        // -x sits on the seam: columns 0 and W-1 are neighbors
        assert_eq!(spec.column(-1.0, 1e-12), 0);
        assert_eq!(spec.column(-1.0, -1e-12), spec.width - 1);
    }

    #[test]
    fn origin_and_out_of_fov_points() {
        let spec = SensorSpec::default();
        let (cell, r) = spec.cell_of([0.0, 0.0, 0.0]);
        assert_eq!(r, 0.0);
        assert_eq!(cell % spec.width, spec.width / 2);
        // straight up and straight down clamp to the edge rows
        assert_eq!(spec.cell_of([0.01, 0.0, 50.0]).0 / spec.width, 0);
        assert_eq!(spec.cell_of([0.01, 0.0, -50.0]).0 / spec.width, spec.height - 1);
    }

    #[test]
    fn occupancy_sums_to_point_count() {
        let pts = vec![[1.0, 2.0, 0.1], [1.0, 2.0, 0.1], [-3.0, 0.5, -1.0]];
        let img = project_points(&pts, &SensorSpec::default()).unwrap();
        assert_eq!(img.cell_id[0], img.cell_id[1]);
        assert_eq!(img.occupancy.iter().sum::<u32>(), 3);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SensorSpec::default();
        s.height = 0;
        assert!(s.validate().is_err());
        let mut s = SensorSpec::default();
        s.fov_min_deg = 5.0;
        s.fov_max_deg = 5.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn window_identity_constant_and_even_k() {
        let x = Tensor::<f64>::from_f64(&[12, 2], &(0..24).map(|v| v as f64).collect::<Vec<_>>()).unwrap();
        assert_eq!(window_mean(&x, 3, 4, 1).unwrap(), x);
        let c = Tensor::<f64>::full(&[12, 2], 2.5);
        let out = window_mean(&c, 3, 4, 3).unwrap();
        assert!(out.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        assert!(matches!(window_mean(&x, 3, 4, 2), Err(Error::Config(_))));
        assert!(window_mean(&x, 3, 4, 5).is_err());
    }
}
