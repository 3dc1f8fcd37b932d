//! BEV pillar rasterizer.
//!
//! Each grid cell summarizes the points that fall in its pillar with four
//! closed-form statistics:
//!
//! | channel | value                                   |
//! |---------|-----------------------------------------|
//! | 0       | `ln(1 + count)`                         |
//! | 1       | `max z − z_min` (0 when empty)          |
//! | 2       | mean intensity (0 when empty)           |
//! | 3       | occupancy indicator, 0 or 1             |
//!
//! Rows run along y and columns along x, so cell `(h, w)` has its center at
//! `(x_min + (w + ½)·cell, y_min + (h + ½)·cell)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::PointCloud;

pub const RASTER_CHANNELS: usize = 4;
pub const CH_COUNT: usize = 0;
pub const CH_HEIGHT: usize = 1;
pub const CH_INTENSITY: usize = 2;
pub const CH_OCCUPANCY: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub cell: f64,
    pub channels: usize,
}

impl Default for GridConfig {
    /// Full-scale ranges: x (0, 92.16), y (−46.08, 46.08), z (−3, 1), 0.16 m cells.
    fn default() -> Self {
        Self {
            x_range: (0.0, 92.16),
            y_range: (-46.08, 46.08),
            z_range: (-3.0, 1.0),
            cell: 0.16,
            channels: RASTER_CHANNELS,
        }
    }
}

fn cells_along(range: (f64, f64), cell: f64) -> Option<usize> {
    let n = (range.1 - range.0) / cell;
    let r = n.round();
    if r >= 1.0 && (n - r).abs() <= 1e-6 * r.max(1.0) {
        Some(r as usize)
    } else {
        None
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0) || !self.cell.is_finite() {
            return Err(Error::invalid(format!("cell size {} must be > 0", self.cell)));
        }
        if !(self.z_range.1 > self.z_range.0) {
            return Err(Error::invalid("z range is empty"));
        }
        if cells_along(self.x_range, self.cell).is_none() {
            return Err(Error::invalid(format!(
                "x range {:?} is not a whole number of {} m cells",
                self.x_range, self.cell
            )));
        }
        if cells_along(self.y_range, self.cell).is_none() {
            return Err(Error::invalid(format!(
                "y range {:?} is not a whole number of {} m cells",
                self.y_range, self.cell
            )));
        }
        if self.channels == 0 {
            return Err(Error::invalid("grid needs at least one channel"));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        cells_along(self.x_range, self.cell).unwrap_or(0)
    }

    pub fn height(&self) -> usize {
        cells_along(self.y_range, self.cell).unwrap_or(0)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height(), self.width())
    }

    /// Center of cell `(h, w)` in the grid's metric frame.
    pub fn cell_center(&self, h: usize, w: usize) -> (f64, f64) {
        (
            self.x_range.0 + (w as f64 + 0.5) * self.cell,
            self.y_range.0 + (h as f64 + 0.5) * self.cell,
        )
    }

    /// Cell containing `(x, y)`, if any.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_range.0 && x < self.x_range.1 && y >= self.y_range.0 && y < self.y_range.1) {
            return None;
        }
        let w = ((x - self.x_range.0) / self.cell).floor() as usize;
        let h = ((y - self.y_range.0) / self.cell).floor() as usize;
        (w < self.width() && h < self.height()).then_some((h, w))
    }

    /// Same extent with `factor`-times coarser cells and `channels` channels.
    pub fn coarsened(&self, factor: usize, channels: usize) -> GridConfig {
        GridConfig {
            cell: self.cell * factor as f64,
            channels,
            ..*self
        }
    }
}

/// Dense `(C, H, W)` tensor of `f32`, row-major with channel outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    dims: (usize, usize, usize),
    data: Vec<f32>,
    pub grid: GridConfig,
    /// Id of the sensor whose frame this grid lives in.
    pub frame: u32,
}

impl FeatureGrid {
    pub fn zeros(grid: GridConfig) -> Self {
        let dims = grid.dims();
        Self {
            dims,
            data: vec![0.0; dims.0 * dims.1 * dims.2],
            grid,
            frame: 0,
        }
    }

    pub fn from_data(grid: GridConfig, data: Vec<f32>) -> Result<Self> {
        let dims = grid.dims();
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::invalid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature values must be finite"));
        }
        Ok(Self {
            dims,
            data,
            grid,
            frame: 0,
        })
    }

    pub fn with_frame(mut self, frame: u32) -> Self {
        self.frame = frame;
        self
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.dims.0
    }

    pub fn height(&self) -> usize {
        self.dims.1
    }

    pub fn width(&self) -> usize {
        self.dims.2
    }

    pub fn plane_len(&self) -> usize {
        self.dims.1 * self.dims.2
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.dims.1 + h) * self.dims.2 + w
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, v: f32) {
        let i = self.index(c, h, w);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_same_dims(&self, other: &FeatureGrid) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch {
                expected: self.dims,
                actual: other.dims,
            });
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Elementwise map into a new grid with the same layout.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> FeatureGrid {
        FeatureGrid {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Elementwise combination; dims must agree.
    pub fn zip_map(&self, other: &FeatureGrid, f: impl Fn(f32, f32) -> f32) -> Result<FeatureGrid> {
        self.ensure_same_dims(other)?;
        Ok(FeatureGrid {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..self.clone()
        })
    }
}

/// Rasterizes `cloud` onto `grid`. Points outside any of the x/y/z ranges
/// are dropped. The result does not depend on point order.
pub fn rasterize(cloud: &PointCloud, grid: &GridConfig) -> Result<FeatureGrid> {
    grid.validate()?;
    if grid.channels != RASTER_CHANNELS {
        return Err(Error::invalid(format!(
            "rasterizer produces {RASTER_CHANNELS} channels, grid asks for {}",
            grid.channels
        )));
    }
    let (_, height, width) = grid.dims();
    let plane = height * width;

    // (cell, intensity, z), sorted so per-cell reductions are order-free
    let mut binned: Vec<(usize, f32, f32)> = cloud
        .points
        .iter()
        .filter(|p| {
            let z = p.z as f64;
            z >= grid.z_range.0 && z < grid.z_range.1
        })
        .filter_map(|p| {
            grid.locate(p.x as f64, p.y as f64)
                .map(|(h, w)| (h * width + w, p.intensity, p.z))
        })
        .collect();
    binned.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2)));

    let mut out = FeatureGrid::zeros(*grid);
    let data = out.data_mut();
    for run in binned.chunk_by(|a, b| a.0 == b.0) {
        let cell = run[0].0;
        let count = run.len();
        let max_z = run.iter().map(|r| r.2).fold(f32::NEG_INFINITY, f32::max);
        let sum_i: f64 = run.iter().map(|r| r.1 as f64).sum();
        data[CH_COUNT * plane + cell] = (count as f64).ln_1p() as f32;
        data[CH_HEIGHT * plane + cell] = (max_z as f64 - grid.z_range.0) as f32;
        data[CH_INTENSITY * plane + cell] = (sum_i / count as f64) as f32;
        data[CH_OCCUPANCY * plane + cell] = 1.0;
    }
    Ok(out)
}
