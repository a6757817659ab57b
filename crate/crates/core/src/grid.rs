//! BEV grid specification and the raster/point containers aligned to it.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Rect, Vec2};

/// Axis-aligned Cartesian grid over the ground plane.
///
/// Row `r` covers `y ∈ [y_min + r·res, y_min + (r+1)·res)`, column `c` covers
/// `x ∈ [x_min + c·res, x_min + (c+1)·res)`. Rasters are row-major with row 0
/// at `y_min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub x_min: f64,
    pub y_min: f64,
    pub rows: usize,
    pub cols: usize,
    pub resolution: f64,
}

impl BevGrid {
    /// Grid covering `x_range × y_range` at `resolution`; the extent must be an
    /// integer number of cells (within 1e-6 cell).
    pub fn from_extent(x_range: (f64, f64), y_range: (f64, f64), resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::Config(format!(
                "grid resolution must be positive, got {resolution}"
            )));
        }
        let cells = |lo: f64, hi: f64, axis: &str| -> Result<usize> {
            let n = (hi - lo) / resolution;
            let r = n.round();
            if !(r >= 1.0) || (n - r).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "{axis} extent [{lo}, {hi}] is not a positive whole number of {resolution} m cells"
                )));
            }
            Ok(r as usize)
        };
        Ok(Self {
            x_min: x_range.0,
            y_min: y_range.0,
            cols: cells(x_range.0, x_range.1, "x")?,
            rows: cells(y_range.0, y_range.1, "y")?,
            resolution,
        })
    }

    /// 60 m × 30 m at 0.15 m (200 × 400 cells), centred on the ego vehicle.
    pub fn paper() -> Self {
        Self::from_extent((-30.0, 30.0), (-15.0, 15.0), 0.15).expect("valid preset")
    }

    /// 19.2 m × 9.6 m at 0.15 m (64 × 128 cells).
    pub fn desk() -> Self {
        Self::from_extent((-9.6, 9.6), (-4.8, 4.8), 0.15).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(format!(
                "degenerate grid {}×{}",
                self.rows, self.cols
            )));
        }
        if !(self.resolution > 0.0) {
            return Err(Error::Config("grid resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.cols as f64 * self.resolution
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.rows as f64 * self.resolution
    }

    pub fn extent(&self) -> Rect {
        Rect {
            x_min: self.x_min,
            x_max: self.x_max(),
            y_min: self.y_min,
            y_max: self.y_max(),
        }
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// `(row, col)` of the cell containing `(x, y)`, or `None` outside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.x_min) / self.resolution).floor();
        let r = ((y - self.y_min) / self.resolution).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Vec2 {
        Vec2::new(
            self.x_min + (col as f64 + 0.5) * self.resolution,
            self.y_min + (row as f64 + 0.5) * self.resolution,
        )
    }

    /// Same extent, cells `factor` times larger.
    pub fn coarsen(&self, factor: usize) -> Self {
        Self {
            rows: self.rows / factor,
            cols: self.cols / factor,
            resolution: self.resolution * factor as f64,
            ..*self
        }
    }
}

/// One LiDAR return.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub reflectance: f64,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Planar rigid pose; `yaw` is kept in `(−π, π]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// Maps a local point into the parent frame: rotate by `yaw`, then translate.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * x - s * y + self.x, s * x + c * y + self.y)
    }

    /// Maps a parent-frame point into the local frame.
    pub fn apply_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Ego,
    Global,
}

/// Dense reflectance raster aligned to a [`BevGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityTile {
    pub grid: BevGrid,
    pub values: Vec<f32>,
    pub frame: Frame,
}

impl IntensityTile {
    pub fn zeros(grid: BevGrid, frame: Frame) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.num_cells()],
            frame,
        }
    }

    pub fn filled(grid: BevGrid, v: f32, frame: Frame) -> Self {
        Self {
            grid,
            values: vec![v; grid.num_cells()],
            frame,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.grid.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.values[row * self.grid.cols + col] = v;
    }
}

/// Map element classes in mask order.
pub const CLASS_NAMES: [&str; 4] = ["background", "divider", "crossing", "boundary"];
pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MapClass {
    Background = 0,
    Divider = 1,
    Crossing = 2,
    Boundary = 3,
}

/// Per-cell class labels aligned to a [`BevGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMask {
    pub grid: BevGrid,
    pub labels: Vec<u8>,
}

impl SemanticMask {
    pub fn background(grid: BevGrid) -> Self {
        Self {
            grid,
            labels: vec![0; grid.num_cells()],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.grid.cols + col]
    }

    pub fn count(&self, class: MapClass) -> usize {
        self.labels.iter().filter(|&&l| l == class as u8).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_documented_shapes() {
        let d = BevGrid::desk();
        assert_eq!((d.rows, d.cols), (64, 128));
        let p = BevGrid::paper();
        assert_eq!((p.rows, p.cols), (200, 400));
    }

    #[test]
    fn rejects_degenerate_and_fractional_extents() {
        assert!(BevGrid::from_extent((0.0, 0.0), (0.0, 1.0), 0.1).is_err());
        assert!(BevGrid::from_extent((0.0, 1.05), (0.0, 1.0), 0.1).is_err());
        assert!(BevGrid::from_extent((0.0, 1.0), (0.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn cell_lookup_round_trips_centers() {
        let g = BevGrid::desk();
        for &(r, c) in &[(0, 0), (63, 127), (10, 77)] {
            let p = g.cell_center(r, c);
            assert_eq!(g.cell_of(p.x, p.y), Some((r, c)));
        }
        assert_eq!(g.cell_of(9.6, 0.0), None);
        assert_eq!(g.cell_of(-9.61, 0.0), None);
    }

    #[test]
    fn pose_rotation_and_inverse() {
        let p = Pose2D::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let (x, y) = p.apply(1.0, 0.0);
        assert!(x.abs() < 1e-12 && (y - 1.0).abs() < 1e-12);
        let q = Pose2D::new(3.0, -2.0, 0.7);
        let (a, b) = q.apply(0.4, 1.1);
        let (u, v) = q.apply_inverse(a, b);
        assert!((u - 0.4).abs() < 1e-12 && (v - 1.1).abs() < 1e-12);
    }

    #[test]
    fn angles_wrap_into_half_open_interval() {
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(0.5) - 0.5).abs() < 1e-12);
    }
}
