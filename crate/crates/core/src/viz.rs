//! Side-by-side PNG of input point density, prediction and ground truth.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{BevGrid, PointCloud, SemanticMask};

/// Background, divider, crossing, boundary.
pub const CLASS_COLORS: [[u8; 3]; 4] = [[20, 20, 24], [255, 196, 0], [0, 170, 255], [235, 60, 60]];

const GAP: u32 = 4;

/// Point count per cell.
pub fn point_density(cloud: &PointCloud, grid: &BevGrid) -> Vec<u32> {
    let mut counts = vec![0u32; grid.num_cells()];
    for p in &cloud.points {
        if let Some((r, c)) = grid.cell_of(p.x, p.y) {
            counts[r * grid.cols + c] += 1;
        }
    }
    counts
}

/// Three panels, each `scale` pixels per cell, with +y pointing up.
pub fn render_panels(
    cloud: &PointCloud,
    pred: &SemanticMask,
    gt: &SemanticMask,
    scale: u32,
) -> Result<RgbImage> {
    let grid = gt.grid;
    if pred.grid.rows != grid.rows || pred.grid.cols != grid.cols {
        return Err(Error::Contract("prediction and gt grids differ".into()));
    }
    let scale = scale.max(1);
    let (pw, ph) = (grid.cols as u32 * scale, grid.rows as u32 * scale);
    let mut img = RgbImage::from_pixel(3 * pw + 2 * GAP, ph, Rgb([255, 255, 255]));
    let density = point_density(cloud, &grid);
    let max = density.iter().copied().max().unwrap_or(0).max(1) as f64;
    let gray = |n: u32| -> [u8; 3] {
        let v = ((1.0 + n as f64).ln() / (1.0 + max).ln() * 255.0).round() as u8;
        [v, v, v]
    };
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let i = r * grid.cols + c;
            let colors = [
                gray(density[i]),
                CLASS_COLORS[pred.labels[i] as usize % 4],
                CLASS_COLORS[gt.labels[i] as usize % 4],
            ];
            for (k, color) in colors.into_iter().enumerate() {
                let x0 = k as u32 * (pw + GAP) + c as u32 * scale;
                let y0 = (grid.rows - 1 - r) as u32 * scale;
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(x0 + dx, y0 + dy, Rgb(color));
                    }
                }
            }
        }
    }
    Ok(img)
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
