//! Offline intensity map construction: ground filtering, scan accumulation,
//! max-reflectance rasterization, enhancement and pose-aligned tile extraction.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::{BevGrid, Frame, IntensityTile, PointCloud, Pose2D};

/// Keeps points within `height_band` above the lowest point of their
/// `cell_size` column. Order is preserved.
pub fn filter_ground(cloud: &PointCloud, cell_size: f64, height_band: f64) -> Result<PointCloud> {
    if !(cell_size > 0.0) || !(height_band > 0.0) {
        return Err(Error::Config(format!(
            "ground filter needs positive cell size and band, got {cell_size} and {height_band}"
        )));
    }
    let key = |x: f64, y: f64| {
        (
            (x / cell_size).floor() as i64,
            (y / cell_size).floor() as i64,
        )
    };
    let mut lowest: HashMap<(i64, i64), f64> = HashMap::new();
    for p in &cloud.points {
        let e = lowest.entry(key(p.x, p.y)).or_insert(f64::INFINITY);
        *e = e.min(p.z);
    }
    let points = cloud
        .points
        .iter()
        .filter(|p| p.z <= lowest[&key(p.x, p.y)] + height_band)
        .copied()
        .collect();
    Ok(PointCloud::new(points))
}

/// Transforms each scan by its pose and concatenates them.
pub fn accumulate_scans(scans: &[PointCloud], poses: &[Pose2D]) -> Result<PointCloud> {
    if scans.len() != poses.len() {
        return Err(Error::Contract(format!(
            "{} scans but {} poses",
            scans.len(),
            poses.len()
        )));
    }
    if scans.is_empty() {
        return Err(Error::Contract("at least one scan is required".into()));
    }
    let total = scans.iter().map(PointCloud::len).sum();
    let mut points = Vec::with_capacity(total);
    for (scan, pose) in scans.iter().zip(poses) {
        points.extend(scan.points.iter().map(|p| {
            let (x, y) = pose.apply(p.x, p.y);
            crate::grid::Point { x, y, ..*p }
        }));
    }
    Ok(PointCloud::new(points))
}

/// Maximum reflectance per cell; empty cells and out-of-extent points are ignored.
pub fn rasterize_intensity(cloud: &PointCloud, grid: &BevGrid, frame: Frame) -> IntensityTile {
    let mut tile = IntensityTile::zeros(*grid, frame);
    for p in &cloud.points {
        if let Some((r, c)) = grid.cell_of(p.x, p.y) {
            let v = p.reflectance as f32;
            if v > tile.get(r, c) {
                tile.set(r, c, v);
            }
        }
    }
    tile
}

/// Min-max normalization; constant tiles map to zero.
pub fn normalize(values: &[f32]) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if values.is_empty() || !(hi > lo) {
        return vec![0.0; values.len()];
    }
    let span = hi - lo;
    values
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect()
}

/// Grayscale dilation with a `(2r+1)²` square window clipped at the borders.
pub fn dilate(values: &[f32], rows: usize, cols: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return values.to_vec();
    }
    // The square max separates into a row pass and a column pass.
    let mut tmp = vec![0.0f32; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(cols - 1);
            tmp[r * cols + c] = values[r * cols + lo..=r * cols + hi]
                .iter()
                .copied()
                .fold(f32::NEG_INFINITY, f32::max);
        }
    }
    let mut out = vec![0.0f32; values.len()];
    for r in 0..rows {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(rows - 1);
        for c in 0..cols {
            out[r * cols + c] = (lo..=hi)
                .map(|rr| tmp[rr * cols + c])
                .fold(f32::NEG_INFINITY, f32::max);
        }
    }
    out
}

/// Index into `[0, n)` with half-sample symmetric reflection (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with reflect padding; `sigma == 0` is the identity.
pub fn gaussian_blur(values: &[f32], rows: usize, cols: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 || values.is_empty() {
        return values.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let rad = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f64; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            tmp[r * cols + c] = k
                .iter()
                .enumerate()
                .map(|(j, w)| {
                    w * values[r * cols + reflect(c as isize + j as isize - rad, cols)] as f64
                })
                .sum();
        }
    }
    let mut out = vec![0.0f32; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            let v: f64 = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[reflect(r as isize + j as isize - rad, rows) * cols + c])
                .sum();
            out[r * cols + c] = v.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Normalize → dilate → blur.
pub fn enhance_tile(
    tile: &IntensityTile,
    local_max_radius: usize,
    gaussian_sigma: f64,
) -> Result<IntensityTile> {
    if !(gaussian_sigma >= 0.0) {
        return Err(Error::Config(format!(
            "gaussian sigma must be ≥ 0, got {gaussian_sigma}"
        )));
    }
    let (rows, cols) = (tile.grid.rows, tile.grid.cols);
    let v = normalize(&tile.values);
    let v = dilate(&v, rows, cols, local_max_radius);
    let v = gaussian_blur(&v, rows, cols, gaussian_sigma);
    Ok(IntensityTile {
        grid: tile.grid,
        values: v,
        frame: tile.frame,
    })
}

/// Settings of [`build_intensity_map`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapBuildConfig {
    pub resolution: f64,
    pub ground_cell: f64,
    pub ground_band: f64,
    pub local_max_radius: usize,
    pub gaussian_sigma: f64,
}

impl Default for MapBuildConfig {
    fn default() -> Self {
        Self {
            resolution: 0.1,
            ground_cell: 1.0,
            ground_band: 0.3,
            local_max_radius: 1,
            gaussian_sigma: 1.0,
        }
    }
}

/// Ground-filters each scan, moves it into the global frame, rasterizes the
/// union over its bounding box and enhances the result.
pub fn build_intensity_map(
    scans: &[PointCloud],
    poses: &[Pose2D],
    config: &MapBuildConfig,
) -> Result<IntensityTile> {
    let filtered = scans
        .iter()
        .map(|s| filter_ground(s, config.ground_cell, config.ground_band))
        .collect::<Result<Vec<_>>>()?;
    let cloud = accumulate_scans(&filtered, poses)?;
    if cloud.is_empty() {
        return Err(Error::Contract(
            "no ground points to build a map from".into(),
        ));
    }
    let res = config.resolution;
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for p in &cloud.points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let snap_lo = |v: f64| (v / res).floor() * res;
    let snap_hi = |v: f64| ((v / res).floor() + 1.0) * res;
    let grid = BevGrid::from_extent((snap_lo(x0), snap_hi(x1)), (snap_lo(y0), snap_hi(y1)), res)?;
    enhance_tile(
        &rasterize_intensity(&cloud, &grid, Frame::Global),
        config.local_max_radius,
        config.gaussian_sigma,
    )
}

/// Bilinear sample between cell centres; zero outside the map extent.
fn sample_bilinear(map: &IntensityTile, x: f64, y: f64) -> f32 {
    let g = &map.grid;
    if !g.extent().contains(crate::geometry::Vec2::new(x, y)) {
        return 0.0;
    }
    let snap = |v: f64| {
        if (v - v.round()).abs() < 1e-9 {
            v.round()
        } else {
            v
        }
    };
    let u = snap((x - g.x_min) / g.resolution - 0.5).clamp(0.0, (g.cols - 1) as f64);
    let v = snap((y - g.y_min) / g.resolution - 0.5).clamp(0.0, (g.rows - 1) as f64);
    let (c0, r0) = (u.floor() as usize, v.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(g.cols - 1), (r0 + 1).min(g.rows - 1));
    let (fu, fv) = ((u - c0 as f64) as f32, (v - r0 as f64) as f32);
    let top = map.get(r0, c0) * (1.0 - fu) + map.get(r0, c1) * fu;
    let bot = map.get(r1, c0) * (1.0 - fu) + map.get(r1, c1) * fu;
    top * (1.0 - fv) + bot * fv
}

/// Resamples a global map into the ego-aligned `out_grid`.
pub fn extract_tile(
    map: &IntensityTile,
    ego: &Pose2D,
    out_grid: &BevGrid,
) -> Result<IntensityTile> {
    if map.frame != Frame::Global {
        return Err(Error::Contract(
            "extract_tile expects a global-frame map".into(),
        ));
    }
    out_grid.validate()?;
    let mut out = IntensityTile::zeros(*out_grid, Frame::Ego);
    for r in 0..out_grid.rows {
        for c in 0..out_grid.cols {
            let p = out_grid.cell_center(r, c);
            let (gx, gy) = ego.apply(p.x, p.y);
            out.set(r, c, sample_bilinear(map, gx, gy));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Point;

    fn pt(x: f64, y: f64, z: f64, r: f64) -> Point {
        Point {
            x,
            y,
            z,
            reflectance: r,
            t: 0.0,
        }
    }

    #[test]
    fn flat_ground_survives_filter() {
        let cloud = PointCloud::new(
            (0..50)
                .map(|i| pt(i as f64 * 0.37, -(i as f64) * 0.11, 0.0, 0.5))
                .collect(),
        );
        assert_eq!(filter_ground(&cloud, 0.5, 0.1).unwrap(), cloud);
    }

    #[test]
    fn elevated_points_in_a_cell_are_dropped() {
        let cloud = PointCloud::new(vec![
            pt(0.1, 0.1, 0.0, 0.3),
            pt(0.2, 0.2, 2.0, 0.3),
            pt(1.1, 0.1, 0.0, 0.3),
            pt(1.2, 0.2, 2.0, 0.3),
        ]);
        let out = filter_ground(&cloud, 1.0, 0.3).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.points.iter().all(|p| p.z == 0.0));
        assert!(filter_ground(&PointCloud::default(), 1.0, 0.3)
            .unwrap()
            .is_empty());
        assert!(filter_ground(&cloud, 0.0, 0.3).is_err());
    }

    #[test]
    fn accumulate_rotates_then_translates() {
        let scan = PointCloud::new(vec![pt(1.0, 0.0, 0.0, 0.5)]);
        let out = accumulate_scans(
            &[scan.clone()],
            &[Pose2D::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)],
        )
        .unwrap();
        assert!(out.points[0].x.abs() < 1e-9 && (out.points[0].y - 1.0).abs() < 1e-9);
        assert_eq!(
            accumulate_scans(&[scan.clone()], &[Pose2D::identity()]).unwrap(),
            scan
        );
        assert!(matches!(
            accumulate_scans(&[scan], &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn rasterize_keeps_cell_maximum() {
        let g = BevGrid::from_extent((0.0, 1.0), (0.0, 1.0), 0.5).unwrap();
        let cloud = PointCloud::new(vec![
            pt(0.1, 0.1, 0.0, 0.2),
            pt(0.2, 0.3, 0.0, 0.9),
            pt(0.4, 0.4, 0.0, 0.5),
            pt(7.0, 0.0, 0.0, 1.0),
        ]);
        let t = rasterize_intensity(&cloud, &g, Frame::Global);
        assert_eq!(t.values, vec![0.9, 0.0, 0.0, 0.0]);
        assert!(
            rasterize_intensity(&PointCloud::default(), &g, Frame::Global)
                .values
                .iter()
                .all(|&v| v == 0.0)
        );
    }

    #[test]
    fn enhance_identity_and_dilation_block() {
        let g = BevGrid::from_extent((0.0, 0.5), (0.0, 0.5), 0.1).unwrap();
        let mut t = IntensityTile::zeros(g, Frame::Global);
        t.set(0, 0, 1.0);
        t.set(3, 2, 0.25);
        assert_eq!(enhance_tile(&t, 0, 0.0).unwrap(), t);

        let mut one = IntensityTile::zeros(g, Frame::Global);
        one.set(2, 2, 1.0);
        let d = enhance_tile(&one, 1, 0.0).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
                assert_eq!(d.get(r, c), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn constant_tile_normalizes_to_zero() {
        let g = BevGrid::from_extent((0.0, 0.5), (0.0, 0.5), 0.1).unwrap();
        let t = IntensityTile::filled(g, 0.7, Frame::Global);
        assert!(enhance_tile(&t, 2, 1.0)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn blur_preserves_constants_with_reflect_padding() {
        let v = vec![0.5f32; 30];
        let out = gaussian_blur(&v, 5, 6, 1.5);
        assert!(out.iter().all(|&x| (x - 0.5).abs() < 1e-6));
    }

    #[test]
    fn reflect_index_is_half_sample_symmetric() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn identity_extraction_copies_and_far_pose_is_empty() {
        let g = BevGrid::from_extent((-1.0, 1.0), (-0.5, 0.5), 0.25).unwrap();
        let mut map = IntensityTile::zeros(g, Frame::Global);
        for (i, v) in map.values.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).fract();
        }
        let out = extract_tile(&map, &Pose2D::identity(), &g).unwrap();
        assert_eq!(out.values, map.values);
        let far = extract_tile(&map, &Pose2D::new(100.0, 0.0, 0.3), &g).unwrap();
        assert!(far.values.iter().all(|&v| v == 0.0));
        assert!(extract_tile(&out, &Pose2D::identity(), &g).is_err());
    }
    #[test]
    fn built_map_covers_every_ground_point() {
        let scan = PointCloud::new(vec![
            pt(0.05, 0.05, 0.0, 0.2),
            pt(1.93, -0.71, 0.0, 0.9),
            pt(1.93, -0.71, 2.0, 1.0),
        ]);
        let pose = Pose2D::new(3.0, 1.0, 0.0);
        let map = build_intensity_map(
            &[scan],
            &[pose],
            &MapBuildConfig {
                local_max_radius: 0,
                gaussian_sigma: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(map.frame, Frame::Global);
        let (r, c) = map.grid.cell_of(4.93, 0.29).unwrap();
        assert_eq!(map.get(r, c), 1.0);
        // The elevated return is filtered out, so 0.9 is the maximum.
        let (r, c) = map.grid.cell_of(3.05, 1.05).unwrap();
        assert!((map.get(r, c) - 0.2 / 0.9).abs() < 1e-6);
        assert!(build_intensity_map(
            &[PointCloud::default()],
            &[pose],
            &MapBuildConfig::default()
        )
        .is_err());
    }
}
