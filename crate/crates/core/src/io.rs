//! Binary sample files and dataset directory layout.
//!
//! * `points`: `u64` row count, then five little-endian `f32` columns
//!   `x, y, z, reflectance, t`, each `rows` long.
//! * `intensity.tile` / `gt.mask`: `u32` width, `u32` height, `f64`
//!   resolution, `f64` origin x, `f64` origin y, then the row-major raster
//!   (`f32` or `u8`).
//! * `meta`: TOML with the seed, grid and generator settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::grid::{
    BevGrid, Frame, IntensityTile, Point, PointCloud, Pose2D, SemanticMask, NUM_CLASSES,
};
use crate::synth::{generate_sample, sub_seed, SceneLayout, ScenePreset};

pub const POINTS_FILE: &str = "points";
pub const TILE_FILE: &str = "intensity.tile";
pub const MASK_FILE: &str = "gt.mask";
pub const META_FILE: &str = "meta";
pub const LAYOUT_FILE: &str = "layout.json";

const RASTER_HEADER: usize = 4 + 4 + 8 * 3;

fn format_err(what: &'static str, path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        what,
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let mut buf = Vec::with_capacity(8 + n * 20);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    let cols: [fn(&Point) -> f64; 5] = [|p| p.x, |p| p.y, |p| p.z, |p| p.reflectance, |p| p.t];
    for col in cols {
        for p in &cloud.points {
            buf.extend_from_slice(&(col(p) as f32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_points(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| format_err("points", path, "missing row-count header"))?;
    let n = u64::from_le_bytes(header) as usize;
    let expected = n.checked_mul(20).and_then(|b| b.checked_add(8));
    if expected != Some(bytes.len()) {
        return Err(format_err(
            "points",
            path,
            format!("{} bytes for {n} rows", bytes.len()),
        ));
    }
    let col = |k: usize, i: usize| {
        let off = 8 + (k * n + i) * 4;
        f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as f64
    };
    let points = (0..n)
        .map(|i| Point {
            x: col(0, i),
            y: col(1, i),
            z: col(2, i),
            reflectance: col(3, i),
            t: col(4, i),
        })
        .collect();
    Ok(PointCloud::new(points))
}

fn encode_header(grid: &BevGrid, buf: &mut Vec<u8>) {
    buf.extend_from_slice(&(grid.cols as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.rows as u32).to_le_bytes());
    buf.extend_from_slice(&grid.resolution.to_le_bytes());
    buf.extend_from_slice(&grid.x_min.to_le_bytes());
    buf.extend_from_slice(&grid.y_min.to_le_bytes());
}

fn decode_header(bytes: &[u8], what: &'static str, path: &Path) -> Result<BevGrid> {
    if bytes.len() < RASTER_HEADER {
        return Err(format_err(what, path, "truncated header"));
    }
    let u32_at =
        |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let grid = BevGrid {
        cols: u32_at(0),
        rows: u32_at(4),
        resolution: f64_at(8),
        x_min: f64_at(16),
        y_min: f64_at(24),
    };
    grid.validate()
        .map_err(|e| format_err(what, path, e.to_string()))?;
    Ok(grid)
}

pub fn encode_tile(tile: &IntensityTile) -> Vec<u8> {
    let mut buf = Vec::with_capacity(RASTER_HEADER + tile.values.len() * 4);
    encode_header(&tile.grid, &mut buf);
    for v in &tile.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_tile(bytes: &[u8], frame: Frame, path: &Path) -> Result<IntensityTile> {
    let grid = decode_header(bytes, "intensity tile", path)?;
    let body = &bytes[RASTER_HEADER..];
    if body.len() != grid.num_cells() * 4 {
        return Err(format_err(
            "intensity tile",
            path,
            format!("{} body bytes for {} cells", body.len(), grid.num_cells()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(IntensityTile {
        grid,
        values,
        frame,
    })
}

pub fn encode_mask(mask: &SemanticMask) -> Vec<u8> {
    let mut buf = Vec::with_capacity(RASTER_HEADER + mask.labels.len());
    encode_header(&mask.grid, &mut buf);
    buf.extend_from_slice(&mask.labels);
    buf
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<SemanticMask> {
    let grid = decode_header(bytes, "mask", path)?;
    let body = &bytes[RASTER_HEADER..];
    if body.len() != grid.num_cells() {
        return Err(format_err(
            "mask",
            path,
            format!("{} body bytes for {} cells", body.len(), grid.num_cells()),
        ));
    }
    if let Some(bad) = body.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(format_err(
            "mask",
            path,
            format!("class label {bad} out of range"),
        ));
    }
    Ok(SemanticMask {
        grid,
        labels: body.to_vec(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    decode_points(&read(path)?, path)
}

pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    write(path, &encode_points(cloud))
}

pub fn read_tile(path: &Path, frame: Frame) -> Result<IntensityTile> {
    decode_tile(&read(path)?, frame, path)
}

pub fn write_tile(path: &Path, tile: &IntensityTile) -> Result<()> {
    write(path, &encode_tile(tile))
}

pub fn read_mask(path: &Path) -> Result<SemanticMask> {
    decode_mask(&read(path)?, path)
}

pub fn write_mask(path: &Path, mask: &SemanticMask) -> Result<()> {
    write(path, &encode_mask(mask))
}

/// Contents of a sample's `meta` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub preset: String,
    pub scene: ScenePreset,
}

/// One sample as loaded from disk.
#[derive(Clone, Debug)]
pub struct SampleData {
    pub dir: PathBuf,
    pub meta: SampleMeta,
    pub points: PointCloud,
    pub tile: IntensityTile,
    pub mask: SemanticMask,
}

pub fn write_sample(
    dir: &Path,
    preset_name: &str,
    preset: &ScenePreset,
    seed: u64,
) -> Result<SceneLayout> {
    let s = generate_sample(seed, preset)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_points(&dir.join(POINTS_FILE), &s.points)?;
    write_tile(&dir.join(TILE_FILE), &s.tile)?;
    write_mask(&dir.join(MASK_FILE), &s.mask)?;
    let meta = SampleMeta {
        seed,
        preset: preset_name.to_string(),
        scene: preset.clone(),
    };
    let text =
        toml::to_string(&meta).map_err(|e| Error::Config(format!("cannot serialize meta: {e}")))?;
    write(&dir.join(META_FILE), text.as_bytes())?;
    write(
        &dir.join(LAYOUT_FILE),
        &serde_json::to_vec_pretty(&s.layout)?,
    )?;
    Ok(s.layout)
}

pub fn read_sample(dir: &Path) -> Result<SampleData> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: SampleMeta =
        toml::from_str(&text).map_err(|e| format_err("meta", &meta_path, e.to_string()))?;
    let points = read_points(&dir.join(POINTS_FILE))?;
    let tile = read_tile(&dir.join(TILE_FILE), Frame::Ego)?;
    let mask = read_mask(&dir.join(MASK_FILE))?;
    if tile.grid != mask.grid {
        return Err(format_err("sample", dir, "tile and mask grids differ"));
    }
    Ok(SampleData {
        dir: dir.to_path_buf(),
        meta,
        points,
        tile,
        mask,
    })
}

/// Sample directories (those holding a `meta` file) directly under `dir`, sorted by name.
pub fn list_samples(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.join(META_FILE).is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Resolves the sample directory for a split: `root/<split>` if it exists,
/// otherwise `root` itself.
pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    let sub = root.join(split);
    if sub.is_dir() {
        sub
    } else {
        root.to_path_buf()
    }
}

pub fn load_split(dir: &Path) -> Result<Vec<SampleData>> {
    let dirs = list_samples(dir)?;
    if dirs.is_empty() {
        return Err(format_err("dataset", dir, "no sample directories found"));
    }
    dirs.iter().map(|d| read_sample(d)).collect()
}

/// Writes `num_train` samples to `out/train` and `num_val` to `out/val`.
pub fn generate_dataset(
    out: &Path,
    preset_name: &str,
    num_train: usize,
    num_val: usize,
    seed: u64,
) -> Result<()> {
    let preset = ScenePreset::by_name(preset_name)?;
    for (split, count, stream) in [("train", num_train, 0u64), ("val", num_val, 1u64)] {
        let base = sub_seed(seed, 100 + stream);
        for i in 0..count {
            let dir = out.join(split).join(format!("{i:06}"));
            // Kept below 2^63 so the seed fits a TOML integer.
            let s = sub_seed(base, i as u64) & i64::MAX as u64;
            write_sample(&dir, preset_name, &preset, s)?;
        }
        log::info!(
            "wrote {count} {split} samples to {}",
            out.join(split).display()
        );
    }
    Ok(())
}

/// Reads a pose list: one `x y yaw` line per scan; blank lines and `#` comments are skipped.
pub fn read_poses(path: &Path) -> Result<Vec<Pose2D>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err("poses", path, format!("line {}: {e}", n + 1)))?;
        match vals.as_slice() {
            [x, y, yaw] => poses.push(Pose2D::new(*x, *y, *yaw)),
            _ => {
                return Err(format_err(
                    "poses",
                    path,
                    format!("line {}: expected `x y yaw`", n + 1),
                ))
            }
        }
    }
    Ok(poses)
}

/// Point files of a scan directory in name order: plain files, or sample
/// directories holding a `points` file.
pub fn read_scan_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() {
            paths.push(path);
        } else if path.join(POINTS_FILE).is_file() {
            paths.push(path.join(POINTS_FILE));
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(format_err("scans", dir, "no point files found"));
    }
    paths.iter().map(|p| read_points(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_round_trip_at_f32_precision() {
        let cloud = PointCloud::new(vec![
            Point {
                x: 1.5,
                y: -2.25,
                z: 0.125,
                reflectance: 0.75,
                t: 0.0,
            },
            Point {
                x: -3.0,
                y: 4.0,
                z: 0.0,
                reflectance: 0.0,
                t: 1.0,
            },
        ]);
        let p = Path::new("mem");
        assert_eq!(decode_points(&encode_points(&cloud), p).unwrap(), cloud);
        assert!(decode_points(&[0u8; 5], p).is_err());
        let mut bad = encode_points(&cloud);
        bad.pop();
        assert!(decode_points(&bad, p).is_err());
    }

    #[test]
    fn raster_files_round_trip() {
        let g = BevGrid::desk();
        let mut tile = IntensityTile::zeros(g, Frame::Ego);
        tile.set(3, 7, 0.5);
        let p = Path::new("mem");
        assert_eq!(
            decode_tile(&encode_tile(&tile), Frame::Ego, p).unwrap(),
            tile
        );
        let mut mask = SemanticMask::background(g);
        mask.labels[10] = 3;
        assert_eq!(decode_mask(&encode_mask(&mask), p).unwrap(), mask);
        let mut bad = encode_mask(&mask);
        bad[RASTER_HEADER] = 9;
        assert!(decode_mask(&bad, p).is_err());
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), "desk", 2, 1, 4).unwrap();
        let train = load_split(&split_dir(dir.path(), "train")).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(load_split(&dir.path().join("val")).unwrap().len(), 1);
        let s = &train[0];
        let regenerated = generate_sample(s.meta.seed, &s.meta.scene).unwrap();
        assert_eq!(s.mask, regenerated.mask);
        assert_eq!(s.tile, regenerated.tile);
        assert_eq!(s.points.len(), regenerated.points.len());
    }
}
