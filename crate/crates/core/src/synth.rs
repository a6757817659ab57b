//! Procedural road scenes with ground-truth masks, simulated LiDAR sweeps and
//! dense intensity tiles.
//!
//! Roads run along the x axis. The centreline is a quadratic in x and every lane
//! edge is a vertical offset of it, so lane widths are constant in y. Dividers
//! may be dashed; crossings are zebra-striped quads spanning the road. All
//! functions are pure in `(inputs, seed)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_polyline, Polygon, Polyline, Rect, Vec2};
use crate::grid::{BevGrid, Frame, IntensityTile, MapClass, Point, PointCloud, SemanticMask};

/// Inclusive interval used by [`DifficultyConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub min: T,
    pub max: T,
}

impl<T: PartialOrd + Copy> Interval<T> {
    pub const fn new(min: T, max: T) -> Self {
        Self { min, max }
    }

    pub fn is_valid(&self) -> bool {
        self.min <= self.max
    }
}

impl Interval<f64> {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.gen_range(self.min..=self.max)
        }
    }
}

impl Interval<usize> {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

/// Scene generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyConfig {
    pub lane_count: Interval<usize>,
    pub lane_width: Interval<f64>,
    /// Quadratic centreline coefficient (1/m).
    pub curvature: Interval<f64>,
    /// Linear centreline coefficient (slope).
    pub heading: Interval<f64>,
    pub lateral_offset: Interval<f64>,
    pub crossing_count: Interval<usize>,
    /// Crossing length along the road (m).
    pub crossing_length: Interval<f64>,
    pub divider_prob: f64,
    pub crossing_prob: f64,
    /// Probability that road edges fall inside the extent; otherwise the
    /// outer lanes are widened past it.
    pub boundary_prob: f64,
    pub dashed_prob: f64,
    pub paint: PaintSpec,
}

/// How markings are painted on the road surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaintSpec {
    pub line_width: f64,
    pub dash_on: f64,
    pub dash_off: f64,
    pub stripe_period: f64,
    pub stripe_duty: f64,
}

impl Default for PaintSpec {
    fn default() -> Self {
        Self {
            line_width: 0.2,
            dash_on: 2.0,
            dash_off: 2.0,
            stripe_period: 1.0,
            stripe_duty: 0.5,
        }
    }
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        Self {
            lane_count: Interval::new(2, 3),
            lane_width: Interval::new(2.8, 3.5),
            curvature: Interval::new(-0.008, 0.008),
            heading: Interval::new(-0.08, 0.08),
            lateral_offset: Interval::new(-1.5, 1.5),
            crossing_count: Interval::new(1, 2),
            crossing_length: Interval::new(2.5, 4.0),
            divider_prob: 0.9,
            crossing_prob: 0.5,
            boundary_prob: 0.85,
            dashed_prob: 0.4,
            paint: PaintSpec::default(),
        }
    }
}

impl DifficultyConfig {
    /// Wider roads for the 60 m × 30 m grid.
    pub fn paper() -> Self {
        Self {
            lane_count: Interval::new(2, 6),
            lateral_offset: Interval::new(-4.0, 4.0),
            crossing_count: Interval::new(1, 3),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::Config(format!(
                "invalid difficulty parameter: {what}"
            )))
        };
        if !self.lane_count.is_valid() || self.lane_count.min == 0 {
            return bad("lane_count");
        }
        for (name, iv) in [
            ("lane_width", self.lane_width),
            ("curvature", self.curvature),
            ("heading", self.heading),
            ("lateral_offset", self.lateral_offset),
            ("crossing_length", self.crossing_length),
        ] {
            if !iv.is_valid() || !iv.min.is_finite() || !iv.max.is_finite() {
                return bad(name);
            }
        }
        if self.lane_width.min <= 0.0 || self.crossing_length.min <= 0.0 {
            return bad("non-positive width or length");
        }
        if !self.crossing_count.is_valid() {
            return bad("crossing_count");
        }
        for (name, p) in [
            ("divider_prob", self.divider_prob),
            ("crossing_prob", self.crossing_prob),
            ("boundary_prob", self.boundary_prob),
            ("dashed_prob", self.dashed_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(name);
            }
        }
        let p = &self.paint;
        if !(p.line_width > 0.0 && p.dash_on > 0.0 && p.dash_off >= 0.0 && p.stripe_period > 0.0) {
            return bad("paint");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneDivider {
    pub line: Polyline,
    pub dashed: bool,
}

/// Vector map of one scene in metric ego coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub extent: Rect,
    pub dividers: Vec<LaneDivider>,
    pub crossings: Vec<Polygon>,
    pub boundaries: Vec<Polyline>,
    pub drivable_region: Polygon,
    pub paint: PaintSpec,
    pub rng_seed: u64,
}

const GEOM_TOL: f64 = 1e-6;

impl SceneLayout {
    /// A layout with no map elements whose drivable region is the whole extent.
    pub fn empty(extent: Rect) -> Self {
        Self {
            extent,
            dividers: Vec::new(),
            crossings: Vec::new(),
            boundaries: Vec::new(),
            drivable_region: Polygon(vec![
                Vec2::new(extent.x_min, extent.y_min),
                Vec2::new(extent.x_max, extent.y_min),
                Vec2::new(extent.x_max, extent.y_max),
                Vec2::new(extent.x_min, extent.y_max),
            ]),
            paint: PaintSpec::default(),
            rng_seed: 0,
        }
    }

    /// Inside (or within 1e-6 m of) the drivable region.
    pub fn on_road(&self, p: Vec2) -> bool {
        self.drivable_region.contains(p)
            || polygon_boundary_distance(&self.drivable_region, p) <= GEOM_TOL
    }

    /// Whether a ground point at `p` carries paint.
    pub fn is_marking(&self, p: Vec2) -> bool {
        let paint = &self.paint;
        let half = paint.line_width * 0.5;
        for d in &self.dividers {
            if d.dashed {
                let (dist, s) = d.line.project(p);
                if dist <= half && s.rem_euclid(paint.dash_on + paint.dash_off) < paint.dash_on {
                    return true;
                }
            } else if d.line.distance(p) <= half {
                return true;
            }
        }
        self.crossings.iter().any(|c| c.contains(p))
            && (p.y / paint.stripe_period).rem_euclid(1.0) < paint.stripe_duty
    }

    /// Checks every structural invariant of a generated layout.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let ext = &self.extent;
        let in_ext = |p: &Vec2| ext.contains_with_tolerance(*p, GEOM_TOL);
        if !self.drivable_region.is_simple() {
            return Err("drivable region is not a simple polygon".into());
        }
        if !self.drivable_region.0.iter().all(in_ext) {
            return Err("drivable region leaves the extent".into());
        }
        for (i, d) in self.dividers.iter().enumerate() {
            if d.line.0.len() < 2 {
                return Err(format!("divider {i} has fewer than 2 vertices"));
            }
            if !d.line.0.iter().all(in_ext) {
                return Err(format!("divider {i} leaves the extent"));
            }
            if !d.line.0.iter().all(|p| self.on_road(*p)) {
                return Err(format!("divider {i} leaves the drivable region"));
            }
        }
        for (i, b) in self.boundaries.iter().enumerate() {
            if b.0.len() < 2 {
                return Err(format!("boundary {i} has fewer than 2 vertices"));
            }
            if !b.0.iter().all(in_ext) {
                return Err(format!("boundary {i} leaves the extent"));
            }
        }
        for (i, c) in self.crossings.iter().enumerate() {
            if !c.is_simple() {
                return Err(format!("crossing {i} is not simple"));
            }
            if !c.0.iter().all(in_ext) {
                return Err(format!("crossing {i} leaves the extent"));
            }
            if !c.0.iter().all(|p| self.on_road(*p)) {
                return Err(format!("crossing {i} leaves the drivable region"));
            }
        }
        Ok(())
    }
}

fn polygon_boundary_distance(poly: &Polygon, p: Vec2) -> f64 {
    let n = poly.0.len();
    (0..n)
        .map(|i| crate::geometry::dist_point_segment(p, poly.0[i], poly.0[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

struct Road {
    y0: f64,
    slope: f64,
    curv: f64,
    /// Lane edge offsets from the centreline, ascending; first/last are road edges.
    edges: Vec<f64>,
}

impl Road {
    fn center(&self, x: f64) -> f64 {
        self.y0 + self.slope * x + self.curv * x * x
    }
}

fn sample_xs(ext: &Rect, step: f64) -> Vec<f64> {
    let n = ((ext.x_max - ext.x_min) / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| ext.x_min + (ext.x_max - ext.x_min) * i as f64 / n as f64)
        .collect()
}

/// Procedurally generates a road layout; deterministic in `seed`.
pub fn generate_scene(
    seed: u64,
    extent: &BevGrid,
    difficulty: &DifficultyConfig,
) -> Result<SceneLayout> {
    extent.validate()?;
    difficulty.validate()?;
    let ext = extent.extent();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let lanes = difficulty.lane_count.sample(&mut rng);
    let widths: Vec<f64> = (0..lanes)
        .map(|_| difficulty.lane_width.sample(&mut rng))
        .collect();
    let road_w: f64 = widths.iter().sum();
    let mut edges = Vec::with_capacity(lanes + 1);
    let mut acc = -road_w / 2.0;
    edges.push(acc);
    for w in &widths {
        acc += w;
        edges.push(acc);
    }
    let mut road = Road {
        y0: difficulty.lateral_offset.sample(&mut rng),
        slope: difficulty.heading.sample(&mut rng),
        curv: difficulty.curvature.sample(&mut rng),
        edges,
    };
    let with_boundaries = rng.gen_bool(difficulty.boundary_prob);
    let with_dividers = rng.gen_bool(difficulty.divider_prob);
    let with_crossings = rng.gen_bool(difficulty.crossing_prob);

    let xs = sample_xs(&ext, 0.5);
    if !with_boundaries {
        // Push both road edges well outside the extent.
        let (lo, hi) = xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                let c = road.center(x);
                (lo.min(c), hi.max(c))
            });
        let n = road.edges.len();
        road.edges[0] = road.edges[0].min(ext.y_min - lo - 1.0);
        road.edges[n - 1] = road.edges[n - 1].max(ext.y_max - hi + 1.0);
    }
    let (first, last) = (road.edges[0], *road.edges.last().expect("road has edges"));

    let lower: Vec<Vec2> = xs
        .iter()
        .map(|&x| Vec2::new(x, (road.center(x) + first).clamp(ext.y_min, ext.y_max)))
        .collect();
    let upper: Vec<Vec2> = xs
        .iter()
        .map(|&x| Vec2::new(x, (road.center(x) + last).clamp(ext.y_min, ext.y_max)))
        .collect();
    let mut region = lower.clone();
    region.extend(upper.iter().rev().copied());
    dedup_ring(&mut region);
    let drivable_region = Polygon(region);

    let offset_line = |off: f64| {
        Polyline(
            xs.iter()
                .map(|&x| Vec2::new(x, road.center(x) + off))
                .collect(),
        )
    };

    let mut boundaries = Vec::new();
    for &off in &[first, last] {
        boundaries.extend(clip_polyline(&offset_line(off), &ext));
    }

    let mut dividers = Vec::new();
    if with_dividers {
        for &off in &road.edges[1..road.edges.len() - 1] {
            let dashed = rng.gen_bool(difficulty.dashed_prob);
            for line in clip_polyline(&offset_line(off), &ext) {
                dividers.push(LaneDivider { line, dashed });
            }
        }
    }

    let mut crossings: Vec<Polygon> = Vec::new();
    if with_crossings {
        let count = difficulty.crossing_count.sample(&mut rng);
        let mut spans: Vec<(f64, f64)> = Vec::new();
        let margin = 0.3;
        for _ in 0..count {
            for _attempt in 0..20 {
                let len = difficulty.crossing_length.sample(&mut rng);
                let lo = ext.x_min + 0.5;
                let hi = ext.x_max - 0.5 - len;
                if hi <= lo {
                    break;
                }
                let x0 = rng.gen_range(lo..hi);
                let x1 = x0 + len;
                if spans.iter().any(|&(a, b)| x0 < b + 1.0 && x1 > a - 1.0) {
                    continue;
                }
                let y = |x: f64, off: f64| (road.center(x) + off).clamp(ext.y_min, ext.y_max);
                let mut quad = vec![
                    Vec2::new(x0, y(x0, first + margin)),
                    Vec2::new(x1, y(x1, first + margin)),
                    Vec2::new(x1, y(x1, last - margin)),
                    Vec2::new(x0, y(x0, last - margin)),
                ];
                dedup_ring(&mut quad);
                let poly = Polygon(quad);
                if poly.0.len() >= 3 && poly.signed_area() > 0.5 {
                    spans.push((x0, x1));
                    crossings.push(poly);
                    break;
                }
            }
        }
    }

    Ok(SceneLayout {
        extent: ext,
        dividers,
        crossings,
        boundaries,
        drivable_region,
        paint: difficulty.paint,
        rng_seed: seed,
    })
}

fn dedup_ring(pts: &mut Vec<Vec2>) {
    pts.dedup_by(|a, b| (a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
    while pts.len() > 1 {
        let (f, l) = (pts[0], pts[pts.len() - 1]);
        if (f.x - l.x).abs() < 1e-12 && (f.y - l.y).abs() < 1e-12 {
            pts.pop();
        } else {
            break;
        }
    }
    // Drop interior vertices of collinear runs so the ring has no zero-area spikes.
    let mut i = 0;
    while pts.len() > 3 && i < pts.len() {
        let n = pts.len();
        let (a, b, c) = (pts[(i + n - 1) % n], pts[i], pts[(i + 1) % n]);
        if b.sub(a).cross(c.sub(b)).abs() < 1e-12 && b.sub(a).dot(c.sub(b)) >= 0.0 {
            pts.remove(i);
        } else {
            i += 1;
        }
    }
}

/// Rasterizes map elements into class labels with precedence
/// crossing > divider > boundary.
pub fn rasterize_gt(layout: &SceneLayout, grid: &BevGrid, line_width: f64) -> Result<SemanticMask> {
    grid.validate()?;
    if !(line_width > 0.0) {
        return Err(Error::Config(format!(
            "line width must be positive, got {line_width}"
        )));
    }
    let half = line_width * 0.5;
    let mut mask = SemanticMask::background(*grid);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let p = grid.cell_center(r, c);
            let class = if layout.crossings.iter().any(|poly| poly.contains(p)) {
                MapClass::Crossing
            } else if layout.dividers.iter().any(|d| d.line.distance(p) <= half) {
                MapClass::Divider
            } else if layout.boundaries.iter().any(|b| b.distance(p) <= half) {
                MapClass::Boundary
            } else {
                MapClass::Background
            };
            mask.labels[r * grid.cols + c] = class as u8;
        }
    }
    Ok(mask)
}

/// Mean ± standard deviation of a reflectance distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reflectance {
    pub mean: f64,
    pub std: f64,
}

impl Reflectance {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let v = if self.std > 0.0 {
            Normal::new(self.mean, self.std)
                .expect("finite std")
                .sample(rng)
        } else {
            self.mean
        };
        v.clamp(0.0, 1.0)
    }
}

/// Spinning multi-beam LiDAR mounted above flat ground.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub beam_count: usize,
    pub max_range: f64,
    /// Azimuth step between firings (rad).
    pub angular_resolution: f64,
    pub dropout_rate: f64,
    pub marking_reflectance: Reflectance,
    pub asphalt_reflectance: Reflectance,
    /// Range noise standard deviation (m).
    pub noise_std: f64,
    pub mount_height: f64,
    /// Elevation of the lowest and highest beams (rad).
    pub elevation_min: f64,
    pub elevation_max: f64,
    /// Height of the kerb step outside the drivable region (m).
    pub curb_height: f64,
    /// Standard deviation of ground height (m).
    pub ground_roughness: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            beam_count: 32,
            max_range: 70.0,
            angular_resolution: 0.4f64.to_radians(),
            dropout_rate: 0.1,
            marking_reflectance: Reflectance {
                mean: 0.65,
                std: 0.12,
            },
            asphalt_reflectance: Reflectance {
                mean: 0.25,
                std: 0.1,
            },
            noise_std: 0.02,
            mount_height: 1.84,
            elevation_min: (-30.67f64).to_radians(),
            elevation_max: 10.67f64.to_radians(),
            curb_height: 0.15,
            ground_roughness: 0.02,
        }
    }
}

impl SensorModel {
    /// Noise-free sensor: no dropout, zero reflectance spread.
    pub fn noiseless(&self) -> Self {
        Self {
            dropout_rate: 0.0,
            noise_std: 0.0,
            ground_roughness: 0.0,
            marking_reflectance: Reflectance {
                std: 0.0,
                ..self.marking_reflectance
            },
            asphalt_reflectance: Reflectance {
                std: 0.0,
                ..self.asphalt_reflectance
            },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("invalid sensor parameter: {what}")));
        if self.beam_count == 0 {
            return bad("beam_count");
        }
        if !(self.max_range > 0.0 && self.angular_resolution > 0.0 && self.mount_height > 0.0) {
            return bad("range, angular resolution and mount height must be positive");
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate");
        }
        for r in [self.marking_reflectance, self.asphalt_reflectance] {
            if !(0.0..=1.0).contains(&r.mean) || r.std < 0.0 {
                return bad("reflectance");
            }
        }
        if self.marking_reflectance.mean <= self.asphalt_reflectance.mean {
            return bad("markings must be brighter than asphalt");
        }
        if self.noise_std < 0.0
            || self.ground_roughness < 0.0
            || self.elevation_min > self.elevation_max
        {
            return bad("noise or elevation range");
        }
        Ok(())
    }

    fn elevations(&self) -> Vec<f64> {
        if self.beam_count == 1 {
            return vec![self.elevation_min];
        }
        let step = (self.elevation_max - self.elevation_min) / (self.beam_count - 1) as f64;
        (0..self.beam_count)
            .map(|i| self.elevation_min + step * i as f64)
            .collect()
    }
}

/// Ray-casts one sweep against the flat-ground scene. Only returns inside the
/// layout extent are kept.
pub fn simulate_sweep(layout: &SceneLayout, sensor: &SensorModel, seed: u64) -> Result<PointCloud> {
    sensor.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise =
        (sensor.noise_std > 0.0).then(|| Normal::new(0.0, sensor.noise_std).expect("finite"));
    let rough = (sensor.ground_roughness > 0.0)
        .then(|| Normal::new(0.0, sensor.ground_roughness).expect("finite"));
    let firings = (2.0 * std::f64::consts::PI / sensor.angular_resolution).round() as usize;
    let mut points = Vec::new();
    for elev in sensor.elevations() {
        if elev >= 0.0 {
            continue;
        }
        let down = (-elev).tan();
        for k in 0..firings {
            let az = k as f64 * sensor.angular_resolution;
            // Draw every random number unconditionally so the stream layout
            // does not depend on scene geometry.
            let drop = rng.gen::<f64>() < sensor.dropout_rate;
            let dr = noise.map_or(0.0, |n| n.sample(&mut rng));
            let dz = rough.map_or(0.0, |n| n.sample(&mut rng));
            let u: f64 = rng.gen();

            let mut range = sensor.mount_height / down;
            let (s, c) = az.sin_cos();
            let mut p = Vec2::new(range * c, range * s);
            let mut ground = 0.0;
            if !layout.on_road(p) {
                ground = sensor.curb_height;
                range = (sensor.mount_height - ground) / down;
                p = Vec2::new(range * c, range * s);
                if layout.on_road(p) {
                    // Kerb face: the beam hits the step itself.
                    ground = 0.0;
                }
            }
            if drop || range > sensor.max_range || !layout.extent.contains(p) {
                continue;
            }
            let refl = if ground == 0.0 && layout.is_marking(p) {
                sensor.marking_reflectance
            } else {
                sensor.asphalt_reflectance
            };
            let reflectance = sample_with_uniform(refl, u, &mut rng);
            let r = range + dr;
            points.push(Point {
                x: r * c,
                y: r * s,
                z: ground + dz,
                reflectance,
                t: 0.0,
            });
        }
    }
    Ok(PointCloud::new(points))
}

fn sample_with_uniform(refl: Reflectance, u: f64, rng: &mut ChaCha8Rng) -> f64 {
    if refl.std > 0.0 {
        // Box–Muller with one stream uniform and one fresh draw.
        let v: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let z = (-2.0 * v.ln()).sqrt() * (2.0 * std::f64::consts::PI * u).cos();
        (refl.mean + refl.std * z).clamp(0.0, 1.0)
    } else {
        refl.mean.clamp(0.0, 1.0)
    }
}

/// Dense teacher-side reflectance raster of the scene.
pub fn render_intensity_tile(
    layout: &SceneLayout,
    grid: &BevGrid,
    sensor: &SensorModel,
    seed: u64,
) -> Result<IntensityTile> {
    grid.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tile = IntensityTile::zeros(*grid, Frame::Ego);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let p = grid.cell_center(r, c);
            let refl = if layout.is_marking(p) {
                sensor.marking_reflectance
            } else {
                sensor.asphalt_reflectance
            };
            let v = refl.sample(&mut rng);
            tile.set(r, c, v as f32);
        }
    }
    Ok(tile)
}

/// Grid, generator and sensor settings for one dataset preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePreset {
    pub grid: BevGrid,
    pub difficulty: DifficultyConfig,
    pub sensor: SensorModel,
    /// Rasterized line thickness of dividers and boundaries (m).
    pub gt_line_width: f64,
}

impl ScenePreset {
    pub fn desk() -> Self {
        Self {
            grid: BevGrid::desk(),
            difficulty: DifficultyConfig::default(),
            sensor: SensorModel::default(),
            gt_line_width: 0.45,
        }
    }

    pub fn paper() -> Self {
        Self {
            grid: BevGrid::paper(),
            difficulty: DifficultyConfig::paper(),
            sensor: SensorModel::default(),
            gt_line_width: 0.45,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk or paper)"
            ))),
        }
    }
}

/// One generated training example.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub seed: u64,
    pub layout: SceneLayout,
    pub points: PointCloud,
    pub tile: IntensityTile,
    pub mask: SemanticMask,
}

/// Derives the layout, sweep and tile of sample `seed`, each from its own sub-seed.
pub fn generate_sample(seed: u64, preset: &ScenePreset) -> Result<SceneSample> {
    let layout = generate_scene(seed, &preset.grid, &preset.difficulty)?;
    let points = simulate_sweep(&layout, &preset.sensor, sub_seed(seed, 1))?;
    let tile = render_intensity_tile(&layout, &preset.grid, &preset.sensor, sub_seed(seed, 2))?;
    let mask = rasterize_gt(&layout, &preset.grid, preset.gt_line_width)?;
    Ok(SceneSample {
        seed,
        layout,
        points,
        tile,
        mask,
    })
}

/// Decorrelated child seed (SplitMix64 finalizer).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn divider_layout(grid: &BevGrid) -> SceneLayout {
        let ext = grid.extent();
        let mut l = SceneLayout::empty(ext);
        l.dividers.push(LaneDivider {
            line: Polyline(vec![Vec2::new(ext.x_min, 0.0), Vec2::new(ext.x_max, 0.0)]),
            dashed: false,
        });
        l
    }

    #[test]
    fn same_seed_gives_identical_layout_bytes() {
        let g = BevGrid::desk();
        let d = DifficultyConfig::default();
        let a = serde_json::to_vec(&generate_scene(7, &g, &d).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_scene(7, &g, &d).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_crossing_range_forces_no_crossings() {
        let g = BevGrid::desk();
        let d = DifficultyConfig {
            crossing_count: Interval::new(0, 0),
            crossing_prob: 1.0,
            ..Default::default()
        };
        for seed in 0..20 {
            assert!(generate_scene(seed, &g, &d).unwrap().crossings.is_empty());
        }
    }

    #[test]
    fn degenerate_extent_is_a_config_error() {
        let g = BevGrid {
            rows: 0,
            ..BevGrid::desk()
        };
        assert!(matches!(
            generate_scene(1, &g, &DifficultyConfig::default()),
            Err(Error::Config(_))
        ));
        let bad = DifficultyConfig {
            lane_count: Interval::new(3, 2),
            ..Default::default()
        };
        assert!(generate_scene(1, &BevGrid::desk(), &bad).is_err());
    }

    #[test]
    fn empty_layout_rasterizes_to_background() {
        let g = BevGrid::desk();
        let m = rasterize_gt(&SceneLayout::empty(g.extent()), &g, 0.3).unwrap();
        assert!(m.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn horizontal_divider_covers_exactly_the_two_straddling_rows() {
        let g = BevGrid::desk();
        let m = rasterize_gt(&divider_layout(&g), &g, 2.0 * g.resolution).unwrap();
        // y = 0 lies between rows 31 and 32.
        for r in 0..g.rows {
            for c in 0..g.cols {
                let expect = if r == 31 || r == 32 { 1 } else { 0 };
                assert_eq!(m.get(r, c), expect, "row {r} col {c}");
            }
        }
    }

    #[test]
    fn crossing_wins_over_divider() {
        let g = BevGrid::desk();
        let mut l = divider_layout(&g);
        l.crossings.push(Polygon(vec![
            Vec2::new(-1.0, -2.0),
            Vec2::new(1.0, -2.0),
            Vec2::new(1.0, 2.0),
            Vec2::new(-1.0, 2.0),
        ]));
        let m = rasterize_gt(&l, &g, 0.3).unwrap();
        let (r, c) = g.cell_of(0.0, 0.05).unwrap();
        assert_eq!(m.get(r, c), MapClass::Crossing as u8);
        let (r, c) = g.cell_of(5.0, 0.05).unwrap();
        assert_eq!(m.get(r, c), MapClass::Divider as u8);
    }

    #[test]
    fn full_dropout_gives_empty_sweep() {
        let g = BevGrid::desk();
        let layout = generate_scene(3, &g, &DifficultyConfig::default()).unwrap();
        let s = SensorModel {
            dropout_rate: 1.0,
            ..Default::default()
        };
        assert!(simulate_sweep(&layout, &s, 1).unwrap().is_empty());
    }

    #[test]
    fn noiseless_marking_points_have_the_marking_mean() {
        let g = BevGrid::desk();
        let layout = generate_scene(
            11,
            &g,
            &DifficultyConfig {
                divider_prob: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        let s = SensorModel::default().noiseless();
        let cloud = simulate_sweep(&layout, &s, 5).unwrap();
        let mut seen = 0;
        for p in &cloud.points {
            if p.z == 0.0 && layout.is_marking(Vec2::new(p.x, p.y)) {
                assert_eq!(p.reflectance, s.marking_reflectance.mean);
                seen += 1;
            } else {
                assert_eq!(p.reflectance, s.asphalt_reflectance.mean);
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn sweep_density_decays_with_range() {
        let g = BevGrid::desk();
        let layout = SceneLayout::empty(g.extent());
        let cloud = simulate_sweep(&layout, &SensorModel::default(), 1).unwrap();
        let ring = |lo: f64, hi: f64| {
            let n = cloud
                .points
                .iter()
                .filter(|p| (lo..hi).contains(&p.x.hypot(p.y)))
                .count() as f64;
            n / (std::f64::consts::PI * (hi * hi - lo * lo))
        };
        assert!(ring(3.0, 4.5) > ring(6.0, 9.0));
    }

    #[test]
    fn empty_noiseless_tile_is_constant_asphalt() {
        let g = BevGrid::desk();
        let s = SensorModel::default().noiseless();
        let t = render_intensity_tile(&SceneLayout::empty(g.extent()), &g, &s, 3).unwrap();
        assert!(t
            .values
            .iter()
            .all(|&v| v == s.asphalt_reflectance.mean as f32));
    }

    #[test]
    fn tile_brightest_rows_match_rasterized_divider() {
        let g = BevGrid::desk();
        let layout = divider_layout(&g);
        let tile = render_intensity_tile(&layout, &g, &SensorModel::default(), 9).unwrap();
        let mask = rasterize_gt(&layout, &g, 2.0 * g.resolution).unwrap();
        let row_mean =
            |r: usize| (0..g.cols).map(|c| tile.get(r, c) as f64).sum::<f64>() / g.cols as f64;
        let mut rows: Vec<usize> = (0..g.rows).collect();
        rows.sort_by(|&a, &b| row_mean(b).partial_cmp(&row_mean(a)).unwrap());
        let mut top = rows[..2].to_vec();
        top.sort();
        let gt_rows: Vec<usize> = (0..g.rows).filter(|&r| mask.get(r, 0) == 1).collect();
        assert_eq!(top, gt_rows);
    }

    #[test]
    fn tiles_and_sweeps_are_deterministic() {
        let p = ScenePreset::desk();
        let a = generate_sample(5, &p).unwrap();
        let b = generate_sample(5, &p).unwrap();
        assert_eq!(a.tile, b.tile);
        assert_eq!(a.points, b.points);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.tile.grid, a.mask.grid);
    }
}
