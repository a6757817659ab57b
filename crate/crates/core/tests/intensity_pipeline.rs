use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lie_core::geometry::{Polygon, Polyline, Rect, Vec2};
use lie_core::grid::{BevGrid, Frame, Point, PointCloud, Pose2D};
use lie_core::intensity_map::{accumulate_scans, dilate, filter_ground, rasterize_intensity};
use lie_core::synth::{generate_scene, simulate_sweep, DifficultyConfig, SceneLayout, SensorModel};

fn pt(x: f64, y: f64, z: f64) -> Point {
    Point { x, y, z, reflectance: 0.5, t: 0.0 }
}

#[test]
fn planted_poles_are_removed_and_ground_is_kept() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ground_z = |x: f64, y: f64| 0.05 * x + 0.03 * y;
    let mut points = Vec::new();
    for _ in 0..40_000 {
        let (x, y) = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        points.push(pt(x, y, ground_z(x, y) + rng.gen_range(-0.03..0.03)));
    }
    let ground = points.len();
    for _ in 0..60 {
        let (cx, cy) = (rng.gen_range(-19.0..19.0), rng.gen_range(-19.0..19.0));
        for _ in 0..30 {
            let (x, y) = (cx + rng.gen_range(-0.1..0.1), cy + rng.gen_range(-0.1..0.1));
            points.push(pt(x, y, ground_z(x, y) + 1.5 + rng.gen_range(0.0..1.0)));
        }
    }
    let poles = points.len() - ground;
    let kept = filter_ground(&PointCloud::new(points), 1.0, 0.3).unwrap();
    let kept_poles = kept.points.iter().filter(|p| p.z > ground_z(p.x, p.y) + 1.0).count();
    let kept_ground = kept.len() - kept_poles;
    assert!(kept_poles as f64 <= 0.01 * poles as f64, "{kept_poles} of {poles} pole points kept");
    assert!(kept_ground as f64 >= 0.99 * ground as f64, "{kept_ground} of {ground} ground points kept");
}

fn transform_layout(layout: &SceneLayout, f: impl Fn(Vec2) -> Vec2) -> SceneLayout {
    let line = |l: &Polyline| Polyline(l.0.iter().map(|&p| f(p)).collect());
    let mut out = layout.clone();
    out.drivable_region = Polygon(layout.drivable_region.0.iter().map(|&p| f(p)).collect());
    out.boundaries = layout.boundaries.iter().map(line).collect();
    out.crossings = layout.crossings.iter().map(|c| Polygon(c.0.iter().map(|&p| f(p)).collect())).collect();
    for d in &mut out.dividers {
        d.line = line(&d.line);
    }
    out.extent = Rect { x_min: -100.0, x_max: 100.0, y_min: -100.0, y_max: 100.0 };
    out
}

#[test]
fn two_poses_of_one_scene_give_overlapping_maps() {
    let grid = BevGrid::from_extent((-60.0, 60.0), (-60.0, 60.0), 0.5).unwrap();
    let layout = transform_layout(&generate_scene(3, &grid, &DifficultyConfig::default()).unwrap(), |p| p);
    let sensor = SensorModel::default().noiseless();
    let pose = Pose2D::new(0.6, -0.4, 0.25);
    let local = transform_layout(&layout, |p| {
        let (x, y) = pose.apply_inverse(p.x, p.y);
        Vec2::new(x, y)
    });
    let a = simulate_sweep(&layout, &sensor, 1).unwrap();
    let b = simulate_sweep(&local, &sensor, 2).unwrap();
    let world = [
        accumulate_scans(&[a], &[Pose2D::identity()]).unwrap(),
        accumulate_scans(&[b], &[pose]).unwrap(),
    ];
    // Annulus both sensors cover densely at 1 m cells.
    let cells = BevGrid::from_extent((-8.0, 8.0), (-8.0, 8.0), 1.0).unwrap();
    let occ: Vec<Vec<bool>> = world
        .iter()
        .map(|w| {
            let mut hit = vec![false; cells.num_cells()];
            for p in &w.points {
                if let Some((r, c)) = cells.cell_of(p.x, p.y) {
                    hit[r * cells.cols + c] = true;
                }
            }
            hit
        })
        .collect();
    let (mut inter, mut union) = (0, 0);
    for r in 0..cells.rows {
        for c in 0..cells.cols {
            let q = cells.cell_center(r, c);
            let near = |x: f64, y: f64| ((q.x - x).powi(2) + (q.y - y).powi(2)).sqrt() < 4.0;
            if near(0.0, 0.0) || near(pose.x, pose.y) || q.norm() > 7.5 {
                continue;
            }
            let (u, v) = (occ[0][r * cells.cols + c], occ[1][r * cells.cols + c]);
            inter += (u && v) as usize;
            union += (u || v) as usize;
        }
    }
    let iou = inter as f64 / union as f64;
    assert!(union > 50 && iou >= 0.9, "IoU {iou} over {union} cells");
}

#[test]
fn rasterization_and_dilation_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = BevGrid::from_extent((0.0, 3.2), (0.0, 3.2), 0.1).unwrap();
    let points: Vec<Point> = (0..5000)
        .map(|_| Point { reflectance: rng.gen(), ..pt(rng.gen_range(-0.5..3.7), rng.gen_range(-0.5..3.7), 0.0) })
        .collect();
    let tile = rasterize_intensity(&PointCloud::new(points.clone()), &grid, Frame::Ego);
    let mut naive = vec![0.0f32; 32 * 32];
    for p in &points {
        if let Some((r, c)) = grid.cell_of(p.x, p.y) {
            naive[r * 32 + c] = naive[r * 32 + c].max(p.reflectance as f32);
        }
    }
    assert_eq!(tile.values, naive);

    let d = dilate(&naive, 32, 32, 2);
    for r in 0..32usize {
        for c in 0..32usize {
            let mut m = 0.0f32;
            for rr in r.saturating_sub(2)..(r + 3).min(32) {
                for cc in c.saturating_sub(2)..(c + 3).min(32) {
                    m = m.max(naive[rr * 32 + cc]);
                }
            }
            assert_eq!(d[r * 32 + c], m, "({r}, {c})");
        }
    }
}
