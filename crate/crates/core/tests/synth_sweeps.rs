//! Large seed sweeps over the scene generator and sensor simulator.

use lie_core::grid::BevGrid;
use lie_core::synth::{generate_scene, simulate_sweep, sub_seed, DifficultyConfig, ScenePreset, SensorModel};

#[test]
fn thousand_desk_layouts_satisfy_every_invariant() {
    let grid = BevGrid::desk();
    let cfg = DifficultyConfig::default();
    for seed in 0..1000 {
        let layout = generate_scene(seed, &grid, &cfg).unwrap();
        if let Err(e) = layout.validate() {
            panic!("seed {seed}: {e}");
        }
    }
}

#[test]
fn paper_layouts_satisfy_every_invariant() {
    let preset = ScenePreset::paper();
    for seed in 0..200 {
        let layout = generate_scene(seed, &preset.grid, &preset.difficulty).unwrap();
        if let Err(e) = layout.validate() {
            panic!("seed {seed}: {e}");
        }
    }
}

#[derive(Default)]
struct Moments {
    n: f64,
    sum: f64,
    sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sq += v * v;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n
    }

    fn var(&self) -> f64 {
        (self.sq - self.sum * self.sum / self.n) / (self.n - 1.0)
    }
}

#[test]
fn marking_returns_are_brighter_over_500_sweeps() {
    let preset = ScenePreset::desk();
    let sensor = SensorModel::default();
    let (mut marking, mut other) = (Moments::default(), Moments::default());
    for seed in 0..500u64 {
        let layout = generate_scene(seed, &preset.grid, &preset.difficulty).unwrap();
        let cloud = simulate_sweep(&layout, &sensor, sub_seed(seed, 1)).unwrap();
        for p in &cloud.points {
            if layout.is_marking(lie_core::geometry::Vec2::new(p.x, p.y)) {
                marking.push(p.reflectance);
            } else {
                other.push(p.reflectance);
            }
        }
    }
    assert!(marking.n > 1000.0, "only {} marking returns", marking.n);
    // One-sided Welch z-test; 2.326 is the 99% normal quantile.
    let z = (marking.mean() - other.mean()) / (marking.var() / marking.n + other.var() / other.n).sqrt();
    assert!(z > 2.326, "z = {z}");
}
