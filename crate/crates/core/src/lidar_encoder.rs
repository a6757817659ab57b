//! Student branch: dynamic pillar voxelization, the point-wise pillar encoder,
//! pseudo-image scatter and the multi-scale BEV backbone.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grid::{BevGrid, PointCloud};
use crate::nn::{BatchNorm, Builder, ConvBnRelu, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Voxelization-derived decorations per point.
pub const DECORATIONS: usize = 5;
/// Raw point channels `x, y, z, reflectance, t` plus the decorations.
pub const POINT_DIM: usize = 5 + DECORATIONS;

/// Pillar grid over the ground plane; the pillar pitch is the grid resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PillarGridConfig {
    pub grid: BevGrid,
    pub z_clip: (f64, f64),
}

impl PillarGridConfig {
    pub fn new(extent: (f64, f64, f64, f64), pillar_size: f64, z_clip: (f64, f64)) -> Result<Self> {
        let grid = BevGrid::from_extent((extent.0, extent.1), (extent.2, extent.3), pillar_size)?;
        let cfg = Self { grid, z_clip };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_grid(grid: BevGrid) -> Self {
        Self {
            grid,
            z_clip: (-3.0, 3.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.z_clip.0 < self.z_clip.1) {
            return Err(Error::Config(format!(
                "empty z clip range {:?}",
                self.z_clip
            )));
        }
        Ok(())
    }
}

/// Output of [`voxelize_dynamic`]: decorated points grouped into pillars.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Voxels {
    /// Per kept point: `x, y, z, r, t, Δx_c, Δy_c, Δz_c, Δx_p, Δy_p`.
    pub features: Vec<[f64; POINT_DIM]>,
    /// Per kept point, index into `pillars`.
    pub point_pillar: Vec<usize>,
    /// Occupied cells as row-major linear indices, ascending.
    pub pillars: Vec<usize>,
}

impl Voxels {
    pub fn num_points(&self) -> usize {
        self.features.len()
    }

    pub fn num_pillars(&self) -> usize {
        self.pillars.len()
    }

    /// Linear cell index of kept point `i`.
    pub fn cell_of_point(&self, i: usize) -> usize {
        self.pillars[self.point_pillar[i]]
    }
}

/// Assigns every in-extent, z-clipped point to its pillar and decorates it
/// with offsets to the pillar's point centroid and geometric centre.
pub fn voxelize_dynamic(cloud: &PointCloud, config: &PillarGridConfig) -> Voxels {
    let grid = &config.grid;
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        if p.z < config.z_clip.0 || p.z > config.z_clip.1 {
            continue;
        }
        if let Some((r, c)) = grid.cell_of(p.x, p.y) {
            kept.push((i, r * grid.cols + c));
        }
    }
    // cell -> (pillar slot, Σx, Σy, Σz, count)
    let mut sums: BTreeMap<usize, [f64; 4]> = BTreeMap::new();
    for &(i, cell) in &kept {
        let p = &cloud.points[i];
        let s = sums.entry(cell).or_insert([0.0; 4]);
        s[0] += p.x;
        s[1] += p.y;
        s[2] += p.z;
        s[3] += 1.0;
    }
    let pillars: Vec<usize> = sums.keys().copied().collect();
    let slot: BTreeMap<usize, usize> = pillars.iter().enumerate().map(|(k, &c)| (c, k)).collect();
    let mut features = Vec::with_capacity(kept.len());
    let mut point_pillar = Vec::with_capacity(kept.len());
    for &(i, cell) in &kept {
        let p = &cloud.points[i];
        let s = sums[&cell];
        let centre = grid.cell_center(cell / grid.cols, cell % grid.cols);
        features.push([
            p.x,
            p.y,
            p.z,
            p.reflectance,
            p.t,
            p.x - s[0] / s[3],
            p.y - s[1] / s[3],
            p.z - s[2] / s[3],
            p.x - centre.x,
            p.y - centre.y,
        ]);
        point_pillar.push(slot[&cell]);
    }
    Voxels {
        features,
        point_pillar,
        pillars,
    }
}

/// Column-wise maximum of `x: [points, c]` over point groups.
///
/// Every segment must own at least one point.
pub fn segment_max<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    segments: Rc<Vec<usize>>,
    num_segments: usize,
) -> Var {
    let vx = g.value(x);
    let [p, c] = vx.dims2();
    assert_eq!(segments.len(), p, "one segment id per row");
    let mut out = vec![T::neg_infinity(); num_segments * c];
    let mut arg = vec![usize::MAX; num_segments * c];
    for (row, &s) in segments.iter().enumerate() {
        for ch in 0..c {
            let v = vx.data()[row * c + ch];
            let o = s * c + ch;
            if v > out[o] || arg[o] == usize::MAX {
                out[o] = v;
                arg[o] = row;
            }
        }
    }
    assert!(
        arg.iter().all(|&a| a != usize::MAX),
        "segment_max: empty segment"
    );
    let out = Tensor::from_vec(&[num_segments, c], out);
    g.custom_op(&[x], out, move |gr, _| {
        let mut gx = Tensor::zeros(&[p, c]);
        let gd = gx.data_mut();
        for (o, &row) in arg.iter().enumerate() {
            gd[row * c + o % c] += gr.data()[o];
        }
        vec![Some(gx)]
    })
}

/// Writes pillar vectors `[q, c]` into a zero `[n, c, h, w]` pseudo-image at
/// `(sample, cell)` locations.
pub fn scatter_pseudo_image<T: Scalar>(
    g: &Graph<T>,
    pillar_vectors: Var,
    locations: &[(usize, usize)],
    n: usize,
    grid: &BevGrid,
) -> Result<Var> {
    let v = g.value(pillar_vectors);
    let [q, c] = v.dims2();
    if q != locations.len() {
        return Err(Error::Contract(format!(
            "{q} pillar vectors for {} locations",
            locations.len()
        )));
    }
    let hw = grid.num_cells();
    let mut seen = vec![false; n * hw];
    for &(b, cell) in locations {
        if b >= n || cell >= hw {
            return Err(Error::Contract(format!(
                "pillar location ({b}, {cell}) outside {n}×{hw}"
            )));
        }
        if std::mem::replace(&mut seen[b * hw + cell], true) {
            return Err(Error::Contract(format!(
                "pillar ({b}, {cell}) scattered twice"
            )));
        }
    }
    let mut out = Tensor::zeros(&[n, c, grid.rows, grid.cols]);
    {
        let od = out.data_mut();
        for (k, &(b, cell)) in locations.iter().enumerate() {
            for ch in 0..c {
                od[(b * c + ch) * hw + cell] = v.data()[k * c + ch];
            }
        }
    }
    let locs = locations.to_vec();
    Ok(g.custom_op(&[pillar_vectors], out, move |gr, _| {
        let mut gv = Tensor::zeros(&[q, c]);
        let gd = gv.data_mut();
        for (k, &(b, cell)) in locs.iter().enumerate() {
            for ch in 0..c {
                gd[k * c + ch] = gr.data()[(b * c + ch) * hw + cell];
            }
        }
        vec![Some(gv)]
    }))
}

/// Shared point-wise linear map, batch normalization, ReLU, then max per pillar.
#[derive(Clone, Debug)]
pub struct PillarNet {
    pub linear: Linear,
    pub bn: BatchNorm,
    pub channels: usize,
}

impl PillarNet {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        let linear = Linear::new(&mut b.sub("linear"), POINT_DIM, channels, false);
        let bn = BatchNorm::new(&mut b.sub("bn"), channels);
        Self {
            linear,
            bn,
            channels,
        }
    }

    /// Activated per-point features `[points, c]`.
    pub fn point_features<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        points: Var,
    ) -> Var {
        let p = g.shape(points)[0];
        let y = self.linear.forward(g, store, points);
        let y = g.reshape(y, &[p, self.channels, 1, 1]);
        let y = self.bn.forward(g, store, y);
        let y = g.relu(y);
        g.reshape(y, &[p, self.channels])
    }

    /// Per-pillar vectors `[num_pillars, c]`.
    pub fn encode<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        points: Var,
        point_pillar: Rc<Vec<usize>>,
        num_pillars: usize,
    ) -> Var {
        let f = self.point_features(g, store, points);
        segment_max(g, f, point_pillar, num_pillars)
    }
}

/// Stride-2 pyramid whose stages are projected, upsampled back to full
/// resolution and concatenated with the pseudo-image.
#[derive(Clone, Debug)]
pub struct LidarBackbone {
    pub stages: Vec<(ConvBnRelu, ConvBnRelu)>,
    pub lateral: Vec<ConvBnRelu>,
    pub fuse: ConvBnRelu,
}

impl LidarBackbone {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        in_ch: usize,
        widths: &[usize],
        up_ch: usize,
        out_ch: usize,
    ) -> Self {
        let mut stages = Vec::new();
        let mut lateral = Vec::new();
        let mut prev = in_ch;
        for (i, &w) in widths.iter().enumerate() {
            let mut s = b.sub(&format!("stage{i}"));
            let down = ConvBnRelu::new(&mut s.sub("down"), prev, w, 3, 2);
            let conv = ConvBnRelu::new(&mut s.sub("conv"), w, w, 3, 1);
            stages.push((down, conv));
            lateral.push(ConvBnRelu::new(
                &mut b.sub(&format!("lateral{i}")),
                w,
                up_ch,
                1,
                1,
            ));
            prev = w;
        }
        let fuse = ConvBnRelu::new(
            &mut b.sub("fuse"),
            in_ch + up_ch * widths.len(),
            out_ch,
            1,
            1,
        );
        Self {
            stages,
            lateral,
            fuse,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, pseudo: Var) -> Var {
        let [_, _, h, w] = g.value(pseudo).dims4();
        let mut parts = vec![pseudo];
        let mut x = pseudo;
        for ((down, conv), lat) in self.stages.iter().zip(&self.lateral) {
            x = conv.forward(g, store, down.forward(g, store, x));
            let l = lat.forward(g, store, x);
            parts.push(g.resize_nearest(l, h, w));
        }
        let cat = g.concat_channels(&parts);
        self.fuse.forward(g, store, cat)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarEncoderConfig {
    /// Pillar feature width.
    pub pillar_channels: usize,
    pub backbone_widths: Vec<usize>,
    /// Width of each upsampled stage projection.
    pub up_channels: usize,
    pub bev_channels: usize,
    pub z_clip: (f64, f64),
}

impl Default for LidarEncoderConfig {
    fn default() -> Self {
        Self {
            pillar_channels: 64,
            backbone_widths: vec![64, 128, 256],
            up_channels: 64,
            bev_channels: 128,
            z_clip: (-3.0, 3.0),
        }
    }
}

/// Pillar encoder plus backbone.
#[derive(Clone, Debug)]
pub struct LidarEncoder {
    pub pillars: PillarGridConfig,
    pub pillar_net: PillarNet,
    pub backbone: LidarBackbone,
    pub config: LidarEncoderConfig,
}

/// BEV features of the LiDAR branch.
pub struct LidarFeatures {
    /// `[n, c_bev, h, w]`.
    pub bev: Var,
    /// Pre-backbone pseudo-image `[n, c_p, h, w]`.
    pub low: Var,
}

impl LidarEncoder {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        grid: BevGrid,
        config: &LidarEncoderConfig,
    ) -> Result<Self> {
        let pillars = PillarGridConfig {
            grid,
            z_clip: config.z_clip,
        };
        pillars.validate()?;
        if config.backbone_widths.is_empty() {
            return Err(Error::Config(
                "lidar backbone needs at least one stage".into(),
            ));
        }
        let pillar_net = PillarNet::new(&mut b.sub("pillar"), config.pillar_channels);
        let backbone = LidarBackbone::new(
            &mut b.sub("backbone"),
            config.pillar_channels,
            &config.backbone_widths,
            config.up_channels,
            config.bev_channels,
        );
        Ok(Self {
            pillars,
            pillar_net,
            backbone,
            config: config.clone(),
        })
    }

    pub fn voxelize(&self, cloud: &PointCloud) -> Voxels {
        voxelize_dynamic(cloud, &self.pillars)
    }

    /// Pseudo-image `[n, c_p, h, w]` of a batch of voxelized clouds.
    pub fn pseudo_image<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        batch: &[&Voxels],
    ) -> Result<Var> {
        let grid = &self.pillars.grid;
        let n = batch.len();
        let total_points: usize = batch.iter().map(|v| v.num_points()).sum();
        let c = self.config.pillar_channels;
        if total_points == 0 {
            return Ok(g.constant(Tensor::zeros(&[n, c, grid.rows, grid.cols])));
        }
        let mut feats = Vec::with_capacity(total_points * POINT_DIM);
        let mut seg = Vec::with_capacity(total_points);
        let mut locations = Vec::new();
        for (b, v) in batch.iter().enumerate() {
            let base = locations.len();
            for (f, &p) in v.features.iter().zip(&v.point_pillar) {
                feats.extend(f.iter().map(|&x| T::of(x)));
                seg.push(base + p);
            }
            locations.extend(v.pillars.iter().map(|&cell| (b, cell)));
        }
        let points = g.constant(Tensor::from_vec(&[total_points, POINT_DIM], feats));
        let pv = self
            .pillar_net
            .encode(g, store, points, Rc::new(seg), locations.len());
        scatter_pseudo_image(g, pv, &locations, n, grid)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        batch: &[&Voxels],
    ) -> Result<LidarFeatures> {
        let low = self.pseudo_image(g, store, batch)?;
        let bev = self.backbone.forward(g, store, low);
        Ok(LidarFeatures { bev, low })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use crate::grid::Point;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64, z: f64) -> Point {
        Point {
            x,
            y,
            z,
            reflectance: 0.5,
            t: 0.0,
        }
    }

    fn small_cfg() -> PillarGridConfig {
        PillarGridConfig::new((0.0, 1.6, 0.0, 0.8), 0.1, (-1.0, 1.0)).unwrap()
    }

    #[test]
    fn point_at_pillar_centre_has_zero_offsets() {
        let cfg = small_cfg();
        let c = cfg.grid.cell_center(3, 5);
        let v = voxelize_dynamic(&PointCloud::new(vec![pt(c.x, c.y, 0.2)]), &cfg);
        assert_eq!(v.pillars, vec![3 * 16 + 5]);
        assert_eq!(&v.features[0][5..], &[0.0; 5]);
    }

    #[test]
    fn centroid_offsets_are_symmetric() {
        let cfg = small_cfg();
        let c = cfg.grid.cell_center(2, 2);
        let d = 0.02;
        let v = voxelize_dynamic(
            &PointCloud::new(vec![pt(c.x - d, c.y, 0.0), pt(c.x + d, c.y, 0.0)]),
            &cfg,
        );
        assert_eq!(v.num_pillars(), 1);
        assert!((v.features[0][5] + d).abs() < 1e-12);
        assert!((v.features[1][5] - d).abs() < 1e-12);
    }

    #[test]
    fn out_of_extent_and_clipped_points_are_dropped() {
        let cfg = small_cfg();
        let v = voxelize_dynamic(
            &PointCloud::new(vec![
                pt(5.0, 0.1, 0.0),
                pt(0.1, 0.1, 3.0),
                pt(0.1, 0.1, 0.0),
            ]),
            &cfg,
        );
        assert_eq!(v.num_points(), 1);
        assert!(voxelize_dynamic(&PointCloud::default(), &cfg)
            .pillars
            .is_empty());
    }

    fn net(channels: usize) -> (ParamStore<f64>, PillarNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = PillarNet::new(&mut Builder::new(&mut store, &mut rng, "p"), channels);
        (store, net)
    }

    #[test]
    fn max_is_idempotent_under_duplication() {
        let (store, net) = net(6);
        let g = Graph::<f64>::inference();
        let rows = vec![0.3, -0.2, 0.1, 0.5, 0.0, 0.01, 0.02, -0.01, 0.04, 0.03];
        let one = g.constant(Tensor::from_vec(&[1, POINT_DIM], rows.clone()));
        let two = g.constant(Tensor::from_vec(
            &[2, POINT_DIM],
            [rows.clone(), rows].concat(),
        ));
        let a = net.encode(&g, &store, one, Rc::new(vec![0]), 1);
        let b = net.encode(&g, &store, two, Rc::new(vec![0, 0]), 1);
        assert_eq!(*g.value(a), *g.value(b));
        let single = net.point_features(&g, &store, one);
        assert_eq!(*g.value(a), *g.value(single));
    }

    #[test]
    fn scatter_places_vectors_and_rejects_duplicates() {
        let g = Graph::<f64>::inference();
        let grid = small_cfg().grid;
        let v = g.constant(Tensor::from_vec(&[1, 2], vec![1.5, -2.0]));
        let img = scatter_pseudo_image(&g, v, &[(0, 3 * 16 + 5)], 1, &grid).unwrap();
        let t = g.value(img);
        assert_eq!(t.at4(0, 0, 3, 5), 1.5);
        assert_eq!(t.at4(0, 1, 3, 5), -2.0);
        assert_eq!(t.data().iter().filter(|&&x| x != 0.0).count(), 2);
        let two = g.constant(Tensor::from_vec(&[2, 2], vec![1.0; 4]));
        assert!(matches!(
            scatter_pseudo_image(&g, two, &[(0, 1), (0, 1)], 1, &grid),
            Err(Error::Contract(_))
        ));
        let none = g.constant(Tensor::zeros(&[0, 2]));
        let empty = scatter_pseudo_image(&g, none, &[], 1, &grid).unwrap();
        assert!(g.value(empty).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn segment_max_gradient_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[7, 3], |_| rng.gen_range(-1.0..1.0));
        let seg = Rc::new(vec![0, 1, 0, 2, 1, 2, 2]);
        let probe = Tensor::from_fn(&[3, 3], |i| (i as f64 * 0.7).sin());
        let r = check_gradient(&[x], 1e-6, |g, vs| {
            let m = segment_max(g, vs[0], seg.clone(), 3);
            g.sum_all(g.mul(m, g.constant(probe.clone())))
        });
        assert!(r.rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn backbone_keeps_resolution_and_maps_zero_to_zero() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = LidarBackbone::new(
            &mut Builder::new(&mut store, &mut rng, "bb"),
            4,
            &[4, 8, 8],
            4,
            6,
        );
        let g = Graph::<f32>::inference();
        let x = g.constant(Tensor::zeros(&[1, 4, 16, 32]));
        let y = bb.forward(&g, &store, x);
        assert_eq!(g.shape(y), vec![1, 6, 16, 32]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
