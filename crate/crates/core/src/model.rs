//! The LiDAR student, the intensity+LiDAR teacher, and the ablation variants.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{BevDecoder, DecoderConfig};
use crate::distill::{feature_distill_loss, logit_distill_loss};
use crate::error::{Error, Result};
use crate::fusion::{ConcatFusion, Pgxmf};
use crate::graph::{Graph, Var};
use crate::grid::{BevGrid, IntensityTile, PointCloud};
use crate::intensity_encoder::{pad_to_32, Fpn, IntensityEncoder, IntensityEncoderConfig};
use crate::lidar_encoder::{LidarEncoder, LidarEncoderConfig, Voxels};
use crate::losses::{seg_loss, LossComponents, LossWeights};
use crate::nn::Builder;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::synth::sub_seed;
use crate::tensor::Tensor;

pub const STUDENT_PREFIX: &str = "student";
pub const TEACHER_PREFIX: &str = "teacher";

/// Which parts of the distillation scheme are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// LiDAR student alone.
    Baseline,
    /// Concatenation teacher with logit distillation.
    Ld,
    /// Adds feature distillation.
    LdDd,
    /// Adds position-guided fusion in the teacher.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Ld, Variant::LdDd, Variant::Full];

    pub fn has_teacher(self) -> bool {
        self != Variant::Baseline
    }

    pub fn feature_distill(self) -> bool {
        matches!(self, Variant::LdDd | Variant::Full)
    }

    pub fn position_guided(self) -> bool {
        self == Variant::Full
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ld => "ld",
            Variant::LdDd => "ld_dd",
            Variant::Full => "full",
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {name:?} (baseline, ld, ld_dd, full)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: BevGrid,
    pub variant: Variant,
    pub lidar: LidarEncoderConfig,
    pub intensity: IntensityEncoderConfig,
    pub decoder: DecoderConfig,
    /// Channel reduction inside the attentional fusion bottlenecks.
    pub fusion_ratio: usize,
}

impl ModelConfig {
    /// Full-width networks on the 200 × 400 grid.
    pub fn paper() -> Self {
        Self {
            grid: BevGrid::paper(),
            variant: Variant::Full,
            lidar: LidarEncoderConfig::default(),
            intensity: IntensityEncoderConfig::default(),
            decoder: DecoderConfig {
                depth: 6,
                ..DecoderConfig::default()
            },
            fusion_ratio: 4,
        }
    }

    /// Narrow networks on the 64 × 128 grid, sized for single-core CPU training.
    pub fn desk() -> Self {
        Self {
            grid: BevGrid::desk(),
            variant: Variant::Full,
            lidar: LidarEncoderConfig {
                pillar_channels: 16,
                backbone_widths: vec![16, 32, 64],
                up_channels: 16,
                bev_channels: 32,
                z_clip: (-3.0, 3.0),
            },
            intensity: IntensityEncoderConfig {
                stem_channels: 8,
                stage_widths: [16, 32, 64, 64],
                fpn_channels: 32,
                bev_channels: 32,
            },
            decoder: DecoderConfig {
                depth: 3,
                base_channels: 32,
                max_channels: 128,
            },
            fusion_ratio: 4,
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

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.lidar.bev_channels != self.intensity.bev_channels {
            return Err(Error::Config(format!(
                "lidar and intensity BEV widths differ ({} vs {})",
                self.lidar.bev_channels, self.intensity.bev_channels
            )));
        }
        if self.decoder.depth < 2 {
            return Err(Error::Config(format!(
                "decoder depth must be ≥ 2, got {}",
                self.decoder.depth
            )));
        }
        let need = 1usize << (self.decoder.depth - 1);
        if self.grid.rows < need || self.grid.cols < need {
            return Err(Error::Config(format!(
                "{}×{} grid is too small for decoder depth {}",
                self.grid.rows, self.grid.cols, self.decoder.depth
            )));
        }
        if self.fusion_ratio == 0 {
            return Err(Error::Config("fusion_ratio must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Padded tile size fed to the intensity encoder.
    pub fn tile_dims(&self) -> (usize, usize) {
        (pad_to_32(self.grid.rows), pad_to_32(self.grid.cols))
    }
}

/// LiDAR encoder and decoder: everything inference needs.
#[derive(Clone, Debug)]
pub struct Student {
    pub encoder: LidarEncoder,
    pub decoder: BevDecoder,
}

#[derive(Clone, Debug)]
pub enum TeacherFusion {
    Concat(ConcatFusion),
    PositionGuided(Pgxmf),
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub encoder: IntensityEncoder,
    pub fpn: Fpn,
    pub fusion: TeacherFusion,
    pub decoder: BevDecoder,
}

/// Outputs of one branch.
pub struct BranchForward {
    /// Low-level guide of the distillation cascade.
    pub low: Var,
    pub bev: Var,
    pub scales: Vec<Var>,
    pub logits: Var,
}

pub struct ModelForward {
    pub student: BranchForward,
    pub teacher: Option<BranchForward>,
}

impl Student {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 11));
        let mut b = Builder::new(store, &mut rng, STUDENT_PREFIX);
        let encoder = LidarEncoder::new(&mut b.sub("encoder"), config.grid, &config.lidar)?;
        let decoder = BevDecoder::new(
            &mut b.sub("decoder"),
            config.lidar.bev_channels,
            &config.decoder,
        )?;
        Ok(Self { encoder, decoder })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        voxels: &[&Voxels],
    ) -> Result<BranchForward> {
        let feats = self.encoder.forward(g, store, voxels)?;
        let dec = self.decoder.decode_multiscale(g, store, feats.bev)?;
        Ok(BranchForward {
            low: feats.low,
            bev: feats.bev,
            scales: dec.scales,
            logits: dec.logits,
        })
    }
}

impl Teacher {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 12));
        let mut b = Builder::new(store, &mut rng, TEACHER_PREFIX);
        let c = config.intensity.bev_channels;
        let encoder = IntensityEncoder::new(&mut b.sub("encoder"), &config.intensity);
        let fpn = Fpn::new(&mut b.sub("fpn"), &config.intensity);
        let fusion = if config.variant.position_guided() {
            TeacherFusion::PositionGuided(Pgxmf::new(&mut b.sub("pgxmf"), c, config.fusion_ratio))
        } else {
            TeacherFusion::Concat(ConcatFusion::new(&mut b.sub("concat"), c))
        };
        let decoder = BevDecoder::new(&mut b.sub("decoder"), c, &config.decoder)?;
        Ok(Self {
            encoder,
            fpn,
            fusion,
            decoder,
        })
    }

    /// `tiles: [n, 1, H, W]` padded to multiples of 32; `lidar_bev` is the student's BEV map.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        tiles: Var,
        lidar_bev: Var,
    ) -> Result<BranchForward> {
        let [_, _, h, w] = g.value(lidar_bev).dims4();
        let feats = self.encoder.extract_multiscale(g, store, tiles)?;
        let intensity = self.fpn.fuse(g, store, &feats.pyramid, (h, w), (h, w));
        let fused = match &self.fusion {
            TeacherFusion::Concat(f) => f.forward(g, store, lidar_bev, intensity)?,
            TeacherFusion::PositionGuided(f) => f.forward(g, store, lidar_bev, intensity)?.out,
        };
        let dec = self.decoder.decode_multiscale(g, store, fused)?;
        let low = g.crop(feats.stem, h, w);
        Ok(BranchForward {
            low,
            bev: fused,
            scales: dec.scales,
            logits: dec.logits,
        })
    }
}

/// Student plus (for distillation variants) teacher, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct LieModel {
    pub config: ModelConfig,
    pub student: Student,
    pub teacher: Option<Teacher>,
}

impl LieModel {
    /// Registers all parameters in `store`. The student's initialization
    /// depends only on `seed`, not on the variant.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        let student = Student::new(store, config, seed)?;
        let teacher = if config.variant.has_teacher() {
            Some(Teacher::new(store, config, seed)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            student,
            teacher,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        voxels: &[&Voxels],
        tiles: Option<Var>,
    ) -> Result<ModelForward> {
        let student = self.student.forward(g, store, voxels)?;
        let teacher = match (&self.teacher, tiles) {
            (Some(t), Some(tiles)) => Some(t.forward(g, store, tiles, student.bev)?),
            (Some(_), None) => {
                return Err(Error::Contract(
                    "teacher forward needs intensity tiles".into(),
                ))
            }
            (None, _) => None,
        };
        Ok(ModelForward { student, teacher })
    }

    /// Training objective of the configured variant.
    pub fn objective<T: Scalar>(
        &self,
        g: &Graph<T>,
        out: &ModelForward,
        labels: Rc<Vec<u8>>,
        weights: &LossWeights,
    ) -> Result<(Var, LossComponents)> {
        weights.validate()?;
        let v = |x: Var| g.value(x).data()[0].f64();
        let seg = seg_loss(g, out.student.logits, labels.clone())?;
        let mut comps = LossComponents {
            seg: v(seg),
            ..LossComponents::default()
        };
        let Some(t) = &out.teacher else {
            comps.total = comps.seg;
            return Ok((seg, comps));
        };
        let fusion_seg = seg_loss(g, t.logits, labels)?;
        let logit = logit_distill_loss(g, t.logits, out.student.logits)?;
        let mut terms = vec![g.add(fusion_seg, seg), g.scale(logit, T::of(weights.beta))];
        comps.fusion_seg = v(fusion_seg);
        comps.logit = v(logit);
        if self.config.variant.feature_distill() {
            let feature =
                feature_distill_loss(g, &t.scales, &out.student.scales, t.low, out.student.low)?;
            comps.feature = v(feature);
            terms.push(g.scale(feature, T::of(weights.alpha)));
        }
        let total = g.add_n(&terms);
        comps.total = v(total);
        Ok((total, comps))
    }
}

/// Zero-padded `[n, 1, H, W]` tile batch.
pub fn tile_batch<T: Scalar>(tiles: &[&IntensityTile], dims: (usize, usize)) -> Result<Tensor<T>> {
    let (ph, pw) = dims;
    let mut data = vec![T::zero(); tiles.len() * ph * pw];
    for (b, t) in tiles.iter().enumerate() {
        let (h, w) = (t.grid.rows, t.grid.cols);
        if h > ph || w > pw {
            return Err(Error::Contract(format!(
                "{h}×{w} tile exceeds padded size {ph}×{pw}"
            )));
        }
        for r in 0..h {
            for c in 0..w {
                data[b * ph * pw + r * pw + c] = T::of(t.get(r, c) as f64);
            }
        }
    }
    Ok(Tensor::from_vec(&[tiles.len(), 1, ph, pw], data))
}

/// Student-only prediction for one cloud: `(labels, probs [4, h, w])`.
pub fn predict<T: Scalar>(
    student: &Student,
    store: &ParamStore<T>,
    cloud: &PointCloud,
) -> Result<(Vec<u8>, Tensor<T>)> {
    let voxels = student.encoder.voxelize(cloud);
    let g = Graph::inference();
    let out = student.forward(&g, store, &[&voxels])?;
    let logits = g.value(out.logits);
    let labels = crate::decoder::argmax_channels(&logits);
    let [_, c, h, w] = logits.dims4();
    let probs = crate::decoder::segment_probs(&logits).reshape(&[c, h, w]);
    Ok((labels, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Frame, Point};

    fn tiny(variant: Variant) -> ModelConfig {
        let grid = BevGrid::from_extent((-1.6, 1.6), (-0.8, 0.8), 0.1).unwrap();
        ModelConfig {
            grid,
            variant,
            lidar: LidarEncoderConfig {
                pillar_channels: 4,
                backbone_widths: vec![4, 8],
                up_channels: 4,
                bev_channels: 6,
                z_clip: (-3.0, 3.0),
            },
            intensity: IntensityEncoderConfig {
                stem_channels: 2,
                stage_widths: [4, 4, 6, 6],
                fpn_channels: 4,
                bev_channels: 6,
            },
            decoder: DecoderConfig {
                depth: 2,
                base_channels: 6,
                max_channels: 12,
            },
            fusion_ratio: 2,
        }
    }

    fn cloud(n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|i| {
                    let f = i as f64 / n as f64;
                    Point {
                        x: -1.5 + 3.0 * f,
                        y: (f * 17.0).sin() * 0.7,
                        z: -1.8,
                        reflectance: f,
                        t: 0.0,
                    }
                })
                .collect(),
        )
    }

    #[test]
    fn presets_validate_and_widths_match() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        assert_eq!(ModelConfig::paper().tile_dims(), (224, 416));
        let mut bad = ModelConfig::desk();
        bad.intensity.bev_channels = 8;
        assert!(bad.validate().is_err());
        assert_eq!(Variant::by_name("ld_dd").unwrap(), Variant::LdDd);
    }

    #[test]
    fn student_initialization_does_not_depend_on_variant() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        LieModel::new(&mut a, &tiny(Variant::Baseline), 5).unwrap();
        LieModel::new(&mut b, &tiny(Variant::Full), 5).unwrap();
        for e in a.entries() {
            let id = b.get(&e.name).unwrap();
            assert_eq!(*b.value(id), e.value, "{}", e.name);
        }
        assert!(b.entries().iter().any(|e| e.name.starts_with("teacher.")));
        assert!(a.entries().iter().all(|e| e.name.starts_with("student.")));
    }

    #[test]
    fn every_variant_runs_forward_and_backward() {
        let cfg0 = tiny(Variant::Full);
        let tile = IntensityTile::filled(cfg0.grid, 0.3, Frame::Ego);
        let clouds = [cloud(200), cloud(50)];
        for variant in Variant::ALL {
            let cfg = ModelConfig {
                variant,
                ..cfg0.clone()
            };
            let mut store = ParamStore::<f32>::new();
            let model = LieModel::new(&mut store, &cfg, 1).unwrap();
            let voxels: Vec<Voxels> = clouds
                .iter()
                .map(|c| model.student.encoder.voxelize(c))
                .collect();
            let refs: Vec<&Voxels> = voxels.iter().collect();
            let g = Graph::new(true);
            let tiles = g.constant(tile_batch(&[&tile, &tile], cfg.tile_dims()).unwrap());
            let out = model.forward(&g, &store, &refs, Some(tiles)).unwrap();
            let labels = Rc::new(
                (0..2 * cfg.grid.num_cells())
                    .map(|i| (i % 4) as u8)
                    .collect::<Vec<u8>>(),
            );
            let (loss, comps) = model
                .objective(&g, &out, labels, &LossWeights::default())
                .unwrap();
            assert!(comps.total.is_finite() && comps.total > 0.0);
            assert_eq!(
                comps.feature > 0.0,
                variant.feature_distill(),
                "{variant:?}"
            );
            let grads = g.backward(loss);
            assert!(grads
                .param_grads()
                .any(|(id, gr)| store.name(id).starts_with("student.") && gr.is_some()));
        }
    }

    #[test]
    fn empty_cloud_predicts_finite_probabilities() {
        let cfg = tiny(Variant::Baseline);
        let mut store = ParamStore::<f32>::new();
        let model = LieModel::new(&mut store, &cfg, 2).unwrap();
        let (labels, probs) = predict(&model.student, &store, &PointCloud::default()).unwrap();
        assert_eq!(labels.len(), cfg.grid.num_cells());
        assert!(probs.all_finite());
    }
}
