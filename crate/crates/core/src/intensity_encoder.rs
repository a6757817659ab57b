//! Teacher branch encoder: a four-stage residual CNN over the intensity tile
//! producing C2–C5, fused top-down by a feature pyramid into one BEV map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm, Builder, Conv2d, ConvBnRelu};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// `relu(x + bn(conv(relu(bn(conv(x))))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: ConvBnRelu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

impl ResBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, ch: usize) -> Self {
        Self {
            conv1: ConvBnRelu::new(&mut b.sub("conv1"), ch, ch, 3, 1),
            conv2: Conv2d::new(&mut b.sub("conv2"), ch, ch, 3, 1, false),
            bn2: BatchNorm::new(&mut b.sub("bn2"), ch),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.conv1.forward(g, store, x);
        let y = self.bn2.forward(g, store, self.conv2.forward(g, store, y));
        g.relu(g.add(x, y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityEncoderConfig {
    /// Full-resolution stem width.
    pub stem_channels: usize,
    /// Widths of C2..C5.
    pub stage_widths: [usize; 4],
    /// Pyramid width shared by every lateral.
    pub fpn_channels: usize,
    pub bev_channels: usize,
}

impl Default for IntensityEncoderConfig {
    fn default() -> Self {
        Self {
            stem_channels: 32,
            stage_widths: [64, 128, 256, 512],
            fpn_channels: 128,
            bev_channels: 128,
        }
    }
}

/// C2..C5, each `[n, c_i, h/2^i, w/2^i]`.
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

pub struct IntensityFeatures {
    pub pyramid: FeaturePyramid,
    /// Stem output `[n, stem, h, w]`, the teacher's low-level guide.
    pub stem: Var,
}

#[derive(Clone, Debug)]
pub struct IntensityEncoder {
    pub stem: ConvBnRelu,
    /// Stage 1 halves twice, later stages once.
    pub downs: Vec<Vec<ConvBnRelu>>,
    pub blocks: Vec<ResBlock>,
    pub config: IntensityEncoderConfig,
}

/// Smallest multiple of 32 at or above `v`.
pub fn pad_to_32(v: usize) -> usize {
    v.div_ceil(32) * 32
}

impl IntensityEncoder {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, config: &IntensityEncoderConfig) -> Self {
        let stem = ConvBnRelu::new(&mut b.sub("stem"), 1, config.stem_channels, 3, 1);
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        let mut prev = config.stem_channels;
        for (i, &w) in config.stage_widths.iter().enumerate() {
            let mut s = b.sub(&format!("stage{}", i + 2));
            let mut d = vec![ConvBnRelu::new(&mut s.sub("down0"), prev, w, 3, 2)];
            if i == 0 {
                d.push(ConvBnRelu::new(&mut s.sub("down1"), w, w, 3, 2));
            }
            downs.push(d);
            blocks.push(ResBlock::new(&mut s.sub("block"), w));
            prev = w;
        }
        Self {
            stem,
            downs,
            blocks,
            config: config.clone(),
        }
    }

    /// `tile: [n, 1, h, w]` with `h` and `w` divisible by 32.
    pub fn extract_multiscale<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        tile: Var,
    ) -> Result<IntensityFeatures> {
        let [_, ch, h, w] = g.value(tile).dims4();
        if ch != 1 {
            return Err(Error::Contract(format!(
                "intensity tile must have one channel, got {ch}"
            )));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "intensity tile {h}×{w} is not divisible by 32; pad it first"
            )));
        }
        let stem = self.stem.forward(g, store, tile);
        let mut x = stem;
        let mut levels = Vec::with_capacity(4);
        for (downs, block) in self.downs.iter().zip(&self.blocks) {
            for d in downs {
                x = d.forward(g, store, x);
            }
            x = block.forward(g, store, x);
            levels.push(x);
        }
        let levels: [Var; 4] = levels.try_into().expect("four stages");
        Ok(IntensityFeatures {
            pyramid: FeaturePyramid { levels },
            stem,
        })
    }
}

/// Top-down pyramid: 1×1 laterals, nearest upsampling and addition, a 3×3
/// output convolution at C2 resolution, then resampling to the BEV grid.
#[derive(Clone, Debug)]
pub struct Fpn {
    pub laterals: Vec<Conv2d>,
    pub output: Conv2d,
}

impl Fpn {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, config: &IntensityEncoderConfig) -> Self {
        let laterals = config
            .stage_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                Conv2d::new(
                    &mut b.sub(&format!("lateral{}", i + 2)),
                    w,
                    config.fpn_channels,
                    1,
                    1,
                    true,
                )
            })
            .collect();
        let output = Conv2d::new(
            &mut b.sub("output"),
            config.fpn_channels,
            config.bev_channels,
            3,
            1,
            true,
        );
        Self { laterals, output }
    }

    /// Fused `[n, c_bev, out_h, out_w]`. `valid` is the unpadded tile size at
    /// full resolution; padding is cropped away before the final resampling.
    pub fn fuse<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        pyramid: &FeaturePyramid,
        valid: (usize, usize),
        out: (usize, usize),
    ) -> Var {
        let mut top: Option<Var> = None;
        for (level, lat) in pyramid.levels.iter().zip(&self.laterals).rev() {
            let l = lat.forward(g, store, *level);
            top = Some(match top {
                None => l,
                Some(t) => {
                    let [_, _, h, w] = g.value(l).dims4();
                    g.add(l, g.resize_nearest(t, h, w))
                }
            });
        }
        let p2 = self.output.forward(g, store, top.expect("four levels"));
        let full = g.upsample(p2, 4);
        let cropped = g.crop(full, valid.0, valid.1);
        g.resize_nearest(cropped, out.0, out.1)
    }
}
