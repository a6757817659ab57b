//! Position-guided cross-modal fusion: position encoding of both BEV maps and
//! attentional feature fusion.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm, Builder, Conv2d, ConvBnRelu};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[2, h, w]`: normalized cell-centre x (columns) then y (rows) in `[-1, 1]`.
pub fn position_embedding<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    // (2i + 1 − n) / n keeps mirrored cells exact negations of each other.
    let coord = |i: usize, n: usize| T::of((2.0 * i as f64 + 1.0 - n as f64) / n as f64);
    let hw = h * w;
    Tensor::from_fn(&[2, h, w], |k| {
        let (ch, r, c) = (k / hw, (k / w) % h, k % w);
        if ch == 0 {
            coord(c, w)
        } else {
            coord(r, h)
        }
    })
}

/// Concatenates the position embedding and maps back to the input width with a 3×3 convolution.
#[derive(Clone, Debug)]
pub struct PositionEncoder {
    pub conv: Conv2d,
}

impl PositionEncoder {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        Self {
            conv: Conv2d::new(&mut b.sub("conv"), channels + 2, channels, 3, 1, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let [n, _, h, w] = g.value(x).dims4();
        let pe = position_embedding::<T>(h, w);
        let batch: Vec<T> = (0..n).flat_map(|_| pe.data().iter().copied()).collect();
        let pe = g.constant(Tensor::from_vec(&[n, 2, h, w], batch));
        let cat = g.concat_channels(&[x, pe]);
        self.conv.forward(g, store, cat)
    }
}

/// 1×1 conv → BN → ReLU → 1×1 conv.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: Conv2d,
    pub bn: BatchNorm,
    pub expand: Conv2d,
}

impl Bottleneck {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize, ratio: usize) -> Self {
        let mid = (channels / ratio).max(1);
        Self {
            reduce: Conv2d::new(&mut b.sub("reduce"), channels, mid, 1, 1, true),
            bn: BatchNorm::new(&mut b.sub("bn"), mid),
            expand: Conv2d::new(&mut b.sub("expand"), mid, channels, 1, 1, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.reduce.forward(g, store, x);
        let y = g.relu(self.bn.forward(g, store, y));
        self.expand.forward(g, store, y)
    }
}

/// Attentional feature fusion: `M = σ(L(x+y) + G(x+y))`, `out = M·x + (1−M)·y`.
#[derive(Clone, Debug)]
pub struct Aff {
    pub local: Bottleneck,
    pub global: Bottleneck,
}

pub struct Fused {
    pub out: Var,
    /// Gate applied to the first (LiDAR) input.
    pub gate: Var,
}

impl Aff {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize, ratio: usize) -> Self {
        Self {
            local: Bottleneck::new(&mut b.sub("local"), channels, ratio),
            global: Bottleneck::new(&mut b.sub("global"), channels, ratio),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        y: Var,
    ) -> Result<Fused> {
        let (sx, sy) = (g.shape(x), g.shape(y));
        if sx != sy {
            return Err(Error::Contract(format!(
                "fusion inputs differ in shape: {sx:?} vs {sy:?}"
            )));
        }
        let s = g.add(x, y);
        let l = self.local.forward(g, store, s);
        let gl = self.global.forward(g, store, g.global_avg_pool(s));
        let gate = g.sigmoid(g.broadcast_add(l, gl));
        // M·x + (1−M)·y = y + M·(x − y)
        let out = g.add(y, g.mul(gate, g.sub(x, y)));
        Ok(Fused { out, gate })
    }
}

/// Concatenation followed by a 3×3 ConvBnRelu; the teacher fusion of the LD and LD+DD variants.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub conv: ConvBnRelu,
}

impl ConcatFusion {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        Self {
            conv: ConvBnRelu::new(&mut b.sub("conv"), 2 * channels, channels, 3, 1),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        y: Var,
    ) -> Result<Var> {
        let (sx, sy) = (g.shape(x), g.shape(y));
        if sx != sy {
            return Err(Error::Contract(format!(
                "fusion inputs differ in shape: {sx:?} vs {sy:?}"
            )));
        }
        let cat = g.concat_channels(&[x, y]);
        Ok(self.conv.forward(g, store, cat))
    }
}

/// Position encoders for both branches plus AFF.
#[derive(Clone, Debug)]
pub struct Pgxmf {
    pub lidar_pe: PositionEncoder,
    pub intensity_pe: PositionEncoder,
    pub aff: Aff,
}

impl Pgxmf {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize, ratio: usize) -> Self {
        Self {
            lidar_pe: PositionEncoder::new(&mut b.sub("lidar_pe"), channels),
            intensity_pe: PositionEncoder::new(&mut b.sub("intensity_pe"), channels),
            aff: Aff::new(&mut b.sub("aff"), channels, ratio),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        lidar: Var,
        intensity: Var,
    ) -> Result<Fused> {
        let x = self.lidar_pe.forward(g, store, lidar);
        let y = self.intensity_pe.forward(g, store, intensity);
        self.aff.forward(g, store, x, y)
    }
}
