//! Multi-level BEV feature pyramid decoder with a 1×1 classification head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grid::NUM_CLASSES;
use crate::nn::{Builder, Conv2d, ConvBnRelu};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    /// Width of the full-resolution level; doubles per level.
    pub base_channels: usize,
    /// Upper bound on any level's width.
    pub max_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 128,
            max_channels: 512,
        }
    }
}

impl DecoderConfig {
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| (self.base_channels << i).min(self.max_channels))
            .collect()
    }
}

pub struct DecoderOutput {
    /// Level `i` is `[n, w_i, ⌈h/2^i⌉, ⌈w/2^i⌉]`.
    pub scales: Vec<Var>,
    /// `[n, 4, h, w]`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct BevDecoder {
    pub encode: Vec<(ConvBnRelu, ConvBnRelu)>,
    pub lateral: Vec<Conv2d>,
    pub merge: Vec<ConvBnRelu>,
    pub head: Conv2d,
    pub config: DecoderConfig,
}

impl BevDecoder {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        in_channels: usize,
        config: &DecoderConfig,
    ) -> Result<Self> {
        if config.depth < 2 {
            return Err(Error::Config(format!(
                "decoder depth must be ≥ 2, got {}",
                config.depth
            )));
        }
        let widths = config.widths();
        let mut encode = Vec::new();
        let mut prev = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let mut s = b.sub(&format!("enc{i}"));
            let stride = if i == 0 { 1 } else { 2 };
            let first = ConvBnRelu::new(&mut s.sub("down"), prev, w, 3, stride);
            let second = ConvBnRelu::new(&mut s.sub("conv"), w, w, 3, 1);
            encode.push((first, second));
            prev = w;
        }
        let mut lateral = Vec::new();
        let mut merge = Vec::new();
        for i in 0..config.depth - 1 {
            lateral.push(Conv2d::new(
                &mut b.sub(&format!("lat{i}")),
                widths[i + 1],
                widths[i],
                1,
                1,
                false,
            ));
            merge.push(ConvBnRelu::new(
                &mut b.sub(&format!("merge{i}")),
                widths[i],
                widths[i],
                3,
                1,
            ));
        }
        let head = Conv2d::new(&mut b.sub("head"), widths[0], NUM_CLASSES, 1, 1, true);
        Ok(Self {
            encode,
            lateral,
            merge,
            head,
            config: config.clone(),
        })
    }

    pub fn decode_multiscale<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        bev: Var,
    ) -> Result<DecoderOutput> {
        let [_, _, h, w] = g.value(bev).dims4();
        let need = 1usize << (self.config.depth - 1);
        if h < need || w < need {
            return Err(Error::Config(format!(
                "{h}×{w} input is too small for a depth-{} decoder (needs ≥ {need} cells per side)",
                self.config.depth
            )));
        }
        let mut enc = Vec::with_capacity(self.config.depth);
        let mut x = bev;
        for (first, second) in &self.encode {
            x = second.forward(g, store, first.forward(g, store, x));
            enc.push(x);
        }
        let mut scales = vec![*enc.last().expect("depth ≥ 2")];
        for i in (0..self.config.depth - 1).rev() {
            let [_, _, hi, wi] = g.value(enc[i]).dims4();
            let up = g.resize_nearest(self.lateral[i].forward(g, store, scales[0]), hi, wi);
            let d = self.merge[i].forward(g, store, g.add(enc[i], up));
            scales.insert(0, d);
        }
        let logits = self.head.forward(g, store, scales[0]);
        Ok(DecoderOutput { scales, logits })
    }
}

/// Per-cell class probabilities of `[n, c, h, w]` logits.
pub fn segment_probs<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    crate::graph::softmax_channels(logits)
}

/// Per-cell argmax over channels, row-major per sample.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let [n, c, h, w] = logits.dims4();
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for i in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * hw + i] > d[(b * c + best) * hw + i] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
