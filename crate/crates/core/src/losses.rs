//! Segmentation losses and the combined teacher/student objective.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::distill::{feature_distill_loss, logit_distill_loss};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Feature distillation weight.
    pub alpha: f64,
    /// Logit distillation weight.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 1.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha.is_finite()
            && self.beta.is_finite())
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and ≥ 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors.
pub fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut out = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg_sorted {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovász-Softmax over all cells of a `[n, c, h, w]` probability map,
/// averaged over classes present in `labels`.
pub fn lovasz_softmax<T: Scalar>(g: &Graph<T>, probs: Var, labels: Rc<Vec<u8>>) -> Var {
    let vp = g.value(probs);
    let [n, c, h, w] = vp.dims4();
    let hw = h * w;
    assert_eq!(labels.len(), n * hw, "label count");
    let mut grad = Tensor::<T>::zeros(&[n, c, h, w]);
    let mut loss = 0.0;
    let mut present = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(n * hw);
    let mut errors = vec![0.0f64; n * hw];
    for k in 0..c {
        if !labels.iter().any(|&l| l as usize == k) {
            continue;
        }
        present += 1;
        for (i, e) in errors.iter_mut().enumerate() {
            let (b, p) = (i / hw, i % hw);
            let fg = if labels[i] as usize == k { 1.0 } else { 0.0 };
            *e = (fg - vp.data()[(b * c + k) * hw + p].f64()).abs();
        }
        order.clear();
        order.extend(0..n * hw);
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let fg_sorted: Vec<bool> = order.iter().map(|&i| labels[i] as usize == k).collect();
        let jg = lovasz_grad(&fg_sorted);
        for (rank, &i) in order.iter().enumerate() {
            loss += errors[i] * jg[rank];
            let (b, p) = (i / hw, i % hw);
            // d|fg − p|/dp
            let sign = if fg_sorted[rank] { -1.0 } else { 1.0 };
            grad.data_mut()[(b * c + k) * hw + p] = T::of(sign * jg[rank]);
        }
    }
    let scale = if present == 0 {
        0.0
    } else {
        1.0 / present as f64
    };
    let value = Tensor::scalar(T::of(loss * scale));
    let grad = Rc::new(grad.scale(T::of(scale)));
    g.custom_op(&[probs], value, move |gout, _| {
        vec![Some(grad.scale(gout.data()[0]))]
    })
}

/// Mean cross-entropy plus Lovász-Softmax with unit weights.
pub fn seg_loss<T: Scalar>(g: &Graph<T>, logits: Var, labels: Rc<Vec<u8>>) -> Result<Var> {
    let [n, c, h, w] = g.value(logits).dims4();
    if labels.len() != n * h * w {
        return Err(Error::Contract(format!(
            "{} labels for {n}×{h}×{w} logits",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let ce = g.cross_entropy(logits, labels.clone());
    let lv = lovasz_softmax(g, g.softmax_channels(logits), labels);
    Ok(g.add(ce, lv))
}

/// Named terms of the combined objective, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub fusion_seg: f64,
    pub seg: f64,
    pub feature: f64,
    pub logit: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn add(&mut self, other: &Self) {
        self.fusion_seg += other.fusion_seg;
        self.seg += other.seg;
        self.feature += other.feature;
        self.logit += other.logit;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            fusion_seg: self.fusion_seg * s,
            seg: self.seg * s,
            feature: self.feature * s,
            logit: self.logit * s,
            total: self.total * s,
        }
    }
}

/// Teacher and student outputs the objective consumes.
pub struct BranchOutputs<'a> {
    pub logits: Var,
    pub scales: &'a [Var],
    pub low: Var,
}

/// `L_fusion_seg + L_seg + α·L_feature + β·L_logit`.
pub fn total_loss<T: Scalar>(
    g: &Graph<T>,
    teacher: &BranchOutputs<'_>,
    student: &BranchOutputs<'_>,
    labels: Rc<Vec<u8>>,
    weights: &LossWeights,
) -> Result<(Var, LossComponents)> {
    weights.validate()?;
    let fusion_seg = seg_loss(g, teacher.logits, labels.clone())?;
    let seg = seg_loss(g, student.logits, labels)?;
    let feature =
        feature_distill_loss(g, teacher.scales, student.scales, teacher.low, student.low)?;
    let logit = logit_distill_loss(g, teacher.logits, student.logits)?;
    let total = g.add_n(&[
        g.add(fusion_seg, seg),
        g.scale(feature, T::of(weights.alpha)),
        g.scale(logit, T::of(weights.beta)),
    ]);
    let v = |x: Var| g.value(x).data()[0].f64();
    let comps = LossComponents {
        fusion_seg: v(fusion_seg),
        seg: v(seg),
        feature: v(feature),
        logit: v(logit),
        total: v(total),
    };
    Ok((total, comps))
}
