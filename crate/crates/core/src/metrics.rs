//! Dataset-level confusion matrix and mIoU over the map-element classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CLASS_NAMES, NUM_CLASSES};

/// `counts[gt][pred]` accumulated over every evaluated cell.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} labels",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(gt) {
            if p as usize >= NUM_CLASSES || t as usize >= NUM_CLASSES {
                return Err(Error::Contract(format!(
                    "class id out of range: pred {p}, gt {t}"
                )));
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `TP/(TP+FP+FN)`, or `None` if the class never occurs in gt or prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.counts[class][class];
        let fn_: u64 = self.counts[class].iter().sum::<u64>() - tp;
        let fp: u64 = (0..NUM_CLASSES).map(|t| self.counts[t][class]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn report(&self, samples: usize) -> EvalReport {
        let classes: Vec<ClassIou> = (1..NUM_CLASSES)
            .map(|c| ClassIou {
                class: CLASS_NAMES[c].to_string(),
                iou: self.iou(c),
            })
            .collect();
        let present: Vec<f64> = classes.iter().filter_map(|c| c.iou).collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        EvalReport {
            classes,
            miou,
            samples,
            cells: self.total(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    /// `None` when the class is absent from both prediction and gt.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Divider, crossing, boundary.
    pub classes: Vec<ClassIou>,
    pub miou: f64,
    pub samples: usize,
    pub cells: u64,
}

impl EvalReport {
    pub fn iou(&self, name: &str) -> Option<f64> {
        self.classes
            .iter()
            .find(|c| c.class == name)
            .and_then(|c| c.iou)
    }
}

/// mIoU of paired `(prediction, gt)` masks.
pub fn evaluate_masks<'a>(
    pairs: impl IntoIterator<Item = (&'a [u8], &'a [u8])>,
) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new();
    let mut samples = 0;
    for (p, t) in pairs {
        cm.update(p, t)?;
        samples += 1;
    }
    Ok(cm.report(samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_and_all_background_predictions() {
        let gt: Vec<u8> = (0..40).map(|i| (i % 4) as u8).collect();
        let r = evaluate_masks([(gt.as_slice(), gt.as_slice())]).unwrap();
        assert_eq!(r.miou, 1.0);
        assert!(r.classes.iter().all(|c| c.iou == Some(1.0)));
        let bg = vec![0u8; 40];
        let r = evaluate_masks([(bg.as_slice(), gt.as_slice())]).unwrap();
        assert!(r.classes.iter().all(|c| c.iou == Some(0.0)));
        assert_eq!(r.miou, 0.0);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let gt = vec![0, 1, 1, 0];
        let pred = vec![0, 1, 0, 0];
        let r = evaluate_masks([(pred.as_slice(), gt.as_slice())]).unwrap();
        assert_eq!(r.iou("divider"), Some(0.5));
        assert_eq!(r.iou("crossing"), None);
        assert_eq!(r.miou, 0.5);
    }

    #[test]
    fn order_invariance_and_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let masks: Vec<(Vec<u8>, Vec<u8>)> = (0..3)
            .map(|_| {
                (
                    (0..50).map(|_| rng.gen_range(0..4)).collect(),
                    (0..50).map(|_| rng.gen_range(0..4)).collect(),
                )
            })
            .collect();
        let fwd = evaluate_masks(masks.iter().map(|(p, t)| (p.as_slice(), t.as_slice()))).unwrap();
        let rev = evaluate_masks(
            masks
                .iter()
                .rev()
                .map(|(p, t)| (p.as_slice(), t.as_slice())),
        )
        .unwrap();
        assert_eq!(fwd, rev);
        for c in 1..4u8 {
            let (mut i, mut u) = (0, 0);
            for (p, t) in &masks {
                for k in 0..50 {
                    i += (p[k] == c && t[k] == c) as u32;
                    u += (p[k] == c || t[k] == c) as u32;
                }
            }
            assert_eq!(fwd.classes[c as usize - 1].iou, Some(i as f64 / u as f64));
        }
        assert!(evaluate_masks([(&[0u8][..], &[0u8, 1][..])]).is_err());
    }
}
