//! Student-only evaluation and inference from checkpoints.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::grid::{PointCloud, SemanticMask};
use crate::io::{load_split, split_dir};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::model::{predict, Student};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::PreparedSample;

/// Builds the student and fills it from `ckpt`. Teacher arrays are never read.
pub fn load_student(ckpt: &Checkpoint) -> Result<(Student, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let student = Student::new(&mut store, &ckpt.manifest.model, 0)?;
    ckpt.load_into(&mut store)?;
    Ok((student, store))
}

pub fn evaluate_samples<T: Scalar>(
    student: &Student,
    store: &ParamStore<T>,
    samples: &[PreparedSample],
) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new();
    for s in samples {
        let g = crate::graph::Graph::inference();
        let out = student.forward(&g, store, &[&s.voxels])?;
        let pred = crate::decoder::argmax_channels(&g.value(out.logits));
        cm.update(&pred, &s.labels)?;
    }
    Ok(cm.report(samples.len()))
}

/// mIoU of a checkpoint's student over the `val` split of `data` (or `data` itself).
pub fn evaluate_miou(ckpt: &Path, data: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::read(ckpt)?;
    let (student, store) = load_student(&ck)?;
    let samples = load_split(&split_dir(data, "val"))?;
    let mut cm = ConfusionMatrix::new();
    for s in &samples {
        let out = infer(&student, &store, &s.points)?;
        if out.mask.labels.len() != s.mask.labels.len() {
            return Err(Error::Contract(format!(
                "{} has a mask of a different size than the model grid",
                s.dir.display()
            )));
        }
        cm.update(&out.mask.labels, &s.mask.labels)?;
    }
    Ok(cm.report(samples.len()))
}

pub struct Inference {
    pub mask: SemanticMask,
    /// `[4, h, w]` class probabilities.
    pub probs: Tensor<f32>,
}

/// LiDAR-only prediction. An empty cloud yields an all-background mask.
pub fn infer(student: &Student, store: &ParamStore<f32>, cloud: &PointCloud) -> Result<Inference> {
    let grid = student.encoder.pillars.grid;
    if cloud.is_empty() {
        log::warn!("empty point cloud: returning an all-background mask");
        let mut probs = Tensor::zeros(&[4, grid.rows, grid.cols]);
        probs.data_mut()[..grid.num_cells()].fill(1.0);
        return Ok(Inference {
            mask: SemanticMask::background(grid),
            probs,
        });
    }
    let (labels, probs) = predict(student, store, cloud)?;
    Ok(Inference {
        mask: SemanticMask { grid, labels },
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LieModel, ModelConfig, Variant};

    #[test]
    fn empty_cloud_is_all_background() {
        let cfg = ModelConfig {
            variant: Variant::Baseline,
            ..ModelConfig::desk()
        };
        let mut store = ParamStore::<f32>::new();
        let model = LieModel::new(&mut store, &cfg, 0).unwrap();
        let out = infer(&model.student, &store, &PointCloud::default()).unwrap();
        assert!(out.mask.labels.iter().all(|&l| l == 0));
        assert_eq!(out.probs.shape(), &[4, 64, 128]);
    }

    #[test]
    fn stripped_checkpoint_gives_identical_predictions() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::<f32>::new();
        LieModel::new(&mut store, &cfg, 4).unwrap();
        let ck = Checkpoint::from_store(&store, &cfg, serde_json::Value::Null, 0, None);
        let sample = crate::synth::generate_sample(7, &crate::synth::ScenePreset::desk()).unwrap();
        let (s1, st1) = load_student(&ck).unwrap();
        let (s2, st2) = load_student(&ck.strip_teacher()).unwrap();
        let a = infer(&s1, &st1, &sample.points).unwrap();
        let b = infer(&s2, &st2, &sample.points).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.probs, b.probs);
    }
}
