//! Joint teacher/student training with Adam and a step learning-rate schedule.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{io_err, Error, Result};
use crate::eval::evaluate_samples;
use crate::graph::Graph;
use crate::grid::IntensityTile;
use crate::io::{load_split, split_dir, SampleData};
use crate::lidar_encoder::Voxels;
use crate::losses::{LossComponents, LossWeights};
use crate::metrics::EvalReport;
use crate::model::{tile_batch, LieModel, ModelConfig, Variant};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::synth::sub_seed;
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `desk` or `paper`: selects the model preset when no `[model]` table is given.
    pub preset: String,
    pub variant: Variant,
    pub epochs: usize,
    pub base_lr: f64,
    /// First (1-based) epoch of each decayed period.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            variant: Variant::Full,
            epochs: 15,
            base_lr: 2e-3,
            lr_decay_epoch: 10,
            lr_decay_factor: 0.1,
            weight_decay: 1e-7,
            batch_size: 4,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            epochs: 30,
            lr_decay_epoch: 20,
            ..Self::desk()
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
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad(format!(
                "epochs and batch_size must be ≥ 1 (got {} and {})",
                self.epochs, self.batch_size
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.lr_decay_epoch == 0 || !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_epoch must be ≥ 1 and lr_decay_factor > 0".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be ≥ 0, got {}",
                self.weight_decay
            ));
        }
        Ok(())
    }

    /// Learning rate of 1-based `epoch`: decayed once per `lr_decay_epoch` epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr
            * self
                .lr_decay_factor
                .powi((epoch / self.lr_decay_epoch) as i32)
    }
}

/// Contents of a training config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub loss: LossWeights,
    /// Overrides the preset's model; its `variant` is replaced by `train.variant`.
    pub model: Option<ModelConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            what: "config",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = match &self.model {
            Some(m) => m.clone(),
            None => ModelConfig::by_name(&self.train.preset)?,
        };
        m.variant = self.train.variant;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.model_config().map(|_| ())
    }
}

/// Adam with L2 weight decay folded into the gradient.
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: HashMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step));
        let c2 = T::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps, wd) = (T::of(lr), T::of(self.eps), T::of(self.weight_decay));
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.value_mut(*id);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi + wd * *pi;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

/// A sample with its voxelization precomputed.
pub struct PreparedSample {
    pub voxels: Voxels,
    pub tile: IntensityTile,
    pub labels: Vec<u8>,
    pub data: SampleData,
}

pub fn prepare(model: &LieModel, samples: Vec<SampleData>) -> Result<Vec<PreparedSample>> {
    let grid = model.config.grid;
    samples
        .into_iter()
        .map(|s| {
            if s.mask.grid.rows != grid.rows
                || s.mask.grid.cols != grid.cols
                || s.tile.grid.rows != grid.rows
                || s.tile.grid.cols != grid.cols
            {
                return Err(Error::Contract(format!(
                    "sample {} is {}×{}, model grid is {}×{}",
                    s.dir.display(),
                    s.mask.grid.rows,
                    s.mask.grid.cols,
                    grid.rows,
                    grid.cols
                )));
            }
            Ok(PreparedSample {
                voxels: model.student.encoder.voxelize(&s.points),
                tile: s.tile.clone(),
                labels: s.mask.labels.clone(),
                data: s,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted means over the epoch.
    pub loss: LossComponents,
    pub val_miou: Option<f64>,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: LieModel,
    pub store: ParamStore<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: Option<EvalReport>,
    /// Store snapshot at the best validation epoch.
    pub best_store: ParamStore<f32>,
}

/// One optimization step over `batch`; returns the batch components.
pub fn train_step<T: Scalar>(
    model: &LieModel,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    batch: &[&PreparedSample],
    weights: &LossWeights,
    lr: f64,
) -> Result<LossComponents> {
    let g = Graph::<T>::new(true);
    let voxels: Vec<&Voxels> = batch.iter().map(|s| &s.voxels).collect();
    let tiles = if model.teacher.is_some() {
        let t: Vec<&IntensityTile> = batch.iter().map(|s| &s.tile).collect();
        Some(g.constant(tile_batch(&t, model.config.tile_dims())?))
    } else {
        None
    };
    let out = model.forward(&g, store, &voxels, tiles)?;
    let labels = Rc::new(
        batch
            .iter()
            .flat_map(|s| s.labels.iter().copied())
            .collect::<Vec<u8>>(),
    );
    let (loss, comps) = model.objective(&g, &out, labels, weights)?;
    if !comps.total.is_finite() {
        return Err(Error::Contract(format!(
            "non-finite training loss {comps:?}"
        )));
    }
    let grads = g.backward(loss);
    let grads: Vec<(ParamId, Tensor<T>)> = grads
        .param_grads()
        .filter_map(|(id, gr)| gr.map(|t| (id, t.clone())))
        .collect();
    for (id, v) in g.take_buffer_updates() {
        *store.value_mut(id) = v;
    }
    drop(g);
    adam.step(store, &grads, lr);
    Ok(comps)
}

/// Trains on prepared samples; `on_epoch` sees each record as it completes.
pub fn train_prepared(
    run: &RunConfig,
    model: LieModel,
    mut store: ParamStore<f32>,
    train: &[PreparedSample],
    val: &[PreparedSample],
    mut on_epoch: impl FnMut(&EpochRecord, &ParamStore<f32>, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    run.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let cfg = &run.train;
    let mut adam = Adam::new(cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Option<EvalReport>)> = None;
    let mut best_store = store.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1000 + epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let c = train_step(&model, &mut store, &mut adam, &batch, &run.loss, lr)?;
            sum.add(&c.scaled(batch.len() as f64));
        }
        let loss = sum.scaled(1.0 / train.len() as f64);
        let report = if val.is_empty() {
            None
        } else {
            Some(evaluate_samples(&model.student, &store, val)?)
        };
        let val_miou = report.as_ref().map(|r| r.miou);
        // Without a validation split the lowest training loss selects the best epoch.
        let score = val_miou.unwrap_or(-loss.total);
        let improved = best.as_ref().is_none_or(|(s, _, _)| score > *s);
        if improved {
            best = Some((score, epoch, report));
            best_store = store.clone();
        }
        let rec = EpochRecord {
            epoch,
            lr,
            loss,
            val_miou,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{} lr {lr:.2e} loss {:.4} (seg {:.4} fusion {:.4} feat {:.4} logit {:.4}) val mIoU {}",
            cfg.epochs,
            loss.total,
            loss.seg,
            loss.fusion_seg,
            loss.feature,
            loss.logit,
            val_miou.map_or("n/a".to_string(), |m| format!("{:.4}", m)),
        );
        on_epoch(&rec, &store, improved)?;
        history.push(rec);
    }
    let (_, best_epoch, best_val) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        store,
        history,
        best_epoch,
        best_val,
        best_store,
    })
}

pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: Option<EvalReport>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Trains from a dataset directory and writes the metrics log and checkpoints to `out`.
pub fn train(data: &Path, out: &Path, run: &RunConfig) -> Result<TrainSummary> {
    run.validate()?;
    let model_cfg = run.model_config()?;
    let train_samples = load_split(&split_dir(data, "train"))?;
    let val_dir = data.join("val");
    let val_samples = if val_dir.is_dir() {
        load_split(&val_dir)?
    } else {
        log::warn!(
            "{} has no val split; the best checkpoint is chosen by training loss",
            data.display()
        );
        Vec::new()
    };
    let mut store = ParamStore::<f32>::new();
    let model = LieModel::new(&mut store, &model_cfg, run.train.seed)?;
    let train_set = prepare(&model, train_samples)?;
    let val_set = prepare(&model, val_samples)?;
    log::info!(
        "training {} on {} samples ({} val), {} parameters",
        run.train.variant.name(),
        train_set.len(),
        val_set.len(),
        store.num_trainable()
    );

    fs::create_dir_all(out).map_err(io_err(out))?;
    let log_path = out.join(METRICS_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let best_path = out.join(BEST_CHECKPOINT);
    let meta = serde_json::to_value(run)?;
    let outcome = train_prepared(
        run,
        model,
        store,
        &train_set,
        &val_set,
        |rec, store, improved| {
            writeln!(log_file, "{}", serde_json::to_string(rec)?).map_err(io_err(&log_path))?;
            if improved {
                Checkpoint::from_store(store, &model_cfg, meta.clone(), rec.epoch, rec.val_miou)
                    .write(&best_path)?;
            }
            Ok(())
        },
    )?;
    let final_path = out.join(FINAL_CHECKPOINT);
    let last = outcome.history.last().expect("at least one epoch");
    Checkpoint::from_store(&outcome.store, &model_cfg, meta, last.epoch, last.val_miou)
        .write(&final_path)?;
    Ok(TrainSummary {
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        best_val: outcome.best_val,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    })
}
