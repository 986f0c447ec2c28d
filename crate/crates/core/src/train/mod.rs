//! Training loop, evaluation and the ablation harness.

mod ablation;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use ablation::{run_ablation, AblationColumn, AblationResult, AblationSuite};
pub use optim::{
    collect_grads, l2_penalty, nesterov_step, nesterov_update, poly_lr, GradMap, OptimizerState,
    StepConfig,
};

use crate::arch::{build_model, Model, ModelConfig};
use crate::augment::{augment_dataset, center_crop};
use crate::autodiff::{Mode, Tape};
use crate::checkpoint;
use crate::data::{read_manifest, Grid, LabeledSlice, Sample, Split, BACKGROUND};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_report, evaluate_case, GroundTruth, MetricsReport, GOOD_APD_MM};
use crate::ops::loss::Labels;
use crate::ops::norm::BatchNormConfig;
use crate::params::param_rng;
use crate::tensor::{Shape, Tensor};

pub const MODEL_FILE: &str = "model.toml";
pub const CHECKPOINT_FILE: &str = "model.msfc";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// When unset, `epochs` passes over the training set.
    pub max_iter: Option<usize>,
    pub epochs: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Intermediate checkpoint period in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Weight of the new batch statistic in the BN running averages.
    pub bn_momentum: f64,
    /// Expand the training set 40x before training instead of reading an
    /// already augmented manifest.
    pub augment: bool,
    pub good_threshold_mm: f64,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            power: 0.5,
            momentum: 0.9,
            weight_decay: 0.0005,
            max_iter: None,
            epochs: 10.0,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 0,
            bn_momentum: 0.1,
            augment: false,
            good_threshold_mm: GOOD_APD_MM,
            train_manifest: None,
            test_manifest: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::config("train", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(
                "base_lr",
                format!("must be positive, got {}", self.base_lr),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.power >= 0.0 && self.power.is_finite()) {
            return Err(Error::config(
                "power",
                format!("must be >= 0, got {}", self.power),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay",
                format!("must be >= 0, got {}", self.weight_decay),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.max_iter.is_none() && !(self.epochs > 0.0 && self.epochs.is_finite()) {
            return Err(Error::config(
                "epochs",
                format!("must be positive, got {}", self.epochs),
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config(
                "bn_momentum",
                format!("must lie in (0, 1], got {}", self.bn_momentum),
            ));
        }
        if !(self.good_threshold_mm > 0.0) {
            return Err(Error::config("good_threshold_mm", "must be positive"));
        }
        self.model.validate()
    }

    /// `max_iter`, or enough iterations for `epochs` passes over `n` samples.
    pub fn iterations(&self, n: usize) -> usize {
        self.max_iter
            .unwrap_or_else(|| ((self.epochs * n as f64) / self.batch_size as f64).ceil() as usize)
    }
}

/// Loads every entry of `split` from a manifest.
pub fn load_split(manifest: &Path, split: Split) -> Result<Vec<LabeledSlice>> {
    let m = read_manifest(manifest)?;
    m.select(split).into_iter().map(|e| m.load(e)).collect()
}

/// Centre-crops larger samples down to the network input.
pub fn fit_to_input(s: &Sample, size: usize) -> Result<Sample> {
    if s.image.h == size && s.image.w == size {
        return Ok(s.clone());
    }
    if s.image.h < size || s.image.w < size {
        return Err(Error::invalid(format!(
            "sample `{}` is {}x{}, smaller than the {size} px network input",
            s.id, s.image.h, s.image.w
        )));
    }
    center_crop(s, size)
}

/// Training samples in their final order-independent form.
pub fn prepare_training_set(cfg: &TrainConfig, slices: &[LabeledSlice]) -> Result<Vec<Sample>> {
    let raw: Vec<Sample> = slices.iter().map(|s| s.sample.clone()).collect();
    let expanded = if cfg.augment {
        augment_dataset(&raw)?
    } else {
        raw
    };
    expanded
        .iter()
        .map(|s| fit_to_input(s, cfg.model.input_size))
        .collect()
}

/// SHA-256 over ids, pixels and labels of the samples in order.
pub fn data_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.id.as_bytes());
        h.update([0u8]);
        for v in &s.image.data {
            h.update(v.to_le_bytes());
        }
        h.update(&s.mask.data);
    }
    h.finalize()
        .iter()
        .take(16)
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn batch_tensors(samples: &[&Sample], size: usize) -> Result<(Tensor<f32>, Labels)> {
    let n = samples.len();
    let mut pixels = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n * size * size);
    for s in samples {
        pixels.extend_from_slice(&s.image.data);
        labels.extend_from_slice(&s.mask.data);
    }
    Ok((
        Tensor::from_vec(Shape::new(n, 1, size, size), pixels)?,
        Labels::new(n, size, size, labels)?,
    ))
}

/// Sample order: a fresh seeded permutation per epoch, concatenated.
struct Sampler {
    seed: u64,
    n: usize,
    epoch: usize,
    queue: Vec<usize>,
}

impl Sampler {
    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.queue.is_empty() {
                let mut perm: Vec<usize> = (0..self.n).collect();
                perm.shuffle(&mut param_rng(self.seed, &format!("epoch{}", self.epoch)));
                perm.reverse();
                self.queue = perm;
                self.epoch += 1;
            }
            out.push(self.queue.pop().expect("queue refilled"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<LogRow>,
    pub data_hash: String,
    pub iterations: usize,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,lr,loss\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.iter, r.lr, r.loss);
    }
    s
}

/// Writes `model.toml` and the checkpoint into `dir`.
pub fn save_model(model: &Model<f32>, dir: &Path, checkpoint_name: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join(MODEL_FILE);
    fs::write(&cfg_path, model.config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    checkpoint::save(&model.params, &dir.join(checkpoint_name))
}

/// Rebuilds a model from its config and checkpoint.
pub fn load_model(config: &Path, ckpt: &Path) -> Result<Model<f32>> {
    let text = fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let cfg = ModelConfig::from_toml(&text)?;
    let mut model = build_model::<f32>(&cfg, 0)?;
    checkpoint::load_into(&mut model.params, checkpoint::read(ckpt)?)?;
    Ok(model)
}

/// Trains on `samples` (already at input size). Writes the log, periodic
/// checkpoints and the final model into `out_dir` when given.
pub fn train(
    cfg: &TrainConfig,
    samples: &[Sample],
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let size = cfg.model.input_size;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(s) = samples
        .iter()
        .find(|s| s.image.h != size || s.image.w != size)
    {
        return Err(Error::invalid(format!(
            "sample `{}` is {}x{}, expected {size}x{size}",
            s.id, s.image.h, s.image.w
        )));
    }
    let mut model = build_model::<f32>(&cfg.model, cfg.seed)?;
    let hash = data_hash(samples);
    let max_iter = cfg.iterations(samples.len());
    let mut opt = OptimizerState::new(&model.params);
    let mut sampler = Sampler {
        seed: cfg.seed,
        n: samples.len(),
        epoch: 0,
        queue: Vec::new(),
    };
    let mut dropout_rng = param_rng(cfg.seed, "dropout");
    let bn = BatchNormConfig {
        momentum: cfg.bn_momentum,
        ..BatchNormConfig::default()
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let write_log = |rows: &[LogRow]| -> Result<()> {
        if let Some(dir) = out_dir {
            let p = dir.join(LOG_FILE);
            fs::write(&p, log_csv(rows)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    };

    let mut log = Vec::with_capacity(max_iter);
    for iter in 0..max_iter {
        let lr = poly_lr(iter, max_iter, cfg.base_lr, cfg.power)?;
        let idx = sampler.next_batch(cfg.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let (x, labels) = batch_tensors(&batch, size)?;

        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape);
        let xv = tape.leaf(x);
        let acts = model
            .graph
            .forward(&mut tape, &bind, xv, Mode::Train, bn, &mut dropout_rng)?;
        let loss_var = tape.softmax_cross_entropy(acts.logits(), &labels)?;
        let loss = tape.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            write_log(&log)?;
            return Err(Error::NonFinite(format!(
                "training loss at iteration {iter}"
            )));
        }
        let grads = tape.backward(loss_var)?;
        let grads = collect_grads(&model.params, &grads);
        nesterov_step(
            &mut model.params,
            &grads,
            &mut opt,
            StepConfig {
                lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            },
        )?;
        model.update_running_stats(&acts.bn_stats, cfg.bn_momentum)?;

        let row = LogRow { iter, lr, loss };
        progress(&row);
        log.push(row);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0
                && (iter + 1) % cfg.checkpoint_every == 0
                && iter + 1 < max_iter
            {
                checkpoint::save(
                    &model.params,
                    &dir.join(format!("checkpoint_{:06}.msfc", iter + 1)),
                )?;
                write_log(&log)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_model(&model, dir, CHECKPOINT_FILE)?;
        write_log(&log)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        data_hash: hash,
        iterations: max_iter,
    })
}

/// Per-pixel argmax of `(N, C, H, W)` logits.
pub fn argmax_masks(logits: &Tensor<f32>) -> Vec<Grid<u8>> {
    let s = logits.shape();
    (0..s.n)
        .map(|n| {
            let planes: Vec<&[f32]> = (0..s.c).map(|c| logits.plane(n, c)).collect();
            let data = (0..s.plane())
                .map(|p| {
                    let mut best = 0;
                    for c in 1..s.c {
                        if planes[c][p] > planes[best][p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            Grid {
                h: s.h,
                w: s.w,
                data,
            }
        })
        .collect()
}

/// Predicts a full-size class map: the centred input window is segmented
/// and everything outside it is background.
pub fn predict_masks(model: &Model<f32>, samples: &[&Sample]) -> Result<Vec<Grid<u8>>> {
    let size = model.config.input_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(4) {
        let crops: Vec<Sample> = chunk
            .iter()
            .map(|s| fit_to_input(s, size))
            .collect::<Result<_>>()?;
        let refs: Vec<&Sample> = crops.iter().collect();
        let (x, _) = batch_tensors(&refs, size)?;
        let masks = argmax_masks(&model.predict(&x)?);
        for (s, m) in chunk.iter().zip(masks) {
            let (h, w) = (s.image.h, s.image.w);
            let (top, left) = ((h - size) / 2, (w - size) / 2);
            let mut full = Grid::filled(h, w, BACKGROUND);
            for r in 0..size {
                for c in 0..size {
                    full.set(top + r, left + c, m.get(r, c));
                }
            }
            out.push(full);
        }
    }
    Ok(out)
}

pub fn evaluate(
    model: &Model<f32>,
    slices: &[LabeledSlice],
    threshold_mm: f64,
) -> Result<MetricsReport> {
    let samples: Vec<&Sample> = slices.iter().map(|s| &s.sample).collect();
    let masks = predict_masks(model, &samples)?;
    let preds: Vec<(String, Grid<u8>)> = samples.iter().map(|s| s.id.clone()).zip(masks).collect();
    let gts: Vec<GroundTruth> = slices.iter().map(GroundTruth::from_slice).collect();
    Ok(aggregate_report(
        evaluate_case(&preds, &gts, threshold_mm)?,
        threshold_mm,
    ))
}
