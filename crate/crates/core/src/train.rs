//! Minibatch SGD with momentum, evaluation, and parameter persistence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{clamp_abs, clip_percentile, pixel_moments, DatasetBundle};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, build_model, cross_entropy, ArchSpec, Model, ParamInfo, ParamRole};
use crate::tensor::Tensor;

const MOMENTUM: f64 = 0.9;
const EVAL_BATCH: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Decays linearly from `lr` to zero over the whole run.
    Linear,
}

impl LrSchedule {
    fn rate(self, lr: f64, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => lr,
            Self::Linear => lr * (1.0 - step as f64 / total as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Percentile for input clipping; `None` leaves inputs untouched.
    pub clip_percentile: Option<f64>,
    /// Shift and scale inputs by the training split's pixel mean and
    /// standard deviation.
    pub standardize: bool,
    /// Train / valid / test sample counts.
    pub subset_sizes: [usize; 3],
    /// Keep attention vectors at their initial values.
    pub freeze_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            schedule: LrSchedule::Linear,
            epochs: 10,
            batch: 8,
            seed: 0,
            clip_percentile: None,
            standardize: true,
            subset_sizes: [2000, 500, 2000],
            freeze_attention: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if self.subset_sizes.contains(&0) {
            return Err(Error::InvalidArgument("subset sizes must be positive".into()));
        }
        if let Some(p) = self.clip_percentile {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::InvalidArgument(format!("clip percentile {p} outside (0,100]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_error: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,train_loss,valid_error\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.4}", r.epoch, r.train_loss, r.valid_error).expect("write to string");
    }
    s
}

/// Input statistics fitted on the training split and applied to every split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub clip: Option<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Clips (if configured) and then standardizes (if configured) all three
/// splits in place, with thresholds and moments taken from `splits[0]`.
pub fn preprocess(splits: &mut [DatasetBundle; 3], cfg: &TrainConfig) -> Result<Preprocessing> {
    let mut prep = Preprocessing { clip: None, mean: 0.0, std: 1.0 };
    if let Some(p) = cfg.clip_percentile {
        let (_, t) = clip_percentile(&splits[0], p)?;
        for s in splits.iter_mut() {
            s.images = clamp_abs(&s.images, t);
        }
        prep.clip = Some(t);
    }
    if cfg.standardize {
        let (mean, std) = pixel_moments(&splits[0])?;
        for s in splits.iter_mut() {
            s.images = s.images.map(|v| (v - mean) / std);
        }
        prep.mean = mean;
        prep.std = std;
    }
    Ok(prep)
}

/// Fraction of samples whose arg-max logit differs from the label.
pub fn evaluate(model: &Model, bundle: &DatasetBundle) -> Result<f64> {
    if bundle.is_empty() {
        return Ok(0.0);
    }
    let mut wrong = 0;
    let idx: Vec<usize> = (0..bundle.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = bundle.batch(chunk);
        let pred = argmax_rows(&model.forward(&x)?);
        wrong += pred.iter().zip(&y).filter(|(p, t)| p != t).count();
    }
    Ok(wrong as f64 / bundle.len() as f64)
}

/// One SGD-with-momentum step: `v ← μv + g`, `p ← p − lr·v`.
fn sgd_step(params: Vec<&mut Tensor>, grads: &[Tensor], velocity: &mut [Vec<f64>], lr: f64) {
    for ((p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = MOMENTUM * *vi + gi;
            *pi -= lr * *vi;
        }
    }
}

/// Trains in place, calling `after_epoch` with the epoch number and model
/// once each epoch finishes.
pub fn train_loop_with(
    model: &mut Model,
    train: &DatasetBundle,
    valid: &DatasetBundle,
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<Vec<HistoryRow>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let roles: Vec<ParamRole> = model.param_info().into_iter().map(|p| p.role).collect();
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * train.len().div_ceil(cfg.batch);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let (x, y) = train.batch(chunk);
            let trace = model.forward_trace(&x)?;
            let (loss, grad_logits) = cross_entropy(&trace.output, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!("minibatch loss became {loss}"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            let mut grads = model.backward(&trace, &grad_logits)?;
            if cfg.freeze_attention {
                for (g, role) in grads.iter_mut().zip(&roles) {
                    if *role == ParamRole::Attention {
                        g.data_mut().fill(0.0);
                    }
                }
            }
            sgd_step(model.params_mut(), &grads, &mut velocity, cfg.schedule.rate(cfg.lr, step, total_steps));
            step += 1;
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                msg: format!("epoch loss became {train_loss}"),
            });
        }
        let valid_error = evaluate(model, valid)?;
        history.push(HistoryRow {
            epoch,
            train_loss,
            valid_error,
        });
        after_epoch(epoch, model)?;
    }
    Ok(history)
}

pub fn train_loop(model: &mut Model, train: &DatasetBundle, valid: &DatasetBundle, cfg: &TrainConfig) -> Result<Vec<HistoryRow>> {
    train_loop_with(model, train, valid, cfg, |_, _| Ok(()))
}

/// Shape manifest stored next to a raw parameter blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub arch: ArchSpec,
    pub total: usize,
    pub params: Vec<ParamInfo>,
}

/// Little-endian `f64` blob of all parameters in manifest order.
pub fn encode_params(model: &Model) -> (Vec<u8>, ParamManifest) {
    let flat = model.flat_params();
    let bytes = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
    let manifest = ParamManifest {
        arch: model.arch.clone(),
        total: flat.len(),
        params: model.param_info(),
    };
    (bytes, manifest)
}

pub fn decode_params(bytes: &[u8], manifest: &ParamManifest) -> Result<Model> {
    let mut model = build_model(&manifest.arch, 0)?;
    if model.param_info() != manifest.params || model.param_count() != manifest.total {
        return Err(Error::Format("manifest does not match its architecture".into()));
    }
    if bytes.len() != manifest.total * 8 {
        return Err(Error::Format(format!(
            "parameter blob has {} bytes, manifest needs {}",
            bytes.len(),
            manifest.total * 8
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    model.set_flat_params(&flat)?;
    Ok(model)
}

pub fn save_params(model: &Model, blob_path: impl AsRef<Path>, manifest_path: impl AsRef<Path>) -> Result<()> {
    let (bytes, manifest) = encode_params(model);
    fs::write(blob_path, bytes)?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_params(blob_path: impl AsRef<Path>, manifest_path: impl AsRef<Path>) -> Result<Model> {
    let manifest: ParamManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    decode_params(&fs::read(blob_path)?, &manifest)
}
