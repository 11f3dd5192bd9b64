//! Deterministic SGD training, Dice evaluation and transfer experiments.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{reject, Error, Result};
use crate::nn::{build_model, Model, ParamKey};
use crate::ops::{self, sgd_step};
use crate::par::Exec;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Per-pixel 4-class segmentation, softmax cross-entropy.
    Seg,
    /// Reconstruct the image in all four output channels, mean squared error.
    Auto,
}

impl Task {
    pub fn loss_name(self) -> &'static str {
        match self {
            Task::Seg => "softmax_cross_entropy",
            Task::Auto => "mse",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Seg => "seg",
            Task::Auto => "auto",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(Task::Seg),
            "auto" => Ok(Task::Auto),
            _ => Err(Error::Format(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub task: Task,
    pub freeze_mask: BTreeSet<ParamKey>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, batch: 8, epochs: 30, seed: 1, task: Task::Seg, freeze_mask: BTreeSet::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dice_per_class: [f64; 4],
    pub dice_mean: f64,
}

impl EvalResult {
    pub fn from_per_class(dice_per_class: [f64; 4]) -> Self {
        Self { dice_per_class, dice_mean: dice_per_class.iter().sum::<f64>() / 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation mean Dice for segmentation, validation MSE for the auto-encoder.
    pub val_metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

/// `2 |P ∩ G| / (|P| + |G|)` over pixels equal to `class_id`; 1 when both are empty.
pub fn dice(pred: &[u8], gt: &[u8], class_id: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        reject!("dice: prediction has {} pixels, ground truth {}", pred.len(), gt.len());
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Channel-wise argmax of `(N, C, H, W)` logits; ties go to the lowest class.
pub fn argmax_mask(logits: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let d = logits.data();
    let mut out = vec![0u8; n * plane];
    for s in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if d[(s * c + k) * plane + p] > d[(s * c + best) * plane + p] {
                    best = k;
                }
            }
            out[s * plane + p] = best as u8;
        }
    }
    Ok(out)
}

/// Per-image Dice for each class, averaged over images.
pub fn dice_from_masks(pred: &[u8], gt: &[u8], plane: usize) -> Result<EvalResult> {
    if pred.len() != gt.len() || plane == 0 || !pred.len().is_multiple_of(plane) {
        reject!("mask lengths {} and {} do not split into planes of {plane}", pred.len(), gt.len());
    }
    let images = pred.len() / plane;
    let mut sums = [0.0f64; 4];
    for i in 0..images {
        let (p, g) = (&pred[i * plane..(i + 1) * plane], &gt[i * plane..(i + 1) * plane]);
        for (c, s) in sums.iter_mut().enumerate() {
            *s += dice(p, g, c as u8)?;
        }
    }
    Ok(EvalResult::from_per_class(sums.map(|s| if images == 0 { 0.0 } else { s / images as f64 })))
}

const EVAL_CHUNK: usize = 32;

fn chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(EVAL_CHUNK).map(|c| c.to_vec()).collect()
}

/// Eval-mode segmentation quality on `val`.
pub fn evaluate(m: &Model, val: &Dataset) -> Result<EvalResult> {
    evaluate_with(Exec::default(), m, val)
}

pub fn evaluate_with(exec: Exec, m: &Model, val: &Dataset) -> Result<EvalResult> {
    let mut pred = Vec::with_capacity(val.len() * val.plane());
    let mut gt = Vec::with_capacity(val.len() * val.plane());
    for idx in chunks(val.len()) {
        let (x, y) = val.batch(&idx);
        pred.extend(argmax_mask(&m.forward_eval_with(exec, &x)?)?);
        gt.extend(y);
    }
    dice_from_masks(&pred, &gt, val.plane())
}

/// Mean squared reconstruction error of the auto-encoder task on `val`.
pub fn evaluate_reconstruction(m: &Model, val: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for idx in chunks(val.len()) {
        let (x, _) = val.batch(&idx);
        let (loss, _) = ops::mse(&m.forward_eval(&x)?, &val.autoencoder_batch(&idx))?;
        total += loss as f64 * idx.len() as f64;
    }
    Ok(total / val.len().max(1) as f64)
}

fn batch_loss(m: &mut Model, data: &Dataset, idx: &[usize], cfg: &TrainConfig) -> Result<f32> {
    let (x, labels) = data.batch(idx);
    let tape = m.forward_train(&x, &cfg.freeze_mask)?;
    let (loss, grad) = match cfg.task {
        Task::Seg => ops::softmax_cross_entropy(tape.output(), &labels)?,
        Task::Auto => ops::mse(tape.output(), &data.autoencoder_batch(idx))?,
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss became {loss}")));
    }
    m.backward(&tape, grad)?;
    Ok(loss)
}

/// Trains a copy of `m`. Shuffling is seeded from `cfg.seed` and the epoch;
/// keys in `cfg.freeze_mask` (including running statistics) never change.
pub fn train(m: &Model, data: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(Model, History)> {
    if data.is_empty() {
        reject!("empty training set");
    }
    if cfg.batch == 0 || cfg.batch > data.len() {
        reject!("batch size {} must be in 1..={}", cfg.batch, data.len());
    }
    if let Some(k) = cfg.freeze_mask.iter().find(|k| !m.has_key(**k)) {
        return Err(Error::UnknownKey(*k));
    }
    let mut model = m.clone();
    model.clear_grads();
    let mut velocity: Vec<Tensor> = model.trainable_mut().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let freeze: Vec<bool> = model.trainable_mut().iter().map(|(k, _)| cfg.freeze_mask.contains(k)).collect();

    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        Rng::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut sum = 0.0f64;
        let mut steps = 0usize;
        for idx in order.chunks(cfg.batch) {
            let loss = batch_loss(&mut model, data, idx, cfg)?;
            if epoch == 0 && steps == 0 {
                history.initial_loss = loss as f64;
            }
            let mut params: Vec<&mut Tensor> = model.trainable_mut().into_iter().map(|(_, t)| t).collect();
            sgd_step(&mut params, cfg.lr, cfg.momentum, &mut velocity, &freeze)?;
            sum += loss as f64;
            steps += 1;
        }
        let val_metric = if val.is_empty() {
            f64::NAN
        } else {
            match cfg.task {
                Task::Seg => evaluate(&model, val)?.dice_mean,
                Task::Auto => evaluate_reconstruction(&model, val)?,
            }
        };
        history.epochs.push(EpochRecord { epoch: epoch + 1, train_loss: sum / steps as f64, val_metric });
    }
    Ok((model, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    /// Random initialization, nothing loaded.
    Scratch,
    /// Load reusable parameters and keep them fixed.
    Freeze,
    /// Load reusable parameters and train everything.
    Finetune,
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferMode::Scratch => "scratch",
            TransferMode::Freeze => "freeze",
            TransferMode::Finetune => "finetune",
        })
    }
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(TransferMode::Scratch),
            "freeze" => Ok(TransferMode::Freeze),
            "finetune" => Ok(TransferMode::Finetune),
            _ => Err(Error::Format(format!("unknown transfer mode {s:?}"))),
        }
    }
}

/// One row of a transfer table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub source: String,
    pub mode: TransferMode,
    pub samples: usize,
    pub dice_per_class: [f64; 4],
    pub dice_mean: f64,
}

/// Trains a fresh target (initialized from `cfg.seed`) on `small`, loading
/// the `reusable` parameters of `source` unless `mode` is scratch.
pub fn run_transfer_experiment(
    source: &Model,
    source_label: &str,
    reusable: &BTreeSet<ParamKey>,
    small: &Dataset,
    val: &Dataset,
    mode: TransferMode,
    cfg: &TrainConfig,
) -> Result<TransferRow> {
    let mut target = build_model(source.arch(), cfg.seed);
    if let Some(k) = reusable.iter().find(|k| !target.has_key(**k)) {
        return Err(Error::UnknownKey(*k));
    }
    let mut cfg = cfg.clone();
    cfg.task = Task::Seg;
    match mode {
        TransferMode::Scratch => cfg.freeze_mask.clear(),
        TransferMode::Freeze | TransferMode::Finetune => {
            for &k in reusable {
                target.set_param(k, source.get_param(k)?)?;
            }
            cfg.freeze_mask = if mode == TransferMode::Freeze { reusable.clone() } else { BTreeSet::new() };
        }
    }
    // Only the final model is scored, so skip per-epoch validation.
    let (trained, _) = train(&target, small, &val.subset(0), &cfg)?;
    let eval = evaluate(&trained, val)?;
    Ok(TransferRow {
        source: if mode == TransferMode::Scratch { "none".into() } else { source_label.into() },
        mode,
        samples: small.len(),
        dice_per_class: eval.dice_per_class,
        dice_mean: eval.dice_mean,
    })
}
