//! Linear probing and fine-tuning on top of a pretrained encoder.

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::config::{EvalMode, TrainConfig};
use super::optim::AdamW;
use super::train::open_split;
use crate::backbone::{Backbone, Encoder};
use crate::datapipe::{normalized_batch, patchify, Dataset, ImageRecord, NormStats, PatchSpec, Split};
use crate::error::{CmaeError, Result};
use crate::nn::{log_softmax_last, scalar, Init, Linear, ParamStore};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl ClassifierSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            epochs: cfg.eval_epochs,
            lr: cfg.eval_lr,
            batch: cfg.eval_batch,
            weight_decay: 0.0,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub train_top1: f64,
    pub val_top1: f64,
}

fn one_hot(labels: &[usize], classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        v[i * classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), classes), device)?.to_dtype(dtype)?)
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    let t = one_hot(labels, c, logits.dtype(), logits.device())?;
    Ok((log_softmax_last(logits)?.mul(&t)?.sum_all()? / -(b as f64))?)
}

pub fn top1(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = logits.argmax(D::Minus1)?.to_dtype(DType::U32)?.to_vec1::<u32>()?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| **p as usize == **l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Feature standardization fitted on the training features.
#[derive(Debug, Clone)]
pub struct Standardizer {
    mean: Tensor,
    std: Tensor,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let mean = x.mean_keepdim(0)?;
        let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
        Ok(Self {
            mean,
            std: (var + 1e-6)?.sqrt()?,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?)
    }
}

/// Batches of `indices` in a per-epoch order keyed by `seed`.
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::keyed(seed, Stream::Eval, &[epoch as u64]));
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

fn select(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let i: Vec<u32> = idx.iter().map(|&v| v as u32).collect();
    let i = Tensor::from_vec(i, idx.len(), x.device())?;
    Ok(x.index_select(&i, 0)?)
}

/// Softmax regression on fixed `features` (`M × D`), zero-initialized.
pub fn train_linear_classifier(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    s: &ClassifierSettings,
) -> Result<Linear> {
    let (m, d) = features.dims2()?;
    if m != labels.len() {
        return Err(CmaeError::shape(format!("{m} feature rows for {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(CmaeError::Data(format!("label {bad} outside {num_classes} classes")));
    }
    let store = ParamStore::new(features.dtype(), features.device().clone(), s.seed);
    let mut opt = AdamW::new(0.9, 0.999, s.weight_decay);
    for epoch in 0..s.epochs {
        for idx in epoch_batches(m, s.batch, s.seed, epoch) {
            let head = Linear::with_init(&store.scope("head", true), d, num_classes, Init::Zeros)?;
            let x = select(features, &idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy(&head.forward(&x)?, &y)?;
            opt.step(&store, &loss.backward()?, s.lr)?;
        }
    }
    Linear::with_init(&store.scope("head", false), d, num_classes, Init::Zeros)
}

/// Mean-pooled patch features for `records`, no gradient.
pub fn extract_features(
    encoder: &Encoder,
    records: &[ImageRecord],
    stats: &NormStats,
    patch: &PatchSpec,
    batch: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in records.chunks(batch.max(1)) {
        let refs: Vec<&ImageRecord> = chunk.iter().collect();
        let tokens = patchify(&normalized_batch(&refs, stats, dtype, device)?, patch)?;
        parts.push(encoder.pooled_features(&tokens)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

fn labels(ds: &Dataset) -> Vec<usize> {
    ds.records.iter().map(|r| r.label).collect()
}

/// Frozen-encoder linear probe. Returns `(train top-1, val top-1)`.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe(
    encoder: &Encoder,
    train: &Dataset,
    val: &Dataset,
    stats: &NormStats,
    patch: &PatchSpec,
    s: &ClassifierSettings,
    dtype: DType,
    device: &Device,
) -> Result<(f64, f64)> {
    let ftr = extract_features(encoder, &train.records, stats, patch, s.batch, dtype, device)?;
    let fval = extract_features(encoder, &val.records, stats, patch, s.batch, dtype, device)?;
    let norm = Standardizer::fit(&ftr)?;
    let (ftr, fval) = (norm.apply(&ftr)?, norm.apply(&fval)?);
    let (ytr, yval) = (labels(train), labels(val));
    let head = train_linear_classifier(&ftr, &ytr, train.num_classes(), s)?;
    Ok((top1(&head.forward(&ftr)?, &ytr)?, top1(&head.forward(&fval)?, &yval)?))
}

/// Trains encoder and classifier jointly on unaugmented images.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    backbone: &Backbone,
    store: &ParamStore,
    train: &Dataset,
    val: &Dataset,
    stats: &NormStats,
    patch: &PatchSpec,
    s: &ClassifierSettings,
    weight_decay: f64,
) -> Result<(f64, f64)> {
    let dtype = store.dtype();
    let device = store.device().clone();
    let (d, c) = (backbone.vit.dim, train.num_classes());
    let mut opt = AdamW::new(0.9, 0.999, weight_decay);
    for epoch in 0..s.epochs {
        let mut last = f64::NAN;
        for idx in epoch_batches(train.len(), s.batch, s.seed, epoch) {
            let refs: Vec<&ImageRecord> = idx.iter().map(|&i| &train.records[i]).collect();
            let y: Vec<usize> = refs.iter().map(|r| r.label).collect();
            let tokens = patchify(&normalized_batch(&refs, stats, dtype, &device)?, patch)?;
            let enc = backbone.encoder(store, true)?;
            let head = Linear::with_init(&store.scope("cls_head", true), d, c, Init::Zeros)?;
            let loss = cross_entropy(&head.forward(&enc.pooled_features(&tokens)?)?, &y)?;
            last = scalar(&loss)?;
            opt.step(store, &loss.backward()?, s.lr)?;
        }
        log::debug!("fine-tune epoch {epoch}: loss {last:.4}");
    }
    let enc = backbone.encoder(store, false)?;
    let head = Linear::with_init(&store.scope("cls_head", false), d, c, Init::Zeros)?;
    let acc = |ds: &Dataset| -> Result<f64> {
        let f = extract_features(&enc, &ds.records, stats, patch, s.batch, dtype, &device)?;
        top1(&head.forward(&f)?, &labels(ds))
    };
    Ok((acc(train)?, acc(val)?))
}

/// Loads the encoder from `ckpt` into a fresh store.
pub fn encoder_store(ckpt: &Checkpoint, backbone: &Backbone, dtype: DType, device: &Device) -> Result<ParamStore> {
    let store = ParamStore::new(dtype, device.clone(), ckpt.config.seed);
    backbone.encoder(&store, true)?;
    let wanted = ckpt
        .online
        .iter()
        .filter(|(k, _)| k.starts_with("encoder."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    store.load_from(&wanted)?;
    Ok(store)
}

/// Evaluates the checkpointed encoder on the configured dataset's train
/// and validation splits.
pub fn evaluate(ckpt: &Checkpoint, mode: EvalMode) -> Result<EvalReport> {
    let cfg = &ckpt.config;
    let subset = cfg.eval_subset;
    let train = open_split(cfg, Split::Train, if subset > 0 { subset } else { cfg.train_subset })?;
    let val = open_split(cfg, Split::Val, subset)?;
    for (name, ds) in [("train", &train), ("val", &val)] {
        if ds.classes != ckpt.classes {
            return Err(CmaeError::config(format!(
                "{name} split has {} classes but the checkpoint manifest lists {}",
                ds.num_classes(),
                ckpt.classes.len()
            )));
        }
    }
    let backbone = cfg.backbone();
    let device = Device::Cpu;
    let store = encoder_store(ckpt, &backbone, cfg.dtype, &device)?;
    let patch = PatchSpec::new(cfg.patch_size, cfg.image_size, cfg.image_size)?;
    let s = ClassifierSettings::from_config(cfg);
    let (train_top1, val_top1) = match mode {
        EvalMode::Probe => {
            let enc = backbone.encoder(&store, false)?;
            linear_probe(&enc, &train, &val, &ckpt.stats, &patch, &s, cfg.dtype, &device)?
        }
        EvalMode::Finetune => fine_tune(&backbone, &store, &train, &val, &ckpt.stats, &patch, &s, cfg.weight_decay)?,
    };
    Ok(EvalReport {
        mode,
        train_top1,
        val_top1,
    })
}
