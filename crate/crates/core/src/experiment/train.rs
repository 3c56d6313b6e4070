//! The pretraining loop.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;

use super::checkpoint::{checkpoint_path, Checkpoint};
use super::config::TrainConfig;
use super::metrics::{MetricsLog, Record};
use super::model::{CmaeModel, ForwardOut, LossSettings, StepInputs};
use super::optim::AdamW;
use super::schedule::LrSchedule;
use crate::backbone::EncoderState;
use crate::crop::{crop_modes, heatmap_sources, refresh_boxes, BoxCache, CropContext, CropSampler, RandomResizedCrop};
use crate::datapipe::{self, make_views, patchify, synthetic, write_class_manifest, Dataset, ImageRecord, NormStats, Split};
use crate::error::{CmaeError, Result};
use crate::masking::MaskBatch;
use crate::objectives::LossReport;
use crate::rng::{self, Stream};

/// Loads a split of the configured dataset (directory tree or
/// `synthetic:<kind>:<count>`), keeping the first `subset` records when
/// `subset > 0`.
pub fn open_split(cfg: &TrainConfig, split: Split, subset: usize) -> Result<Dataset> {
    let root = cfg.resolved_data_root()?;
    let mut ds = match synthetic::from_root(&root, split, cfg.image_size, cfg.seed) {
        Some(ds) => ds?,
        None => datapipe::load_dataset(Path::new(&root), split, cfg.image_size)?,
    };
    if subset > 0 {
        ds.truncate(subset);
    }
    if ds.is_empty() {
        return Err(CmaeError::Data(format!("{} split of {root} has no images", split.dir_name())));
    }
    Ok(ds)
}

/// Per-step inputs derived purely from `(seed, step)` and the crop cache.
pub struct PreparedBatch {
    pub indices: Vec<usize>,
    pub tokens_q: Tensor,
    pub tokens_k: Tensor,
    pub mask_q: MaskBatch,
    pub mask_k: MaskBatch,
}

impl PreparedBatch {
    pub fn inputs(&self) -> StepInputs<'_> {
        StepInputs {
            tokens_q: &self.tokens_q,
            tokens_k: &self.tokens_k,
            mask_q: &self.mask_q,
            mask_k: &self.mask_k,
        }
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: CmaeModel,
    pub settings: LossSettings,
    pub state: EncoderState,
    pub opt: AdamW,
    pub step: u64,
    pub data: Dataset,
    pub stats: NormStats,
    pub cache: Arc<BoxCache>,
    pub schedule: LrSchedule,
    pub steps_per_epoch: u64,
    pub device: Device,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let model = CmaeModel::from_config(&cfg)?;
        for r in &data.records {
            if r.height != cfg.image_size || r.width != cfg.image_size {
                return Err(CmaeError::Data(format!(
                    "{} is {}x{}, expected {}",
                    r.source_id, r.height, r.width, cfg.image_size
                )));
            }
        }
        let stats = NormStats::compute(&data.records);
        let state = model.init_state(cfg.dtype, &device, cfg.seed)?;
        let steps_per_epoch = (data.len() / cfg.batch).max(1) as u64;
        let total = if cfg.max_steps > 0 {
            cfg.max_steps
        } else {
            cfg.epochs * steps_per_epoch
        };
        let schedule = LrSchedule {
            base_lr: cfg.base_lr,
            min_lr: cfg.min_lr,
            warmup_steps: (cfg.warmup_epochs * steps_per_epoch as f64).round() as u64,
            total_steps: total,
        };
        Ok(Self {
            settings: LossSettings::from_config(&cfg),
            opt: AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay),
            model,
            state,
            step: 0,
            data,
            stats,
            cache: Arc::new(BoxCache::default()),
            schedule,
            steps_per_epoch,
            device,
            cfg,
        })
    }

    /// Restores parameters, optimizer state and step counter from `ckpt`.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.classes != self.data.classes {
            return Err(CmaeError::config(format!(
                "checkpoint was trained on {} classes, dataset has {}",
                ckpt.classes.len(),
                self.data.num_classes()
            )));
        }
        self.state.online.load_from(&ckpt.online)?;
        self.state.momentum.load_from(&ckpt.momentum)?;
        self.opt.state = ckpt
            .adam
            .iter()
            .map(|(k, m)| {
                Ok((
                    k.clone(),
                    super::optim::Moments {
                        m: m.m.to_dtype(self.cfg.dtype)?,
                        v: m.v.to_dtype(self.cfg.dtype)?,
                        steps: m.steps,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        self.stats = ckpt.stats;
        self.cache = Arc::new(ckpt.crops.clone());
        self.step = ckpt.step;
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            step: self.step,
            epoch: self.epoch_of(self.step),
            fingerprint: self.cfg.fingerprint(),
            config: self.cfg.clone(),
            classes: self.data.classes.clone(),
            stats: self.stats,
            online: self.state.online.snapshot()?,
            momentum: self.state.momentum.snapshot()?,
            adam: self.opt.state.clone(),
            crops: (*self.cache).clone(),
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn epoch_of(&self, step: u64) -> u64 {
        step / self.steps_per_epoch
    }

    /// Dataset indices of the batch for `step`: a per-epoch permutation
    /// keyed by the seed, cut into consecutive batches.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let epoch = self.epoch_of(step);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng::keyed(self.cfg.seed, Stream::Shuffle, &[epoch]));
        let b = self.cfg.batch.min(self.data.len());
        let start = (step % self.steps_per_epoch) as usize * b;
        order[start..start + b].to_vec()
    }

    fn sampler(&self, epoch: u64) -> Result<Box<dyn CropSampler>> {
        let mode = crop_modes().get(&self.cfg.crop_mode)?;
        if mode.uses_rects() && !self.cfg.crop_schedule().active(epoch) {
            return Ok(Box::new(RandomResizedCrop));
        }
        Ok(mode.sampler(&CropContext {
            cache: self.cache.clone(),
            patch_size: self.cfg.patch_size,
        }))
    }

    pub fn prepare(&self, step: u64) -> Result<PreparedBatch> {
        let epoch = self.epoch_of(step);
        let indices = self.batch_indices(step);
        let batch: Vec<(usize, &ImageRecord)> = indices.iter().map(|&i| (i, &self.data.records[i])).collect();
        let policy = self.cfg.aug_policy(self.stats);
        let sampler = self.sampler(epoch)?;
        let views = make_views(&batch, &policy, sampler.as_ref(), self.cfg.seed, epoch, self.cfg.dtype, &self.device)?;
        let n = self.model.patch.num_tokens();
        let mask_q = MaskBatch::sample(n, self.cfg.mask_ratio, self.cfg.seed, step, &indices, 0, &self.device)?;
        let mask_k = MaskBatch::sample(n, self.cfg.mask_ratio, self.cfg.seed, step, &indices, 1, &self.device)?;
        Ok(PreparedBatch {
            tokens_q: patchify(&views.view_q, &self.model.patch)?,
            tokens_k: patchify(&views.view_k, &self.model.patch)?,
            indices,
            mask_q,
            mask_k,
        })
    }

    pub fn forward(&self, batch: &PreparedBatch) -> Result<ForwardOut> {
        self.model.forward(&self.state, &batch.inputs(), &self.settings, None)
    }

    /// Recomputes the crop rectangles when the schedule asks for it at the
    /// start of an epoch. Returns whether a refresh ran.
    pub fn maybe_refresh_crops(&mut self) -> Result<bool> {
        let mode = crop_modes().get(&self.cfg.crop_mode)?;
        let epoch = self.epoch_of(self.step);
        let at_boundary = self.step.is_multiple_of(self.steps_per_epoch);
        let schedule = self.cfg.crop_schedule();
        let due = (at_boundary && schedule.refresh_due(epoch)) || (schedule.active(epoch) && self.cache.is_empty());
        if !mode.uses_rects() || !due {
            return Ok(false);
        }
        self.refresh_crops(epoch)?;
        Ok(true)
    }

    pub fn refresh_crops(&mut self, epoch: u64) -> Result<()> {
        let source = heatmap_sources().get(&self.cfg.heatmap_source)?;
        let encoder = self.model.backbone.encoder(&self.state.online, false)?;
        let cache = refresh_boxes(
            &self.data.records,
            &encoder,
            &self.stats,
            &self.model.patch,
            self.cfg.crop_threshold,
            source.as_ref(),
            epoch,
            self.cfg.eval_batch,
            self.cfg.dtype,
            &self.device,
        )?;
        log::info!("refreshed {} crop rectangles at epoch {epoch}", cache.len());
        self.cache = Arc::new(cache);
        Ok(())
    }

    /// One optimization step: forward, backward, AdamW, momentum update.
    pub fn train_step(&mut self) -> Result<(LossReport, f64)> {
        let batch = self.prepare(self.step)?;
        let out = self.forward(&batch)?;
        let r = out.report;
        if !r.is_finite() {
            log::error!(
                "non-finite loss at step {}: ctr={} loc={} con={} total={}",
                self.step,
                r.ctr,
                r.loc,
                r.con,
                r.total
            );
            return Err(CmaeError::NonFinite {
                step: self.step,
                ctr: r.ctr,
                loc: r.loc,
                con: r.con,
            });
        }
        let lr = self.schedule.lr_at(self.step);
        let grads = out.total.backward()?;
        drop(out);
        self.opt.step(&self.state.online, &grads, lr)?;
        self.state.momentum_update(self.cfg.momentum)?;
        self.step += 1;
        Ok((r, lr))
    }

    /// Trains until the configured step budget, logging every step and
    /// writing checkpoints (and the crop cache) under `out_dir` when given.
    pub fn run(&mut self, log: &mut MetricsLog, out_dir: Option<&Path>) -> Result<Option<PathBuf>> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| CmaeError::io(dir, e))?;
            write_class_manifest(&self.data.classes, &dir.join("classes.txt"))?;
        }
        let total = self.total_steps();
        let mut last = None;
        while self.step < total {
            if self.maybe_refresh_crops()? {
                if let Some(dir) = out_dir {
                    self.cache.save_tsv(&dir.join("crop_boxes.tsv"))?;
                }
            }
            let step = self.step;
            let (r, lr) = self.train_step()?;
            if step.is_multiple_of(self.cfg.log_every.max(1)) || self.step == total {
                log.push(Record::Step {
                    step,
                    epoch: self.epoch_of(step),
                    lr,
                    loss_ctr: r.ctr,
                    loss_loc: r.loc,
                    loss_con: r.con,
                    loss_total: r.total,
                })?;
            }
            let every = self.cfg.checkpoint_every;
            if let Some(dir) = out_dir {
                if (every > 0 && self.step.is_multiple_of(every)) || self.step == total {
                    let p = checkpoint_path(dir, self.step);
                    self.checkpoint()?.save(&p)?;
                    last = Some(p);
                }
            }
        }
        Ok(last)
    }
}
