//! Run configuration as flat `key = value` text.
//!
//! Every field is addressable by exactly one key; unknown or repeated keys
//! are rejected. Blank lines and `#` comments are ignored.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use candle_core::DType;
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, Pooling, PosEmbedKind, ProjectionSpec, ViTConfig};
use crate::crop::{crop_modes, heatmap_sources, CropSchedule};
use crate::datapipe::{AugPolicy, NormStats, DATA_ROOT_ENV};
use crate::decoder::{decoder_families, DecoderGeometry, DecoderSpec};
use crate::error::{CmaeError, Result};
use crate::objectives::LossWeights;

/// When semantic-aware cropping switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropWarmup {
    /// A fifth of the training epochs.
    Auto,
    Never,
    Epochs(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Probe,
    Finetune,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "probe" | "linear_probe" => Ok(Self::Probe),
            "finetune" | "fine_tune" => Ok(Self::Finetune),
            other => Err(CmaeError::config(format!("eval mode must be probe or finetune, got `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Probe => "probe",
            Self::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    // data
    pub data_root: String,
    pub image_size: usize,
    pub train_subset: usize,
    pub out_dir: String,
    pub seed: u64,
    pub dtype: DType,
    // optimization
    pub epochs: u64,
    pub max_steps: u64,
    pub batch: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    // objectives
    pub mask_ratio: f64,
    pub momentum: f64,
    pub tau: f64,
    pub lambda_ctr: f64,
    pub lambda_loc: f64,
    pub lambda_con: f64,
    pub location_squared: bool,
    pub norm_pix: bool,
    pub symmetric_recon: bool,
    // encoder and heads
    pub encoder_depth: usize,
    pub encoder_dim: usize,
    pub encoder_heads: usize,
    pub encoder_mlp_ratio: usize,
    pub patch_size: usize,
    pub cls_token: bool,
    pub pos_embed: PosEmbedKind,
    pub proj_hidden: Option<usize>,
    pub proj_dim: usize,
    pub pooling: Pooling,
    pub normalize_z: bool,
    pub loc_hidden: Option<usize>,
    // decoder
    pub decoder_kind: String,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_ratio: usize,
    pub decoder_dense_conv: bool,
    // augmentation and cropping
    pub flip_prob: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub crop_ratio_min: f64,
    pub crop_ratio_max: f64,
    pub crop_mode: String,
    pub crop_warmup: CropWarmup,
    pub crop_refresh_interval: u64,
    pub crop_threshold: f64,
    pub heatmap_source: String,
    // bookkeeping
    pub checkpoint_every: u64,
    pub log_every: u64,
    // evaluation
    pub eval_mode: EvalMode,
    pub eval_epochs: usize,
    pub eval_lr: f64,
    pub eval_batch: usize,
    pub eval_subset: usize,
    // decoder sweep
    pub sweep_kinds: Vec<String>,
    pub sweep_depths: Vec<usize>,
    pub sweep_dims: Vec<usize>,
    pub sweep_steps: u64,
    // crop preview
    pub preview_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_root: String::new(),
            image_size: 64,
            train_subset: 0,
            out_dir: "runs/cmae".into(),
            seed: 0,
            dtype: DType::F32,
            epochs: 300,
            max_steps: 0,
            batch: 64,
            base_lr: 1e-3,
            min_lr: 0.0,
            warmup_epochs: 10.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            mask_ratio: 0.75,
            momentum: 0.99,
            tau: 0.2,
            lambda_ctr: 1.0,
            lambda_loc: 1.0,
            lambda_con: 1.0,
            location_squared: false,
            norm_pix: true,
            symmetric_recon: false,
            encoder_depth: 4,
            encoder_dim: 192,
            encoder_heads: 4,
            encoder_mlp_ratio: 4,
            patch_size: 8,
            cls_token: true,
            pos_embed: PosEmbedKind::Sincos,
            proj_hidden: None,
            proj_dim: 128,
            pooling: Pooling::Mean,
            normalize_z: true,
            loc_hidden: None,
            decoder_kind: "transformer".into(),
            decoder_depth: 2,
            decoder_dim: 128,
            decoder_heads: 4,
            decoder_mlp_ratio: 4,
            decoder_dense_conv: false,
            flip_prob: 0.5,
            crop_scale_min: 0.2,
            crop_scale_max: 1.0,
            crop_ratio_min: 3.0 / 4.0,
            crop_ratio_max: 4.0 / 3.0,
            crop_mode: "contrastive".into(),
            crop_warmup: CropWarmup::Auto,
            crop_refresh_interval: 20,
            crop_threshold: 0.1,
            heatmap_source: "encoder_features".into(),
            checkpoint_every: 0,
            log_every: 1,
            eval_mode: EvalMode::Probe,
            eval_epochs: 100,
            eval_lr: 1e-3,
            eval_batch: 256,
            eval_subset: 0,
            sweep_kinds: ["transformer", "mlp", "conv", "hybrid_mlp", "hybrid_conv"]
                .map(String::from)
                .to_vec(),
            sweep_depths: vec![8, 6, 4, 2],
            sweep_dims: vec![512, 256, 128, 64],
            sweep_steps: 200,
            preview_count: 8,
        }
    }
}

/// Keys that only affect where and how often a run writes, not what it
/// computes; they are left out of the fingerprint.
const RUN_LOCAL: [&str; 3] = ["out_dir", "checkpoint_every", "log_every"];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CmaeError::config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CmaeError::config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn auto(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "auto" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |n| n.to_string())
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CmaeError::config(format!("line {}: expected key = value, got `{line}`", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(CmaeError::config(format!("line {}: `{k}` set twice", lineno + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                CmaeError::Config(m) => CmaeError::config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CmaeError::io(path, e))?;
        Self::parse(&text)
    }

    /// Assigns one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data_root" => self.data_root = v.to_string(),
            "image_size" => self.image_size = num(key, v)?,
            "train_subset" => self.train_subset = num(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "dtype" => {
                self.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(CmaeError::config(format!("`dtype` must be f32 or f64, got `{v}`"))),
                }
            }
            "epochs" => self.epochs = num(key, v)?,
            "max_steps" => self.max_steps = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "base_lr" => self.base_lr = num(key, v)?,
            "min_lr" => self.min_lr = num(key, v)?,
            "warmup_epochs" => self.warmup_epochs = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "mask_ratio" => self.mask_ratio = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "lambda_ctr" => self.lambda_ctr = num(key, v)?,
            "lambda_loc" => self.lambda_loc = num(key, v)?,
            "lambda_con" => self.lambda_con = num(key, v)?,
            "location_loss" => {
                self.location_squared = match v {
                    "l2" => false,
                    "squared" => true,
                    _ => return Err(CmaeError::config(format!("`location_loss` must be l2 or squared, got `{v}`"))),
                }
            }
            "norm_pix" => self.norm_pix = flag(key, v)?,
            "symmetric_recon" => self.symmetric_recon = flag(key, v)?,
            "encoder_depth" => self.encoder_depth = num(key, v)?,
            "encoder_dim" => self.encoder_dim = num(key, v)?,
            "encoder_heads" => self.encoder_heads = num(key, v)?,
            "encoder_mlp_ratio" => self.encoder_mlp_ratio = num(key, v)?,
            "patch_size" => self.patch_size = num(key, v)?,
            "cls_token" => self.cls_token = flag(key, v)?,
            "pos_embed" => self.pos_embed = PosEmbedKind::parse(v)?,
            "proj_hidden" => self.proj_hidden = auto(key, v)?,
            "proj_dim" => self.proj_dim = num(key, v)?,
            "pooling" => self.pooling = Pooling::parse(v)?,
            "normalize_z" => self.normalize_z = flag(key, v)?,
            "loc_hidden" => self.loc_hidden = auto(key, v)?,
            "decoder_kind" => self.decoder_kind = v.to_string(),
            "decoder_depth" => self.decoder_depth = num(key, v)?,
            "decoder_dim" => self.decoder_dim = num(key, v)?,
            "decoder_heads" => self.decoder_heads = num(key, v)?,
            "decoder_mlp_ratio" => self.decoder_mlp_ratio = num(key, v)?,
            "decoder_dense_conv" => self.decoder_dense_conv = flag(key, v)?,
            "flip_prob" => self.flip_prob = num(key, v)?,
            "crop_scale_min" => self.crop_scale_min = num(key, v)?,
            "crop_scale_max" => self.crop_scale_max = num(key, v)?,
            "crop_ratio_min" => self.crop_ratio_min = num(key, v)?,
            "crop_ratio_max" => self.crop_ratio_max = num(key, v)?,
            "crop_mode" => self.crop_mode = v.to_string(),
            "crop_warmup_epochs" => {
                self.crop_warmup = match v {
                    "auto" => CropWarmup::Auto,
                    "never" => CropWarmup::Never,
                    n => CropWarmup::Epochs(num(key, n)?),
                }
            }
            "crop_refresh_interval" => self.crop_refresh_interval = num(key, v)?,
            "crop_threshold" => self.crop_threshold = num(key, v)?,
            "heatmap_source" => self.heatmap_source = v.to_string(),
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "eval_mode" => self.eval_mode = EvalMode::parse(v)?,
            "eval_epochs" => self.eval_epochs = num(key, v)?,
            "eval_lr" => self.eval_lr = num(key, v)?,
            "eval_batch" => self.eval_batch = num(key, v)?,
            "eval_subset" => self.eval_subset = num(key, v)?,
            "sweep_kinds" => {
                self.sweep_kinds = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "sweep_depths" => self.sweep_depths = list(key, v)?,
            "sweep_dims" => self.sweep_dims = list(key, v)?,
            "sweep_steps" => self.sweep_steps = num(key, v)?,
            "preview_count" => self.preview_count = num(key, v)?,
            _ => return Err(CmaeError::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let dtype = if self.dtype == DType::F64 { "f64" } else { "f32" };
        let warmup = match self.crop_warmup {
            CropWarmup::Auto => "auto".to_string(),
            CropWarmup::Never => "never".to_string(),
            CropWarmup::Epochs(n) => n.to_string(),
        };
        vec![
            ("data_root", self.data_root.clone()),
            ("image_size", self.image_size.to_string()),
            ("train_subset", self.train_subset.to_string()),
            ("out_dir", self.out_dir.clone()),
            ("seed", self.seed.to_string()),
            ("dtype", dtype.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("batch", self.batch.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("momentum", self.momentum.to_string()),
            ("tau", self.tau.to_string()),
            ("lambda_ctr", self.lambda_ctr.to_string()),
            ("lambda_loc", self.lambda_loc.to_string()),
            ("lambda_con", self.lambda_con.to_string()),
            ("location_loss", if self.location_squared { "squared" } else { "l2" }.to_string()),
            ("norm_pix", self.norm_pix.to_string()),
            ("symmetric_recon", self.symmetric_recon.to_string()),
            ("encoder_depth", self.encoder_depth.to_string()),
            ("encoder_dim", self.encoder_dim.to_string()),
            ("encoder_heads", self.encoder_heads.to_string()),
            ("encoder_mlp_ratio", self.encoder_mlp_ratio.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("cls_token", self.cls_token.to_string()),
            ("pos_embed", self.pos_embed.as_str().to_string()),
            ("proj_hidden", opt(self.proj_hidden)),
            ("proj_dim", self.proj_dim.to_string()),
            ("pooling", self.pooling.as_str().to_string()),
            ("normalize_z", self.normalize_z.to_string()),
            ("loc_hidden", opt(self.loc_hidden)),
            ("decoder_kind", self.decoder_kind.clone()),
            ("decoder_depth", self.decoder_depth.to_string()),
            ("decoder_dim", self.decoder_dim.to_string()),
            ("decoder_heads", self.decoder_heads.to_string()),
            ("decoder_mlp_ratio", self.decoder_mlp_ratio.to_string()),
            ("decoder_dense_conv", self.decoder_dense_conv.to_string()),
            ("flip_prob", self.flip_prob.to_string()),
            ("crop_scale_min", self.crop_scale_min.to_string()),
            ("crop_scale_max", self.crop_scale_max.to_string()),
            ("crop_ratio_min", self.crop_ratio_min.to_string()),
            ("crop_ratio_max", self.crop_ratio_max.to_string()),
            ("crop_mode", self.crop_mode.clone()),
            ("crop_warmup_epochs", warmup),
            ("crop_refresh_interval", self.crop_refresh_interval.to_string()),
            ("crop_threshold", self.crop_threshold.to_string()),
            ("heatmap_source", self.heatmap_source.clone()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("eval_mode", self.eval_mode.as_str().to_string()),
            ("eval_epochs", self.eval_epochs.to_string()),
            ("eval_lr", self.eval_lr.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
            ("eval_subset", self.eval_subset.to_string()),
            ("sweep_kinds", self.sweep_kinds.join(",")),
            ("sweep_depths", join(&self.sweep_depths)),
            ("sweep_dims", join(&self.sweep_dims)),
            ("sweep_steps", self.sweep_steps.to_string()),
            ("preview_count", self.preview_count.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 over the canonical text of every key that affects results.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !RUN_LOCAL.contains(&k) {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CmaeError::config(m));
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0,1)", self.mask_ratio));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0,1]", self.momentum));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0 < self.crop_threshold && self.crop_threshold < 1.0) {
            return bad(format!("crop_threshold {} outside (0,1)", self.crop_threshold));
        }
        if self.crop_refresh_interval == 0 {
            return bad("crop_refresh_interval must be at least 1".into());
        }
        if self.base_lr < 0.0 || self.min_lr < 0.0 || self.warmup_epochs < 0.0 {
            return bad("learning rates and warmup must be nonnegative".into());
        }
        if self.eval_batch == 0 {
            return bad("eval_batch must be positive".into());
        }
        self.loss_weights().validate()?;
        self.aug_policy(NormStats::default()).validate()?;
        self.vit().validate()?;
        self.backbone().proj.validate()?;
        self.decoder_spec().validate()?;
        crop_modes().get(&self.crop_mode)?;
        heatmap_sources().get(&self.heatmap_source)?;
        let families = decoder_families();
        for k in &self.sweep_kinds {
            families.get(k)?;
        }
        if crate::masking::keep_count(self.vit().num_tokens(), self.mask_ratio) == 0 {
            return bad(format!("mask_ratio {} leaves no visible token", self.mask_ratio));
        }
        Ok(())
    }

    /// The configured root, or `$CMAE_DATA_ROOT` when unset.
    pub fn resolved_data_root(&self) -> Result<String> {
        if !self.data_root.is_empty() {
            return Ok(self.data_root.clone());
        }
        std::env::var(DATA_ROOT_ENV).map_err(|_| {
            CmaeError::config(format!("no data_root configured and {DATA_ROOT_ENV} is not set"))
        })
    }

    pub fn vit(&self) -> ViTConfig {
        ViTConfig {
            depth: self.encoder_depth,
            dim: self.encoder_dim,
            heads: self.encoder_heads,
            mlp_ratio: self.encoder_mlp_ratio,
            patch_size: self.patch_size,
            image_size: self.image_size,
            cls_token: self.cls_token,
            pos_embed: self.pos_embed,
        }
    }

    pub fn backbone(&self) -> Backbone {
        Backbone {
            vit: self.vit(),
            proj: ProjectionSpec {
                hidden: self.proj_hidden.unwrap_or(self.encoder_dim),
                out_dim: self.proj_dim,
                pooling: self.pooling,
                normalize: self.normalize_z,
            },
        }
    }

    pub fn loc_hidden_dim(&self) -> usize {
        self.loc_hidden.unwrap_or(self.encoder_dim)
    }

    pub fn decoder_spec(&self) -> DecoderSpec {
        DecoderSpec {
            kind: self.decoder_kind.clone(),
            depth: self.decoder_depth,
            dim: self.decoder_dim,
            heads: self.decoder_heads,
            mlp_ratio: self.decoder_mlp_ratio,
            dense_conv: self.decoder_dense_conv,
        }
    }

    pub fn decoder_geometry(&self) -> DecoderGeometry {
        let vit = self.vit();
        DecoderGeometry {
            enc_dim: vit.dim,
            grid: vit.grid(),
            token_len: vit.token_len(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            ctr: self.lambda_ctr,
            loc: self.lambda_loc,
            con: self.lambda_con,
        }
    }

    pub fn aug_policy(&self, stats: NormStats) -> AugPolicy {
        AugPolicy {
            flip_prob: self.flip_prob,
            scale: (self.crop_scale_min, self.crop_scale_max),
            ratio: (self.crop_ratio_min, self.crop_ratio_max),
            stats,
        }
    }

    pub fn crop_schedule(&self) -> CropSchedule {
        let interval = self.crop_refresh_interval;
        match self.crop_warmup {
            CropWarmup::Auto => CropSchedule {
                refresh_interval: interval,
                ..CropSchedule::for_epochs(self.epochs)
            },
            CropWarmup::Never => CropSchedule {
                warmup_epochs: None,
                refresh_interval: interval,
            },
            CropWarmup::Epochs(n) => CropSchedule {
                warmup_epochs: Some(n),
                refresh_interval: interval,
            },
        }
    }
}
