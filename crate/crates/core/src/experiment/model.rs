//! The full pretraining network: backbone quartet, location head and pixel
//! decoder, plus the forward pass that produces all three losses.

use candle_core::{DType, Device, Tensor};

use super::config::TrainConfig;
use crate::backbone::{Backbone, Branches, EncoderState};
use crate::datapipe::PatchSpec;
use crate::decoder::{Decoder, DecoderGeometry, DecoderSpec};
use crate::error::Result;
use crate::masking::{split, MaskBatch};
use crate::nn::ParamStore;
use crate::objectives::{info_nce, location_loss, reconstruction_loss, total_loss, LocationHead, LossReport, LossWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct CmaeModel {
    pub backbone: Backbone,
    pub loc_hidden: usize,
    pub decoder: DecoderSpec,
    pub geometry: DecoderGeometry,
    pub patch: PatchSpec,
}

/// Loss settings for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub tau: f64,
    pub weights: LossWeights,
    pub location_squared: bool,
    pub norm_pix: bool,
    pub symmetric_recon: bool,
}

impl LossSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            tau: cfg.tau,
            weights: cfg.loss_weights(),
            location_squared: cfg.location_squared,
            norm_pix: cfg.norm_pix,
            symmetric_recon: cfg.symmetric_recon,
        }
    }
}

/// Patch tokens and mask plans of both views for one step.
pub struct StepInputs<'a> {
    pub tokens_q: &'a Tensor,
    pub tokens_k: &'a Tensor,
    pub mask_q: &'a MaskBatch,
    pub mask_k: &'a MaskBatch,
}

pub struct ForwardOut {
    pub total: Tensor,
    pub ctr: Tensor,
    pub loc: Tensor,
    pub con: Tensor,
    pub report: LossReport,
    pub branches: Branches,
}

impl CmaeModel {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let vit = cfg.vit();
        vit.validate()?;
        let patch = PatchSpec::new(vit.patch_size, vit.image_size, vit.image_size)?;
        Ok(Self {
            backbone: cfg.backbone(),
            loc_hidden: cfg.loc_hidden_dim(),
            decoder: cfg.decoder_spec(),
            geometry: cfg.decoder_geometry(),
            patch,
        })
    }

    pub fn location_head(&self, store: &ParamStore, track: bool) -> Result<LocationHead> {
        let vit = &self.backbone.vit;
        LocationHead::new(&store.scope("loc_head", track), vit.dim, self.loc_hidden, vit.num_tokens())
    }

    pub fn decoder(&self, store: &ParamStore, track: bool) -> Result<Decoder> {
        Decoder::new(&store.scope("decoder", track), &self.decoder, &self.geometry)
    }

    /// Fresh parameters; the momentum copies start equal to the online ones.
    pub fn init_state(&self, dtype: DType, device: &Device, seed: u64) -> Result<EncoderState> {
        let online = ParamStore::new(dtype, device.clone(), seed);
        self.backbone.init(&online)?;
        self.location_head(&online, true)?;
        self.decoder(&online, true)?;
        EncoderState::new(online)
    }

    /// All three losses and their weighted sum. `q2_override` replaces the
    /// detached masked-token pass (used to hold it fixed in gradient checks).
    pub fn forward(
        &self,
        state: &EncoderState,
        inputs: &StepInputs,
        settings: &LossSettings,
        q2_override: Option<&Tensor>,
    ) -> Result<ForwardOut> {
        let dtype = state.online.dtype();
        let device = state.online.device().clone();
        let branches = self.backbone.run_contrastive_branches(
            state,
            inputs.tokens_q,
            inputs.tokens_k,
            inputs.mask_q,
            inputs.mask_k,
            q2_override,
        )?;
        let ctr = info_nce(&branches.z_q, &branches.z_k, settings.tau)?;

        let head = self.location_head(&state.online, true)?;
        let p = head.forward(&branches.q1_patches, inputs.mask_q)?;
        let t = inputs.mask_q.visible_one_hot(dtype, &device)?;
        let loc = location_loss(&p, &t, settings.location_squared)?;

        let decoder = self.decoder(&state.online, true)?;
        let pred = decoder.decode(&branches.q1_patches, inputs.mask_q)?;
        let mut con = reconstruction_loss(&pred, inputs.tokens_q, inputs.mask_q, settings.norm_pix)?;
        if settings.symmetric_recon {
            let enc = self.backbone.encoder(&state.online, true)?;
            let vis = split(inputs.tokens_k, inputs.mask_k)?.visible;
            let feats = enc
                .encode(&vis, &inputs.mask_k.visible, self.backbone.vit.cls_token)?
                .patch_tokens()?;
            let pred_k = decoder.decode(&feats, inputs.mask_k)?;
            let con_k = reconstruction_loss(&pred_k, inputs.tokens_k, inputs.mask_k, settings.norm_pix)?;
            con = ((con + con_k)? * 0.5)?;
        }

        let (total, report) = total_loss(&ctr, &loc, &con, &settings.weights)?;
        Ok(ForwardOut {
            total,
            ctr,
            loc,
            con,
            report,
            branches,
        })
    }
}
