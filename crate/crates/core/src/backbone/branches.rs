use candle_core::Tensor;

use super::encoder::{Encoder, EncoderOutput, ViTConfig};
use super::momentum::EncoderState;
use super::projector::{ProjectionSpec, Projector};
use crate::error::Result;
use crate::masking::{restore_merge, split, MaskBatch};
use crate::nn::ParamStore;

/// Encoder and projector geometry shared by the online and momentum copies.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub vit: ViTConfig,
    pub proj: ProjectionSpec,
}

/// Outputs of one contrastive forward pass.
pub struct Branches {
    /// Online encoding of view_q's visible tokens (with gradient).
    pub q1: EncoderOutput,
    /// `q1` without cls.
    pub q1_patches: Tensor,
    /// Online encoding of view_q's masked tokens, detached.
    pub q2: Option<Tensor>,
    pub z_q: Tensor,
    /// Momentum-branch projection, detached.
    pub z_k: Tensor,
}

impl Backbone {
    /// Creates the encoder and projector parameters in `store`.
    pub fn init(&self, store: &ParamStore) -> Result<()> {
        self.encoder(store, true)?;
        self.projector(store, true)?;
        Ok(())
    }

    pub fn encoder(&self, store: &ParamStore, track: bool) -> Result<Encoder> {
        Encoder::new(&store.scope("encoder", track), &self.vit)
    }

    pub fn projector(&self, store: &ParamStore, track: bool) -> Result<Projector> {
        Projector::new(&store.scope("projector", track), self.vit.dim, &self.proj)
    }

    /// Runs both branches for pixel tokens of the two views.
    ///
    /// `q1` is the only gradient-carrying encoder pass. `q2` is produced by
    /// the online weights without recording a graph (or taken from
    /// `q2_override`), both `k` passes and the momentum projector run on the
    /// momentum weights, and `h1`/`h2` are the order-restored merges.
    pub fn run_contrastive_branches(
        &self,
        state: &EncoderState,
        tokens_q: &Tensor,
        tokens_k: &Tensor,
        mask_q: &MaskBatch,
        mask_k: &MaskBatch,
        q2_override: Option<&Tensor>,
    ) -> Result<Branches> {
        let use_cls = self.vit.cls_token;
        let online = self.encoder(&state.online, true)?;
        let online_frozen = self.encoder(&state.online, false)?;
        let momentum = self.encoder(&state.momentum, false)?;
        let proj = self.projector(&state.online, true)?;
        let proj_m = self.projector(&state.momentum, false)?;

        let sq = split(tokens_q, mask_q)?;
        let q1 = online.encode(&sq.visible, &mask_q.visible, use_cls)?;
        let q1_patches = q1.patch_tokens()?;
        let q2 = match q2_override {
            Some(t) => Some(t.detach()),
            None => masked_pass(&online_frozen, sq.masked.as_ref(), mask_q, use_cls)?,
        };
        let h1 = restore_merge(&q1_patches, q2.as_ref(), mask_q, true)?;
        let z_q = proj.project(&h1, q1.cls()?.as_ref())?;

        let sk = split(tokens_k, mask_k)?;
        let k1 = momentum.encode(&sk.visible, &mask_k.visible, use_cls)?;
        let k2 = masked_pass(&momentum, sk.masked.as_ref(), mask_k, use_cls)?;
        let h2 = restore_merge(&k1.patch_tokens()?, k2.as_ref(), mask_k, false)?;
        let z_k = proj_m.project(&h2, k1.cls()?.as_ref())?.detach();

        Ok(Branches {
            q1,
            q1_patches,
            q2,
            z_q,
            z_k,
        })
    }
}

fn masked_pass(
    enc: &Encoder,
    masked: Option<&Tensor>,
    mask: &MaskBatch,
    use_cls: bool,
) -> Result<Option<Tensor>> {
    match (masked, mask.masked.as_ref()) {
        (Some(tokens), Some(pos)) => Ok(Some(enc.encode(tokens, pos, use_cls)?.patch_tokens()?.detach())),
        _ => Ok(None),
    }
}
