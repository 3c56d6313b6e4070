use std::sync::Arc;

use candle_core::{DType, Tensor};

use super::HeatMap;
use crate::backbone::{Encoder, EncoderOutput};
use crate::datapipe::{patchify, PatchSpec};
use crate::error::{CmaeError, Result};
use crate::registry::{Named, Registry};

/// Turns a full, unmasked encoder pass into one raw saliency score per
/// patch token (`B × N`).
pub trait HeatmapSource: Named + Send + Sync {
    fn needs_cls(&self) -> bool;
    fn raw_scores(&self, out: &EncoderOutput) -> Result<Tensor>;
}

/// L2 norm of each patch token's last-block features.
pub struct EncoderFeatures;

impl Named for EncoderFeatures {
    fn name(&self) -> &'static str {
        "encoder_features"
    }
}

impl HeatmapSource for EncoderFeatures {
    fn needs_cls(&self) -> bool {
        false
    }

    fn raw_scores(&self, out: &EncoderOutput) -> Result<Tensor> {
        let x = &out.last_block;
        let x = if out.has_cls {
            x.narrow(1, 1, x.dim(1)? - 1)?
        } else {
            x.clone()
        };
        Ok(x.sqr()?.sum(2)?.sqrt()?)
    }
}

/// Last-block attention from cls to every patch, averaged over heads.
pub struct AttentionMap;

impl Named for AttentionMap {
    fn name(&self) -> &'static str {
        "attention_map"
    }
}

impl HeatmapSource for AttentionMap {
    fn needs_cls(&self) -> bool {
        true
    }

    fn raw_scores(&self, out: &EncoderOutput) -> Result<Tensor> {
        if !out.has_cls {
            return Err(CmaeError::config("attention_map heatmaps need an encoder with a cls token"));
        }
        let attn = out
            .last_attn
            .as_ref()
            .ok_or_else(|| CmaeError::config("attention_map heatmaps need at least one encoder block"))?;
        let len = attn.dim(3)?;
        Ok(attn.narrow(2, 0, 1)?.squeeze(2)?.narrow(2, 1, len - 1)?.mean(1)?)
    }
}

pub fn heatmap_sources() -> Registry<dyn HeatmapSource> {
    let mut r: Registry<dyn HeatmapSource> = Registry::new("heatmap source");
    r.register(Arc::new(EncoderFeatures)).register(Arc::new(AttentionMap));
    r
}

/// Heatmaps for a normalized `B×3×H×W` batch. The pass is unmasked and
/// records no gradient.
pub fn compute_heatmaps(
    encoder: &Encoder,
    images: &Tensor,
    spec: &PatchSpec,
    source: &dyn HeatmapSource,
) -> Result<Vec<HeatMap>> {
    let use_cls = encoder.config().cls_token;
    if source.needs_cls() && !use_cls {
        return Err(CmaeError::config(format!(
            "heatmap source `{}` needs an encoder with a cls token",
            source.name()
        )));
    }
    let tokens = patchify(&images.detach(), spec)?;
    let out = encoder.encode_all(&tokens, use_cls)?;
    let scores = source.raw_scores(&out)?.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(scores
        .iter()
        .map(|row| HeatMap::from_raw(row, spec.grid_h, spec.grid_w))
        .collect())
}
