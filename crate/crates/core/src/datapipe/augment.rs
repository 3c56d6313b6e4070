use candle_core::{DType, Device, Tensor};
use rand::Rng;

use super::{ImageRecord, NormStats};
use crate::crop::{CropBox, CropSampler};
use crate::error::{CmaeError, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone)]
pub struct AugPolicy {
    pub flip_prob: f64,
    /// Area fraction range `s` for random-resized cropping.
    pub scale: (f64, f64),
    /// Aspect-ratio range `r` (width / height).
    pub ratio: (f64, f64),
    pub stats: NormStats,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            stats: NormStats::default(),
        }
    }
}

impl AugPolicy {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(CmaeError::config(format!(
                "scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        let (lo, hi) = self.ratio;
        if !(lo > 0.0 && lo <= hi) {
            return Err(CmaeError::config(format!(
                "aspect range ({lo}, {hi}) must be positive and ordered"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(CmaeError::config("flip probability must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Two independently augmented views of the same images, index aligned.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub view_q: Tensor,
    pub view_k: Tensor,
    pub box_q: Vec<CropBox>,
    pub box_k: Vec<CropBox>,
}

/// Bilinearly resamples `bx` of `record` to `out_h × out_w`, optionally
/// mirrors it horizontally and writes normalized CHW values into `out`.
/// A full-image box at the native size is an exact copy.
pub fn crop_resize_normalize(
    record: &ImageRecord,
    bx: &CropBox,
    out_h: usize,
    out_w: usize,
    flip: bool,
    stats: &NormStats,
    out: &mut [f32],
) {
    let bw = (bx.x2 - bx.x1) as f64;
    let bh = (bx.y2 - bx.y1) as f64;
    let sx = bw / out_w as f64;
    let sy = bh / out_h as f64;
    let max_x = (bx.x2 - 1) as f64;
    let max_y = (bx.y2 - 1) as f64;
    let plane = out_h * out_w;
    for oy in 0..out_h {
        let fy = (bx.y1 as f64 + (oy as f64 + 0.5) * sy - 0.5).clamp(bx.y1 as f64, max_y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(bx.y2 - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = (bx.x1 as f64 + (ox as f64 + 0.5) * sx - 0.5).clamp(bx.x1 as f64, max_x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(bx.x2 - 1);
            let wx = fx - x0 as f64;
            let dst_x = if flip { out_w - 1 - ox } else { ox };
            for c in 0..3 {
                let v = if wx == 0.0 && wy == 0.0 {
                    record.at(y0, x0, c) as f64
                } else {
                    let top = record.at(y0, x0, c) as f64 * (1.0 - wx) + record.at(y0, x1, c) as f64 * wx;
                    let bot = record.at(y1, x0, c) as f64 * (1.0 - wx) + record.at(y1, x1, c) as f64 * wx;
                    top * (1.0 - wy) + bot * wy
                };
                out[c * plane + oy * out_w + dst_x] = stats.normalize(v / 255.0, c) as f32;
            }
        }
    }
}

/// Builds `(view_q, view_k)` for a batch of `(dataset index, record)`.
///
/// Each view draws its crop and flip from a stream keyed by
/// `(seed, epoch, dataset index, view)`, so the result does not depend on
/// batch composition or on which worker prepares it.
pub fn make_views(
    batch: &[(usize, &ImageRecord)],
    policy: &AugPolicy,
    sampler: &dyn CropSampler,
    seed: u64,
    epoch: u64,
    dtype: DType,
    device: &Device,
) -> Result<ViewPair> {
    let first = batch
        .first()
        .ok_or_else(|| CmaeError::shape("make_views on an empty batch"))?
        .1;
    let (h, w) = (first.height, first.width);
    let plane = 3 * h * w;
    let mut bufs = [vec![0f32; batch.len() * plane], vec![0f32; batch.len() * plane]];
    let mut boxes: [Vec<CropBox>; 2] = [Vec::with_capacity(batch.len()), Vec::with_capacity(batch.len())];
    for (i, (index, record)) in batch.iter().enumerate() {
        if record.height != h || record.width != w {
            return Err(CmaeError::shape("mixed image sizes in batch"));
        }
        for view in 0..2 {
            let mut rng = rng::keyed(seed, Stream::Augment, &[epoch, *index as u64, view as u64]);
            let bx = sampler.sample(record, policy, &mut rng)?;
            if !bx.is_within(w, h) {
                return Err(CmaeError::Data(format!(
                    "crop sampler `{}` produced out-of-bounds box {bx:?} for {}x{} image",
                    sampler.name(),
                    w,
                    h
                )));
            }
            let flip = policy.flip_prob > 0.0 && rng.random::<f64>() < policy.flip_prob;
            crop_resize_normalize(
                record,
                &bx,
                h,
                w,
                flip,
                &policy.stats,
                &mut bufs[view][i * plane..(i + 1) * plane],
            );
            boxes[view].push(bx);
        }
    }
    let [bq, bk] = bufs;
    let [box_q, box_k] = boxes;
    let shape = (batch.len(), 3, h, w);
    Ok(ViewPair {
        view_q: Tensor::from_vec(bq, shape, device)?.to_dtype(dtype)?,
        view_k: Tensor::from_vec(bk, shape, device)?.to_dtype(dtype)?,
        box_q,
        box_k,
    })
}
