//! Semantic-aware cropping: heatmap construction from the online encoder,
//! thresholded localization of the main object, and crop sampling whose
//! centre is constrained to the localized rectangle.

mod cache;
mod heatmap;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{AugPolicy, ImageRecord};
use crate::error::Result;
use crate::registry::{Named, Registry};

pub use cache::{refresh_boxes, BoxCache, CachedRect};
pub use heatmap::{
    compute_heatmaps, heatmap_sources, AttentionMap, EncoderFeatures, HeatmapSource,
};

/// Rejection budget before falling back to a crop centred on the rectangle.
pub const DEFAULT_MAX_ATTEMPTS: usize = 10;

/// Min-max normalized object-saliency scores over the token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub scores: Vec<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl HeatMap {
    /// Normalizes raw scores into `[0,1]`. A constant map becomes all ones so
    /// that localization degrades to the full image.
    pub fn from_raw(raw: &[f64], grid_h: usize, grid_w: usize) -> Self {
        assert_eq!(raw.len(), grid_h * grid_w, "heatmap size mismatch");
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let scores = if !(range > 0.0) || !range.is_finite() {
            vec![1.0; raw.len()]
        } else {
            raw.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
        };
        Self {
            scores,
            grid_h,
            grid_w,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.grid_w + col]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .scores
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > self.scores[best] { i } else { best });
        (i / self.grid_w, i % self.grid_w)
    }
}

/// Inclusive rectangle in token-grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingRect {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BoundingRect {
    pub fn full(grid_h: usize, grid_w: usize) -> Self {
        Self {
            row_min: 0,
            row_max: grid_h - 1,
            col_min: 0,
            col_max: grid_w - 1,
        }
    }

    pub fn contains_rect(&self, other: &BoundingRect) -> bool {
        self.row_min <= other.row_min
            && self.row_max >= other.row_max
            && self.col_min <= other.col_min
            && self.col_max >= other.col_max
    }

    /// Pixel extent `[x_lo, x_hi] × [y_lo, y_hi]` for `patch`-pixel cells.
    pub fn pixel_extent(&self, patch: usize) -> (f64, f64, f64, f64) {
        (
            (self.col_min * patch) as f64,
            ((self.col_max + 1) * patch) as f64,
            (self.row_min * patch) as f64,
            ((self.row_max + 1) * patch) as f64,
        )
    }
}

/// Tight bounding rectangle of the cells scoring strictly above `k`; the
/// full grid when no cell passes.
pub fn localize(map: &HeatMap, k: f64) -> BoundingRect {
    let mut rect: Option<BoundingRect> = None;
    for r in 0..map.grid_h {
        for c in 0..map.grid_w {
            if map.at(r, c) > k {
                rect = Some(match rect {
                    None => BoundingRect {
                        row_min: r,
                        row_max: r,
                        col_min: c,
                        col_max: c,
                    },
                    Some(b) => BoundingRect {
                        row_min: b.row_min.min(r),
                        row_max: b.row_max.max(r),
                        col_min: b.col_min.min(c),
                        col_max: b.col_max.max(c),
                    },
                });
            }
        }
    }
    rect.unwrap_or_else(|| BoundingRect::full(map.grid_h, map.grid_w))
}

/// Pixel crop `[x1, x2) × [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl CropBox {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x1: 0,
            y1: 0,
            x2: width,
            y2: height,
        }
    }

    pub fn is_within(&self, width: usize, height: usize) -> bool {
        self.x1 < self.x2 && self.x2 <= width && self.y1 < self.y2 && self.y2 <= height
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) as f64 / 2.0, (self.y1 + self.y2) as f64 / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledCrop {
    pub crop: CropBox,
    pub fallback: bool,
}

/// One random-resized-crop draw: area fraction from `scale`, log-uniform
/// aspect from `ratio`, side lengths clamped to the image, uniform offset.
fn draw_box(
    scale: (f64, f64),
    ratio: (f64, f64),
    width: usize,
    height: usize,
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize, usize) {
    let area = (width * height) as f64 * rng.random_range(scale.0..=scale.1);
    let log_r = rng.random_range(ratio.0.ln()..=ratio.1.ln());
    let aspect = log_r.exp();
    let w = ((area * aspect).sqrt().round() as usize).clamp(1, width);
    let h = ((area / aspect).sqrt().round() as usize).clamp(1, height);
    let x1 = rng.random_range(0..=width - w);
    let y1 = rng.random_range(0..=height - h);
    (x1, y1, w, h)
}

/// Random-resized crop whose centre must fall inside `rect` (scaled to
/// pixels). Draws are rejected and redrawn up to `max_attempts` times;
/// after that the last drawn size is centred on the rectangle, shifted as
/// needed to stay inside the image, and the result is marked `fallback`.
#[allow(clippy::too_many_arguments)]
pub fn sample_crop(
    scale: (f64, f64),
    ratio: (f64, f64),
    rect: &BoundingRect,
    patch: usize,
    width: usize,
    height: usize,
    max_attempts: usize,
    rng: &mut ChaCha8Rng,
) -> SampledCrop {
    let (x_lo, x_hi, y_lo, y_hi) = rect.pixel_extent(patch);
    let mut last = (width, height);
    for _ in 0..max_attempts.max(1) {
        let (x1, y1, w, h) = draw_box(scale, ratio, width, height, rng);
        let crop = CropBox {
            x1,
            y1,
            x2: x1 + w,
            y2: y1 + h,
        };
        let (cx, cy) = crop.center();
        if cx >= x_lo && cx <= x_hi && cy >= y_lo && cy <= y_hi {
            return SampledCrop {
                crop,
                fallback: false,
            };
        }
        last = (w, h);
    }
    let (w, h) = last;
    let cx = (x_lo + x_hi) / 2.0;
    let cy = (y_lo + y_hi) / 2.0;
    let x1 = ((cx - w as f64 / 2.0).round().max(0.0) as usize).min(width - w);
    let y1 = ((cy - h as f64 / 2.0).round().max(0.0) as usize).min(height - h);
    log::debug!("crop fallback: centring {w}x{h} on rect {rect:?}");
    SampledCrop {
        crop: CropBox {
            x1,
            y1,
            x2: x1 + w,
            y2: y1 + h,
        },
        fallback: true,
    }
}

/// When to switch semantic-aware cropping on and how often to recompute
/// the rectangles. `warmup_epochs = None` never enables it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSchedule {
    pub warmup_epochs: Option<u64>,
    pub refresh_interval: u64,
}

impl CropSchedule {
    /// Default switch-on at 20% of training, refresh every 20 epochs.
    pub fn for_epochs(epochs: u64) -> Self {
        Self {
            warmup_epochs: Some(epochs / 5),
            refresh_interval: 20,
        }
    }

    pub fn never() -> Self {
        Self {
            warmup_epochs: None,
            refresh_interval: 20,
        }
    }

    pub fn active(&self, epoch: u64) -> bool {
        self.warmup_epochs.is_some_and(|w| epoch >= w)
    }

    /// True at the start of epochs where the rectangles must be recomputed.
    pub fn refresh_due(&self, epoch: u64) -> bool {
        match self.warmup_epochs {
            Some(w) if epoch >= w => (epoch - w).is_multiple_of(self.refresh_interval.max(1)),
            _ => false,
        }
    }
}

/// Produces a crop box for one view of one record.
pub trait CropSampler: Send + Sync {
    fn name(&self) -> &'static str;
    fn sample(&self, record: &ImageRecord, policy: &AugPolicy, rng: &mut ChaCha8Rng) -> Result<CropBox>;
}

/// Always the whole image.
pub struct FullImage;

impl CropSampler for FullImage {
    fn name(&self) -> &'static str {
        "full"
    }

    fn sample(&self, record: &ImageRecord, _: &AugPolicy, _: &mut ChaCha8Rng) -> Result<CropBox> {
        Ok(CropBox::full(record.width, record.height))
    }
}

/// Unconstrained random-resized crop.
pub struct RandomResizedCrop;

impl CropSampler for RandomResizedCrop {
    fn name(&self) -> &'static str {
        "random"
    }

    fn sample(&self, record: &ImageRecord, policy: &AugPolicy, rng: &mut ChaCha8Rng) -> Result<CropBox> {
        let (x1, y1, w, h) = draw_box(policy.scale, policy.ratio, record.width, record.height, rng);
        Ok(CropBox {
            x1,
            y1,
            x2: x1 + w,
            y2: y1 + h,
        })
    }
}

/// Random-resized crop constrained to each image's cached rectangle.
pub struct ContrastiveCrop {
    pub cache: Arc<BoxCache>,
    pub patch_size: usize,
    pub max_attempts: usize,
}

impl CropSampler for ContrastiveCrop {
    fn name(&self) -> &'static str {
        "contrastive"
    }

    fn sample(&self, record: &ImageRecord, policy: &AugPolicy, rng: &mut ChaCha8Rng) -> Result<CropBox> {
        let grid_h = record.height / self.patch_size;
        let grid_w = record.width / self.patch_size;
        let rect = self.cache.lookup(&record.source_id, grid_h, grid_w);
        let s = sample_crop(
            policy.scale,
            policy.ratio,
            &rect,
            self.patch_size,
            record.width,
            record.height,
            self.max_attempts,
            rng,
        );
        Ok(s.crop)
    }
}

/// Everything a crop mode may need to build its sampler.
pub struct CropContext {
    pub cache: Arc<BoxCache>,
    pub patch_size: usize,
}

/// A selectable crop strategy (`crop_mode` in the run config).
pub trait CropMode: Named + Send + Sync {
    /// Whether the mode consumes localized rectangles (and therefore needs
    /// refreshes on the crop schedule).
    fn uses_rects(&self) -> bool;
    fn sampler(&self, ctx: &CropContext) -> Box<dyn CropSampler>;
}

struct RandomMode;
struct FullMode;
struct ContrastiveMode;

impl Named for RandomMode {
    fn name(&self) -> &'static str {
        "random"
    }
}
impl CropMode for RandomMode {
    fn uses_rects(&self) -> bool {
        false
    }
    fn sampler(&self, _: &CropContext) -> Box<dyn CropSampler> {
        Box::new(RandomResizedCrop)
    }
}

impl Named for FullMode {
    fn name(&self) -> &'static str {
        "full"
    }
}
impl CropMode for FullMode {
    fn uses_rects(&self) -> bool {
        false
    }
    fn sampler(&self, _: &CropContext) -> Box<dyn CropSampler> {
        Box::new(FullImage)
    }
}

impl Named for ContrastiveMode {
    fn name(&self) -> &'static str {
        "contrastive"
    }
}
impl CropMode for ContrastiveMode {
    fn uses_rects(&self) -> bool {
        true
    }
    fn sampler(&self, ctx: &CropContext) -> Box<dyn CropSampler> {
        Box::new(ContrastiveCrop {
            cache: ctx.cache.clone(),
            patch_size: ctx.patch_size,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        })
    }
}

pub fn crop_modes() -> Registry<dyn CropMode> {
    let mut r: Registry<dyn CropMode> = Registry::new("crop mode");
    r.register(Arc::new(RandomMode))
        .register(Arc::new(FullMode))
        .register(Arc::new(ContrastiveMode));
    r
}
