//! Heatmap and crop-rectangle overlays for inspection.

use std::path::{Path, PathBuf};

use candle_core::Device;
use image::{Rgb, RgbImage};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::train::open_split;
use crate::crop::{compute_heatmaps, heatmap_sources, localize, BoundingRect, BoxCache, CachedRect, HeatMap};
use crate::datapipe::{normalized_batch, ImageRecord, NormStats, PatchSpec, Split};
use crate::error::{CmaeError, Result};
use crate::nn::ParamStore;

/// Smallest integer upscale that makes the rendered image at least 128 px.
fn upscale(size: usize) -> u32 {
    (128usize.div_ceil(size.max(1))).max(1) as u32
}

/// The image tinted red by `map`, with `rect` outlined in green.
pub fn render_overlay(rec: &ImageRecord, map: &HeatMap, rect: &BoundingRect, patch: usize) -> RgbImage {
    let s = upscale(rec.width.max(rec.height));
    let (w, h) = (rec.width as u32 * s, rec.height as u32 * s);
    let (x0, x1, y0, y1) = rect.pixel_extent(patch);
    let (x0, x1, y0, y1) = (x0 as u32 * s, x1 as u32 * s - 1, y0 as u32 * s, y1 as u32 * s - 1);
    RgbImage::from_fn(w, h, |x, y| {
        let (r, c) = ((y / s) as usize, (x / s) as usize);
        let border = ((x == x0 || x == x1) && (y0..=y1).contains(&y)) || ((y == y0 || y == y1) && (x0..=x1).contains(&x));
        if border {
            return Rgb([0, 255, 0]);
        }
        let heat = map.at((r / patch).min(map.grid_h - 1), (c / patch).min(map.grid_w - 1));
        let px = |ch: usize| rec.at(r, c, ch) as f64;
        let a = 0.5 * heat;
        Rgb([
            (px(0) * (1.0 - a) + 255.0 * a).round() as u8,
            (px(1) * (1.0 - a)).round() as u8,
            (px(2) * (1.0 - a)).round() as u8,
        ])
    })
}

fn file_stem(source_id: &str) -> String {
    source_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes one overlay PNG per previewed image and their rectangles as
/// `crop_boxes.tsv` into `out`. Weights come from `ckpt` when given,
/// otherwise from a fresh initialization.
pub fn crop_preview(cfg: &TrainConfig, ckpt: Option<&Checkpoint>, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = open_split(cfg, Split::Train, cfg.preview_count)?;
    let device = Device::Cpu;
    let backbone = cfg.backbone();
    let store = ParamStore::new(cfg.dtype, device.clone(), cfg.seed);
    let encoder = backbone.encoder(&store, false)?;
    let stats = match ckpt {
        Some(ck) => {
            let wanted = ck
                .online
                .iter()
                .filter(|(k, _)| k.starts_with("encoder."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            store.load_from(&wanted)?;
            ck.stats
        }
        None => NormStats::compute(&data.records),
    };
    let patch = PatchSpec::new(cfg.patch_size, cfg.image_size, cfg.image_size)?;
    let source = heatmap_sources().get(&cfg.heatmap_source)?;
    std::fs::create_dir_all(out).map_err(|e| CmaeError::io(out, e))?;
    let refs: Vec<&ImageRecord> = data.records.iter().collect();
    let images = normalized_batch(&refs, &stats, cfg.dtype, &device)?;
    let maps = compute_heatmaps(&encoder, &images, &patch, source.as_ref())?;
    let mut cache = BoxCache::default();
    let mut written = Vec::new();
    for (rec, map) in data.records.iter().zip(&maps) {
        let rect = localize(map, cfg.crop_threshold);
        cache.insert(&rec.source_id, CachedRect { rect, epoch: 0 });
        let p = out.join(format!("{}.png", file_stem(&rec.source_id)));
        render_overlay(rec, map, &rect, cfg.patch_size)
            .save(&p)
            .map_err(|e| CmaeError::Data(format!("{}: {e}", p.display())))?;
        written.push(p);
    }
    cache.save_tsv(&out.join("crop_boxes.tsv"))?;
    Ok(written)
}
