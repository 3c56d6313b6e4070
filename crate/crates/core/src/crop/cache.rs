use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device};

use super::{compute_heatmaps, localize, BoundingRect, HeatmapSource};
use crate::backbone::Encoder;
use crate::datapipe::{normalized_batch, ImageRecord, NormStats, PatchSpec};
use crate::error::{CmaeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CachedRect {
    pub rect: BoundingRect,
    /// Epoch at which the rectangle was computed.
    pub epoch: u64,
}

/// Localized rectangles per `source_id`, replaced wholesale on refresh.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoxCache {
    entries: BTreeMap<String, CachedRect>,
}

const HEADER: &str = "source_id\trow_min\trow_max\tcol_min\tcol_max\tepoch";

impl BoxCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, source_id: &str, entry: CachedRect) {
        self.entries.insert(source_id.to_string(), entry);
    }

    pub fn get(&self, source_id: &str) -> Option<&CachedRect> {
        self.entries.get(source_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &CachedRect)> {
        self.entries.iter()
    }

    /// Rectangle for `source_id`; a miss falls back to the full grid.
    pub fn lookup(&self, source_id: &str, grid_h: usize, grid_w: usize) -> BoundingRect {
        match self.entries.get(source_id) {
            Some(e) => e.rect,
            None => {
                log::warn!("no cached crop rectangle for `{source_id}`, using the full image");
                BoundingRect::full(grid_h, grid_w)
            }
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut text = String::from(HEADER);
        text.push('\n');
        for (id, e) in &self.entries {
            let r = e.rect;
            text.push_str(&format!(
                "{id}\t{}\t{}\t{}\t{}\t{}\n",
                r.row_min, r.row_max, r.col_min, r.col_max, e.epoch
            ));
        }
        text
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| CmaeError::io(path, e))
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CmaeError::io(path, e))?;
        Self::parse_tsv(&text, path)
    }

    /// Parses manifest text; `origin` names the source in errors.
    pub fn parse_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut cache = BoxCache::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() || line == HEADER {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || CmaeError::Checkpoint {
                path: origin.to_path_buf(),
                reason: format!("malformed crop box line {}", lineno + 1),
            };
            if fields.len() != 6 {
                return Err(bad());
            }
            let nums: Vec<u64> = fields[1..]
                .iter()
                .map(|f| f.parse::<u64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let rect = BoundingRect {
                row_min: nums[0] as usize,
                row_max: nums[1] as usize,
                col_min: nums[2] as usize,
                col_max: nums[3] as usize,
            };
            if rect.row_min > rect.row_max || rect.col_min > rect.col_max {
                return Err(bad());
            }
            cache.insert(fields[0], CachedRect { rect, epoch: nums[4] });
        }
        Ok(cache)
    }
}

/// One full no-gradient pass over `records`, localizing every image.
#[allow(clippy::too_many_arguments)]
pub fn refresh_boxes(
    records: &[ImageRecord],
    encoder: &Encoder,
    stats: &NormStats,
    spec: &PatchSpec,
    threshold: f64,
    source: &dyn HeatmapSource,
    epoch: u64,
    batch_size: usize,
    dtype: DType,
    device: &Device,
) -> Result<BoxCache> {
    let mut cache = BoxCache::default();
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageRecord> = chunk.iter().collect();
        let images = normalized_batch(&refs, stats, dtype, device)?;
        let maps = compute_heatmaps(encoder, &images, spec, source)?;
        for (rec, map) in chunk.iter().zip(&maps) {
            cache.insert(
                &rec.source_id,
                CachedRect {
                    rect: localize(map, threshold),
                    epoch,
                },
            );
        }
    }
    Ok(cache)
}
