//! Dataset ingestion, normalization, two-view augmentation and patch
//! tokenization.

mod augment;
mod patch;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use walkdir::WalkDir;

use crate::error::{CmaeError, Result};

pub use augment::{crop_resize_normalize, make_views, AugPolicy, ViewPair};
pub use patch::{patchify, unpatchify, PatchSpec};

/// Environment variable consulted when no dataset root is configured.
pub const DATA_ROOT_ENV: &str = "CMAE_DATA_ROOT";

const IMAGE_EXTENSIONS: [&str; 3] = ["jpeg", "jpg", "png"];

/// One decoded RGB image, `height × width × 3` interleaved bytes.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub pixels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub label: usize,
    /// Stable identifier (path relative to the split root).
    pub source_id: String,
}

impl ImageRecord {
    #[inline]
    pub fn at(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.pixels[(row * self.width + col) * 3 + channel]
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Keeps the first `n` records (load order is deterministic).
    pub fn truncate(&mut self, n: usize) {
        self.records.truncate(n);
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn decode(path: &Path, image_size: usize) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|source| CmaeError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let img = if img.width() as usize == image_size && img.height() as usize == image_size {
        img
    } else {
        image::imageops::resize(
            &img,
            image_size as u32,
            image_size as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    Ok((img.into_raw(), image_size, image_size))
}

fn sorted_class_dirs(split_root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(split_root).map_err(|e| CmaeError::io(split_root, e))? {
        let entry = entry.map_err(|e| CmaeError::io(split_root, e))?;
        if entry.path().is_dir() {
            dirs.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Loads `<root>/<split>/<class>/**/*.{jpeg,jpg,png}`.
///
/// Records are ordered lexicographically by path and labelled by the sorted
/// class-directory names; images are resized bilinearly to
/// `image_size × image_size` when they are not already that size. A split
/// directory holding `val_annotations.txt` and a flat `images/` folder (the
/// tiny-imagenet validation layout) is also accepted.
pub fn load_dataset(root: &Path, split: Split, image_size: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(CmaeError::config(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let split_root = root.join(split.dir_name());
    if !split_root.is_dir() {
        return Err(CmaeError::config(format!(
            "split directory {} does not exist",
            split_root.display()
        )));
    }
    let annotations = split_root.join("val_annotations.txt");
    if annotations.is_file() {
        return load_annotated(&split_root, &annotations, image_size);
    }

    let class_dirs = sorted_class_dirs(&split_root)?;
    if class_dirs.is_empty() {
        return Err(CmaeError::Data(format!(
            "no classes found under {}",
            split_root.display()
        )));
    }
    let mut records = Vec::new();
    let mut classes = Vec::with_capacity(class_dirs.len());
    for (label, (name, dir)) in class_dirs.into_iter().enumerate() {
        let mut files: Vec<PathBuf> = WalkDir::new(&dir)
            .sort_by_file_name()
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file() && has_image_extension(e.path()))
            .map(|e| e.into_path())
            .collect();
        files.sort();
        if files.is_empty() {
            log::warn!("class directory {} holds no images", dir.display());
        }
        for path in files {
            let (pixels, height, width) = decode(&path, image_size)?;
            let source_id = path
                .strip_prefix(&split_root)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            records.push(ImageRecord {
                pixels,
                height,
                width,
                label,
                source_id,
            });
        }
        classes.push(name);
    }
    Ok(Dataset { records, classes })
}

fn load_annotated(split_root: &Path, annotations: &Path, image_size: usize) -> Result<Dataset> {
    let text = fs::read_to_string(annotations).map_err(|e| CmaeError::io(annotations, e))?;
    let mut rows: Vec<(String, String)> = text
        .lines()
        .filter_map(|l| {
            let mut it = l.split('\t');
            Some((it.next()?.to_string(), it.next()?.to_string()))
        })
        .collect();
    rows.sort();
    let classes: Vec<String> = rows
        .iter()
        .map(|(_, c)| c.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.is_empty() {
        return Err(CmaeError::Data(format!(
            "no classes found in {}",
            annotations.display()
        )));
    }
    let index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut records = Vec::with_capacity(rows.len());
    for (file, class) in &rows {
        let path = split_root.join("images").join(file);
        let (pixels, height, width) = decode(&path, image_size)?;
        records.push(ImageRecord {
            pixels,
            height,
            width,
            label: index[class.as_str()],
            source_id: format!("images/{file}"),
        });
    }
    Ok(Dataset { records, classes })
}

/// Writes `classes.txt`, one class name per line in label order.
pub fn write_class_manifest(classes: &[String], path: &Path) -> Result<()> {
    let mut text = classes.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| CmaeError::io(path, e))
}

pub fn read_class_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CmaeError::io(path, e))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Per-channel statistics over `[0,1]`-scaled intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl NormStats {
    /// Exact per-channel mean and population std over every pixel of
    /// `records`. A channel with zero variance gets std 1.
    pub fn compute(records: &[ImageRecord]) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0usize;
        for r in records {
            for px in r.pixels.chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += r.height * r.width;
        }
        if count == 0 {
            return Self::default();
        }
        let mut mean = [0f64; 3];
        let mut std = [1f64; 3];
        for c in 0..3 {
            mean[c] = sum[c] / count as f64;
            let var = (sq[c] / count as f64 - mean[c] * mean[c]).max(0.0);
            if var > 1e-12 {
                std[c] = var.sqrt();
            }
        }
        Self { mean, std }
    }

    pub fn normalize(&self, value: f64, channel: usize) -> f64 {
        (value - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, value: f64, channel: usize) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }
}

/// Unaugmented, normalized `B×3×H×W` batch.
pub fn normalized_batch(
    records: &[&ImageRecord],
    stats: &NormStats,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let first = records
        .first()
        .ok_or_else(|| CmaeError::shape("empty batch"))?;
    let (h, w) = (first.height, first.width);
    let mut buf = Vec::with_capacity(records.len() * 3 * h * w);
    for r in records {
        if r.height != h || r.width != w {
            return Err(CmaeError::shape(format!(
                "mixed image sizes in batch: {}x{} vs {}x{}",
                r.height, r.width, h, w
            )));
        }
        for c in 0..3 {
            for row in 0..h {
                for col in 0..w {
                    let v = r.at(row, col, c) as f64 / 255.0;
                    buf.push(stats.normalize(v, c) as f32);
                }
            }
        }
    }
    Ok(Tensor::from_vec(buf, (records.len(), 3, h, w), device)?.to_dtype(dtype)?)
}
