//! Procedurally generated datasets for smoke runs and tests.
//!
//! A config `data_root` of the form `synthetic:<kind>:<count>` selects one of
//! these instead of a directory tree.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, ImageRecord, Split};
use crate::error::{CmaeError, Result};
use crate::rng::{self, Stream};

pub const KINDS: [&str; 3] = ["shapes", "stripes", "corner"];

fn blank(size: usize, color: [u8; 3]) -> Vec<u8> {
    color.iter().copied().cycle().take(size * size * 3).collect()
}

fn put(px: &mut [u8], size: usize, r: usize, c: usize, color: [u8; 3]) {
    let i = (r * size + c) * 3;
    px[i..i + 3].copy_from_slice(&color);
}

fn color(rng: &mut ChaCha8Rng, lo: u8, hi: u8) -> [u8; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

fn record(pixels: Vec<u8>, size: usize, label: usize, id: String) -> ImageRecord {
    ImageRecord {
        pixels,
        height: size,
        width: size,
        label,
        source_id: id,
    }
}

/// Rectangles (label 0) and discs (label 1) of random bright colours on
/// dark backgrounds, alternating by index.
pub fn shapes(count: usize, size: usize, seed: u64) -> Vec<ImageRecord> {
    (0..count)
        .map(|i| {
            let mut rng = rng::keyed(seed, Stream::Synthetic, &[1, i as u64]);
            let label = i % 2;
            let bg = color(&mut rng, 0, 60);
            let fg = color(&mut rng, 150, 255);
            let mut px = blank(size, bg);
            let half = rng.random_range(size / 6..=size / 3).max(1);
            let cr = rng.random_range(half..=size - half);
            let cc = rng.random_range(half..=size - half);
            for r in 0..size {
                for c in 0..size {
                    let (dr, dc) = (r as f64 + 0.5 - cr as f64, c as f64 + 0.5 - cc as f64);
                    let inside = if label == 0 {
                        dr.abs() < half as f64 && dc.abs() < half as f64
                    } else {
                        dr * dr + dc * dc < (half * half) as f64
                    };
                    if inside {
                        put(&mut px, size, r, c, fg);
                    }
                }
            }
            record(px, size, label, format!("shapes/{i:06}"))
        })
        .collect()
}

/// Horizontal (label 0) or vertical (label 1) stripes with random period,
/// phase and colours.
pub fn stripes(count: usize, size: usize, seed: u64) -> Vec<ImageRecord> {
    (0..count)
        .map(|i| {
            let mut rng = rng::keyed(seed, Stream::Synthetic, &[2, i as u64]);
            let label = i % 2;
            let a = color(&mut rng, 0, 90);
            let b = color(&mut rng, 160, 255);
            let period = rng.random_range(4..=10usize);
            let phase = rng.random_range(0..period);
            let mut px = blank(size, a);
            for r in 0..size {
                for c in 0..size {
                    let t = if label == 0 { r } else { c };
                    if (t + phase) % period < period / 2 {
                        put(&mut px, size, r, c, b);
                    }
                }
            }
            record(px, size, label, format!("stripes/{i:06}"))
        })
        .collect()
}

/// A bright square object inside quadrant `quadrant` (0 top-left, 1
/// top-right, 2 bottom-left, 3 bottom-right) on a black background.
pub fn corner_objects(count: usize, size: usize, seed: u64, quadrant: usize) -> Vec<ImageRecord> {
    let q = size / 2;
    (0..count)
        .map(|i| {
            let mut rng = rng::keyed(seed, Stream::Synthetic, &[3, i as u64, quadrant as u64]);
            let fg = color(&mut rng, 200, 255);
            let side = rng.random_range((q * 5 / 8).max(1)..=(q * 7 / 8).max(1));
            let r0 = (quadrant / 2) * q + rng.random_range(0..=q - side);
            let c0 = (quadrant % 2) * q + rng.random_range(0..=q - side);
            let mut px = blank(size, [0, 0, 0]);
            for r in r0..r0 + side {
                for c in c0..c0 + side {
                    put(&mut px, size, r, c, fg);
                }
            }
            record(px, size, quadrant, format!("corner/{quadrant}/{i:06}"))
        })
        .collect()
}

/// Resolves `synthetic:<kind>:<count>`; `None` when `root` is not synthetic.
pub fn from_root(root: &str, split: Split, size: usize, seed: u64) -> Option<Result<Dataset>> {
    let rest = root.strip_prefix("synthetic:")?;
    Some(parse_and_build(rest, split, size, seed))
}

fn parse_and_build(rest: &str, split: Split, size: usize, seed: u64) -> Result<Dataset> {
    let (kind, count) = rest
        .split_once(':')
        .ok_or_else(|| CmaeError::config(format!("expected synthetic:<kind>:<count>, got synthetic:{rest}")))?;
    let count: usize = count
        .parse()
        .map_err(|_| CmaeError::config(format!("bad synthetic image count `{count}`")))?;
    // validation images come from a disjoint seed
    let seed = match split {
        Split::Train => seed,
        Split::Val => seed ^ 0x5eed_0000_0000_0001,
    };
    let (records, classes) = match kind {
        "shapes" => (shapes(count, size, seed), vec!["rect", "disc"]),
        "stripes" => (stripes(count, size, seed), vec!["horizontal", "vertical"]),
        "corner" => (corner_objects(count, size, seed, 0), vec!["top_left"]),
        other => {
            return Err(CmaeError::config(format!(
                "unknown synthetic dataset `{other}` (available: {})",
                KINDS.join(", ")
            )))
        }
    };
    Ok(Dataset {
        records,
        classes: classes.into_iter().map(String::from).collect(),
    })
}
