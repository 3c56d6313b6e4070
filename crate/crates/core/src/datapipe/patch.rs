use candle_core::Tensor;

use crate::error::{CmaeError, Result};

/// Token grid geometry for square patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchSpec {
    pub fn new(patch_size: usize, height: usize, width: usize) -> Result<Self> {
        if patch_size == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
            return Err(CmaeError::shape(format!(
                "image {height}x{width} is not divisible into {patch_size}px patches"
            )));
        }
        Ok(Self {
            patch_size,
            grid_h: height / patch_size,
            grid_w: width / patch_size,
        })
    }

    /// Token count.
    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Pixels per token (`P²·3`).
    pub fn token_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn height(&self) -> usize {
        self.grid_h * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.grid_w * self.patch_size
    }
}

/// `B×3×H×W → B×N×(P²·3)`. Token `i` is grid cell `i` in row-major order;
/// inside a token pixels are row-major with channels last.
pub fn patchify(images: &Tensor, spec: &PatchSpec) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if c != 3 || h != spec.height() || w != spec.width() {
        return Err(CmaeError::shape(format!(
            "patchify expects Bx3x{}x{}, got {:?}",
            spec.height(),
            spec.width(),
            images.dims()
        )));
    }
    let p = spec.patch_size;
    let x = images
        .reshape(&[b, 3, spec.grid_h, p, spec.grid_w, p][..])?
        .permute(vec![0, 2, 4, 3, 5, 1])?
        .contiguous()?;
    Ok(x.reshape((b, spec.num_tokens(), spec.token_len()))?)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, spec: &PatchSpec) -> Result<Tensor> {
    let (b, n, k) = tokens.dims3()?;
    if n != spec.num_tokens() || k != spec.token_len() {
        return Err(CmaeError::shape(format!(
            "unpatchify expects Bx{}x{}, got {:?}",
            spec.num_tokens(),
            spec.token_len(),
            tokens.dims()
        )));
    }
    let p = spec.patch_size;
    let x = tokens
        .reshape(&[b, spec.grid_h, spec.grid_w, p, p, 3][..])?
        .permute(vec![0, 5, 1, 3, 2, 4])?
        .contiguous()?;
    Ok(x.reshape((b, 3, spec.height(), spec.width()))?)
}
