use std::sync::Arc;

use candle_core::Tensor;

use crate::error::{CmaeError, Result};
use crate::nn::{Init, LayerNorm, Linear, Mlp, Scope, TransformerBlock};
use crate::registry::{Named, Registry};

/// Geometry every decoder block is built against.
#[derive(Debug, Clone, Copy)]
pub struct BlockContext {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// A residual block over the full `B × N × dim` token sequence.
pub trait DecoderBlock: Send + Sync {
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
}

/// Factory for one block type, registered by name.
pub trait BlockKind: Named + Send + Sync {
    fn build(&self, s: &Scope, ctx: &BlockContext) -> Result<Box<dyn DecoderBlock>>;
    /// Learnable scalars in one block, in closed form.
    fn param_count(&self, ctx: &BlockContext) -> usize;
}

impl DecoderBlock for TransformerBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        TransformerBlock::forward(self, x)
    }
}

pub struct TransformerKind;

impl Named for TransformerKind {
    fn name(&self) -> &'static str {
        "transformer"
    }
}

impl BlockKind for TransformerKind {
    fn build(&self, s: &Scope, ctx: &BlockContext) -> Result<Box<dyn DecoderBlock>> {
        Ok(Box::new(TransformerBlock::new(s, ctx.dim, ctx.heads, ctx.mlp_ratio)?))
    }

    fn param_count(&self, ctx: &BlockContext) -> usize {
        let (d, r) = (ctx.dim, ctx.mlp_ratio);
        // two norms, qkv, output projection, mlp
        4 * d + (3 * d * d + 3 * d) + (d * d + d) + (r * d * d + r * d) + (r * d * d + d)
    }
}

/// Token-wise `x + W₂·gelu(W₁·norm(x))`; no mixing across tokens.
struct TokenMlpBlock {
    norm: LayerNorm,
    mlp: Mlp,
}

impl DecoderBlock for TokenMlpBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.mlp.forward(&self.norm.forward(x)?)?)?)
    }
}

pub struct MlpKind;

impl Named for MlpKind {
    fn name(&self) -> &'static str {
        "mlp"
    }
}

impl BlockKind for MlpKind {
    fn build(&self, s: &Scope, ctx: &BlockContext) -> Result<Box<dyn DecoderBlock>> {
        Ok(Box::new(TokenMlpBlock {
            norm: LayerNorm::new(&s.pp("norm"), ctx.dim)?,
            mlp: Mlp::new(&s.pp("mlp"), ctx.dim, ctx.dim * 4, ctx.dim)?,
        }))
    }

    fn param_count(&self, ctx: &BlockContext) -> usize {
        let d = ctx.dim;
        2 * d + (4 * d * d + 4 * d) + (4 * d * d + d)
    }
}

/// 3×3, stride 1, zero padding 1 over the token grid, either depthwise
/// (`weight: 3×3×dim`) or dense (`weight: 3×3×dim×dim`).
struct Conv3x3 {
    weight: Tensor,
    bias: Tensor,
    depthwise: bool,
}

impl Conv3x3 {
    fn new(s: &Scope, dim: usize, depthwise: bool) -> Result<Self> {
        let (dims, fan_in): (Vec<usize>, usize) = if depthwise {
            (vec![3, 3, dim], 9)
        } else {
            (vec![3, 3, dim, dim], 9 * dim)
        };
        let weight = s.get("weight", &dims, Init::Uniform(1.0 / (fan_in as f64).sqrt()))?;
        let bias = s.get("bias", &[dim], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            depthwise,
        })
    }

    /// `x`: `B × gh × gw × dim`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, gh, gw, dim) = x.dims4()?;
        let padded = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        let mut acc: Option<Tensor> = None;
        for dy in 0..3 {
            for dx in 0..3 {
                let window = padded.narrow(1, dy, gh)?.narrow(2, dx, gw)?;
                let w = self.weight.get(dy)?.get(dx)?;
                let term = if self.depthwise {
                    window.broadcast_mul(&w)?
                } else {
                    window
                        .contiguous()?
                        .reshape((b * gh * gw, dim))?
                        .matmul(&w)?
                        .reshape((b, gh, gw, dim))?
                };
                acc = Some(match acc {
                    None => term,
                    Some(a) => (a + term)?,
                });
            }
        }
        Ok(acc.unwrap().broadcast_add(&self.bias)?)
    }
}

/// `x + pointwise(gelu(conv3x3(norm(x))))` on the token grid.
struct ConvBlock {
    norm: LayerNorm,
    conv: Conv3x3,
    pointwise: Linear,
    grid_h: usize,
    grid_w: usize,
}

impl DecoderBlock for ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, dim) = x.dims3()?;
        if n != self.grid_h * self.grid_w {
            return Err(CmaeError::shape(format!(
                "conv block expects {} tokens, got {n}",
                self.grid_h * self.grid_w
            )));
        }
        let y = self
            .norm
            .forward(x)?
            .reshape((b, self.grid_h, self.grid_w, dim))?;
        let y = self.conv.forward(&y)?.gelu_erf()?.reshape((b, n, dim))?;
        Ok((x + self.pointwise.forward(&y)?)?)
    }
}

pub struct ConvKind {
    pub depthwise: bool,
}

impl Named for ConvKind {
    fn name(&self) -> &'static str {
        if self.depthwise {
            "conv"
        } else {
            "conv_dense"
        }
    }
}

impl BlockKind for ConvKind {
    fn build(&self, s: &Scope, ctx: &BlockContext) -> Result<Box<dyn DecoderBlock>> {
        Ok(Box::new(ConvBlock {
            norm: LayerNorm::new(&s.pp("norm"), ctx.dim)?,
            conv: Conv3x3::new(&s.pp("conv"), ctx.dim, self.depthwise)?,
            pointwise: Linear::new(&s.pp("pointwise"), ctx.dim, ctx.dim)?,
            grid_h: ctx.grid_h,
            grid_w: ctx.grid_w,
        }))
    }

    fn param_count(&self, ctx: &BlockContext) -> usize {
        let d = ctx.dim;
        let conv = if self.depthwise { 9 * d } else { 9 * d * d };
        2 * d + conv + d + (d * d + d)
    }
}

pub fn block_kinds() -> Registry<dyn BlockKind> {
    let mut r: Registry<dyn BlockKind> = Registry::new("decoder block");
    r.register(Arc::new(TransformerKind))
        .register(Arc::new(MlpKind))
        .register(Arc::new(ConvKind { depthwise: true }))
        .register(Arc::new(ConvKind { depthwise: false }));
    r
}
