//! Pixel decoders over the full token grid: visible features are projected,
//! mask tokens fill the hidden slots, fixed positions are added and a stack
//! of blocks (chosen per family) runs before the per-token pixel head.

mod blocks;

use std::sync::Arc;

use candle_core::Tensor;

use crate::backbone::sincos_table;
use crate::error::{CmaeError, Result};
use crate::masking::{restore_merge, MaskBatch};
use crate::nn::{Init, LayerNorm, Linear, Scope};
use crate::registry::{Named, Registry};

pub use blocks::{block_kinds, BlockContext, BlockKind, DecoderBlock};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSpec {
    /// Family name, see [`decoder_families`].
    pub kind: String,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Dense 3×3 convolutions instead of depthwise ones.
    pub dense_conv: bool,
}

impl DecoderSpec {
    pub fn new(kind: &str, depth: usize, dim: usize, heads: usize) -> Self {
        Self {
            kind: kind.to_string(),
            depth,
            dim,
            heads,
            mlp_ratio: 4,
            dense_conv: false,
        }
    }

    /// The usual masked-autoencoder decoder: 8 transformer blocks at 512.
    pub fn mae_default() -> Self {
        Self::new("transformer", 8, 512, 16)
    }

    pub fn validate(&self) -> Result<()> {
        let layout = self.layout()?;
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(CmaeError::config(format!(
                "decoder dim must be a positive multiple of 4, got {}",
                self.dim
            )));
        }
        if layout.contains(&"transformer") && (self.heads == 0 || !self.dim.is_multiple_of(self.heads)) {
            return Err(CmaeError::config(format!(
                "decoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Block kind names from input to output.
    pub fn layout(&self) -> Result<Vec<&'static str>> {
        if self.depth == 0 {
            return Err(CmaeError::config("decoder depth must be at least 1"));
        }
        decoder_families().get(&self.kind)?.layout(self)
    }
}

/// A decoder family maps a spec to its sequence of block kinds.
pub trait DecoderFamily: Named + Send + Sync {
    fn layout(&self, spec: &DecoderSpec) -> Result<Vec<&'static str>>;
}

fn conv_name(spec: &DecoderSpec) -> &'static str {
    if spec.dense_conv {
        "conv_dense"
    } else {
        "conv"
    }
}

struct Uniform {
    name: &'static str,
    block: fn(&DecoderSpec) -> &'static str,
}

impl Named for Uniform {
    fn name(&self) -> &'static str {
        self.name
    }
}

impl DecoderFamily for Uniform {
    fn layout(&self, spec: &DecoderSpec) -> Result<Vec<&'static str>> {
        Ok(vec![(self.block)(spec); spec.depth])
    }
}

/// Transformer first and last, `middle` blocks in between.
struct Hybrid {
    name: &'static str,
    middle: fn(&DecoderSpec) -> &'static str,
}

impl Named for Hybrid {
    fn name(&self) -> &'static str {
        self.name
    }
}

impl DecoderFamily for Hybrid {
    fn layout(&self, spec: &DecoderSpec) -> Result<Vec<&'static str>> {
        if spec.depth < 3 {
            return Err(CmaeError::config(format!(
                "{} decoder needs depth >= 3, got {}",
                self.name, spec.depth
            )));
        }
        let mut v = vec!["transformer"];
        v.extend(std::iter::repeat_n((self.middle)(spec), spec.depth - 2));
        v.push("transformer");
        Ok(v)
    }
}

pub fn decoder_families() -> Registry<dyn DecoderFamily> {
    let mut r: Registry<dyn DecoderFamily> = Registry::new("decoder kind");
    r.register(Arc::new(Uniform {
        name: "transformer",
        block: |_| "transformer",
    }))
    .register(Arc::new(Uniform {
        name: "mlp",
        block: |_| "mlp",
    }))
    .register(Arc::new(Uniform {
        name: "conv",
        block: conv_name,
    }))
    .register(Arc::new(Hybrid {
        name: "hybrid_mlp",
        middle: |_| "mlp",
    }))
    .register(Arc::new(Hybrid {
        name: "hybrid_conv",
        middle: conv_name,
    }));
    r
}

/// Token geometry a decoder is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderGeometry {
    /// Width of the incoming encoder features.
    pub enc_dim: usize,
    pub grid: usize,
    /// Pixels per token, `P²·3`.
    pub token_len: usize,
}

impl DecoderGeometry {
    pub fn num_tokens(&self) -> usize {
        self.grid * self.grid
    }
}

fn block_context(spec: &DecoderSpec, geo: &DecoderGeometry) -> BlockContext {
    BlockContext {
        dim: spec.dim,
        heads: spec.heads,
        mlp_ratio: spec.mlp_ratio,
        grid_h: geo.grid,
        grid_w: geo.grid,
    }
}

pub struct Decoder {
    embed: Linear,
    mask_token: Tensor,
    pos: Tensor,
    blocks: Vec<Box<dyn DecoderBlock>>,
    norm: LayerNorm,
    head: Linear,
    num_tokens: usize,
}

impl Decoder {
    pub fn new(s: &Scope, spec: &DecoderSpec, geo: &DecoderGeometry) -> Result<Self> {
        spec.validate()?;
        let kinds = block_kinds();
        let ctx = block_context(spec, geo);
        let blocks = spec
            .layout()?
            .into_iter()
            .enumerate()
            .map(|(i, k)| kinds.get(k)?.build(&s.pp(format!("blocks.{i}")), &ctx))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: Linear::new(&s.pp("embed"), geo.enc_dim, spec.dim)?,
            mask_token: s.get("mask_token", &[1, 1, spec.dim], Init::Normal(0.02))?,
            pos: sincos_table(spec.dim, geo.grid, s.dtype(), s.device())?,
            blocks,
            norm: LayerNorm::new(&s.pp("norm"), spec.dim)?,
            head: Linear::new(&s.pp("head"), spec.dim, geo.token_len)?,
            num_tokens: geo.num_tokens(),
        })
    }

    /// Predicts `B × N × P²·3` pixels from visible-token encoder features
    /// (`B × |visible| × enc_dim`, cls already removed).
    pub fn decode(&self, visible: &Tensor, mask: &MaskBatch) -> Result<Tensor> {
        let (b, nv, _) = visible.dims3()?;
        if b != mask.batch_size() || nv != mask.num_visible() || mask.num_tokens() != self.num_tokens {
            return Err(CmaeError::shape(format!(
                "decoder got {b}x{nv} visible features for a plan of {} x {} visible of {} (decoder built for {})",
                mask.batch_size(),
                mask.num_visible(),
                mask.num_tokens(),
                self.num_tokens
            )));
        }
        let x = self.embed.forward(visible)?;
        let dim = x.dim(2)?;
        let fill = match mask.num_masked() {
            0 => None,
            nm => Some(self.mask_token.broadcast_as((b, nm, dim))?.contiguous()?),
        };
        let x = restore_merge(&x, fill.as_ref(), mask, false)?;
        let x = x.broadcast_add(&self.pos)?;
        let x = self.run_blocks(&x)?;
        self.head.forward(&self.norm.forward(&x)?)
    }

    /// The block stack alone, over a full `B × N × dim` sequence.
    pub fn run_blocks(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(x)
    }
}

/// Learnable scalars of the decoder built from `spec`: projection, mask
/// token, blocks, final norm and pixel head. The sine-cosine position table
/// is fixed and holds no parameters.
pub fn param_count(spec: &DecoderSpec, geo: &DecoderGeometry) -> Result<usize> {
    spec.validate()?;
    let kinds = block_kinds();
    let ctx = block_context(spec, geo);
    let d = spec.dim;
    let mut total = geo.enc_dim * d + d + d + 2 * d + d * geo.token_len + geo.token_len;
    for k in spec.layout()? {
        total += kinds.get(k)?.param_count(&ctx);
    }
    Ok(total)
}
