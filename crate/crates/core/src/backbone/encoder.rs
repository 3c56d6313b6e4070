use candle_core::{DType, Device, Tensor};

use crate::error::{CmaeError, Result};
use crate::nn::{sincos_2d, Init, LayerNorm, Linear, Scope, TransformerBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosEmbedKind {
    /// Fixed 2-D sine-cosine table.
    Sincos,
    Learned,
}

impl PosEmbedKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sincos" => Ok(Self::Sincos),
            "learned" => Ok(Self::Learned),
            other => Err(CmaeError::config(format!(
                "pos_embed must be sincos or learned, got `{other}`"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sincos => "sincos",
            Self::Learned => "learned",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub cls_token: bool,
    pub pos_embed: PosEmbedKind,
}

impl ViTConfig {
    /// Depth 4, width 192, 4 heads, 8px patches on 64px images (64 tokens).
    pub fn desk() -> Self {
        Self {
            depth: 4,
            dim: 192,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 8,
            image_size: 64,
            cls_token: true,
            pos_embed: PosEmbedKind::Sincos,
        }
    }

    /// ViT-Base geometry.
    pub fn base() -> Self {
        Self {
            depth: 12,
            dim: 768,
            heads: 12,
            ..Self::desk()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn token_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(CmaeError::config("encoder depth must be at least 1"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(CmaeError::config(format!(
                "encoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.pos_embed == PosEmbedKind::Sincos && !self.dim.is_multiple_of(4) {
            return Err(CmaeError::config("sincos positions need dim divisible by 4"));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(CmaeError::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Final-normalized features, `B × (n[+1]) × D`, cls first when present.
    pub tokens: Tensor,
    /// Residual stream after the last block, before the final norm.
    pub last_block: Tensor,
    /// Attention probabilities of the last block, `B × heads × len × len`.
    pub last_attn: Option<Tensor>,
    pub has_cls: bool,
}

impl EncoderOutput {
    /// Patch-token features without cls.
    pub fn patch_tokens(&self) -> Result<Tensor> {
        strip_cls(&self.tokens, self.has_cls)
    }

    pub fn cls(&self) -> Result<Option<Tensor>> {
        if self.has_cls {
            Ok(Some(self.tokens.narrow(1, 0, 1)?.squeeze(1)?))
        } else {
            Ok(None)
        }
    }
}

fn strip_cls(t: &Tensor, has_cls: bool) -> Result<Tensor> {
    if has_cls {
        let n = t.dim(1)?;
        Ok(t.narrow(1, 1, n - 1)?)
    } else {
        Ok(t.clone())
    }
}

/// Builds the positional table as a constant tensor.
pub(crate) fn sincos_table(dim: usize, grid: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v = sincos_2d(dim, grid, grid)?;
    Ok(Tensor::from_vec(v, (grid * grid, dim), device)?.to_dtype(dtype)?)
}

/// Vision transformer encoder over arbitrary subsets of patch tokens.
pub struct Encoder {
    cfg: ViTConfig,
    patch_embed: Linear,
    pos: Tensor,
    cls: Option<Tensor>,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl Encoder {
    /// Builds (or fetches) the encoder parameters under `s`. Depth 0 is
    /// accepted here and yields embedding followed by the final norm.
    pub fn new(s: &Scope, cfg: &ViTConfig) -> Result<Self> {
        let k = cfg.token_len();
        let n = cfg.num_tokens();
        let patch_embed = Linear::with_init(
            &s.pp("patch_embed"),
            k,
            cfg.dim,
            Init::XavierUniform {
                fan_in: k,
                fan_out: cfg.dim,
            },
        )?;
        let pos = match cfg.pos_embed {
            PosEmbedKind::Sincos => sincos_table(cfg.dim, cfg.grid(), s.dtype(), s.device())?,
            PosEmbedKind::Learned => s.get("pos_embed", &[n, cfg.dim], Init::Normal(0.02))?,
        };
        let cls = if cfg.cls_token {
            Some(s.get("cls_token", &[1, 1, cfg.dim], Init::Normal(0.02))?)
        } else {
            None
        };
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&s.pp(format!("blocks.{i}")), cfg.dim, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&s.pp("norm"), cfg.dim)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            pos,
            cls,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    /// Encodes `B × n × P²·3` pixel tokens whose original grid slots are
    /// `positions` (`B × n`, u32). Output order follows input order.
    pub fn encode(&self, pixel_tokens: &Tensor, positions: &Tensor, use_cls: bool) -> Result<EncoderOutput> {
        let (b, n, k) = pixel_tokens.dims3()?;
        if k != self.cfg.token_len() {
            return Err(CmaeError::shape(format!(
                "encoder expects tokens of length {}, got {k}",
                self.cfg.token_len()
            )));
        }
        if positions.dims() != [b, n] {
            return Err(CmaeError::shape(format!(
                "positions {:?} do not match tokens {:?}",
                positions.dims(),
                pixel_tokens.dims()
            )));
        }
        let flat = positions.flatten_all()?;
        if n > 0 {
            let max = flat.max(0)?.to_dtype(DType::U32)?.to_scalar::<u32>()? as usize;
            if max >= self.cfg.num_tokens() {
                return Err(CmaeError::shape(format!(
                    "position index {max} outside [0, {})",
                    self.cfg.num_tokens()
                )));
            }
        }
        if use_cls && self.cls.is_none() {
            return Err(CmaeError::config("encoder was built without a cls token"));
        }
        let pos = self.pos.index_select(&flat, 0)?.reshape((b, n, self.cfg.dim))?;
        let mut x = self.patch_embed.forward(pixel_tokens)?.broadcast_add(&pos)?;
        if use_cls {
            let cls = self.cls.as_ref().unwrap().broadcast_as((b, 1, self.cfg.dim))?;
            x = Tensor::cat(&[&cls, &x], 1)?;
        }
        let mut last_attn = None;
        for (i, block) in self.blocks.iter().enumerate() {
            if i + 1 == self.blocks.len() {
                let (y, a) = block.forward_with_attn(&x)?;
                x = y;
                last_attn = Some(a);
            } else {
                x = block.forward(&x)?;
            }
        }
        Ok(EncoderOutput {
            tokens: self.norm.forward(&x)?,
            last_block: x,
            last_attn,
            has_cls: use_cls,
        })
    }

    /// Encodes a full, unmasked token sequence.
    pub fn encode_all(&self, pixel_tokens: &Tensor, use_cls: bool) -> Result<EncoderOutput> {
        let (b, n, _) = pixel_tokens.dims3()?;
        let positions = Tensor::arange(0u32, n as u32, pixel_tokens.device())?
            .unsqueeze(0)?
            .broadcast_as((b, n))?
            .contiguous()?;
        self.encode(pixel_tokens, &positions, use_cls)
    }

    /// Mean-pooled patch features of full images (probe representation).
    pub fn pooled_features(&self, pixel_tokens: &Tensor) -> Result<Tensor> {
        let out = self.encode_all(pixel_tokens, self.cfg.cls_token)?;
        Ok(out.patch_tokens()?.mean(1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::{self, Stream};
    use rand::seq::SliceRandom;

    fn tiny() -> ViTConfig {
        ViTConfig {
            depth: 2,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 4,
            image_size: 16,
            cls_token: true,
            pos_embed: PosEmbedKind::Sincos,
        }
    }

    fn random_tokens(b: usize, n: usize, k: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut r = rng::keyed(seed, Stream::Synthetic, &[]);
        let v: Vec<f64> = (0..b * n * k).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (b, n, k), &Device::Cpu).unwrap()
    }

    #[test]
    fn full_sequence_has_cls() {
        let store = ParamStore::new(DType::F64, Device::Cpu, 0);
        let enc = Encoder::new(&store.scope("encoder", true), &tiny()).unwrap();
        let out = enc.encode_all(&random_tokens(2, 16, 48, 1), true).unwrap();
        assert_eq!(out.tokens.dims(), &[2, 17, 16]);
        assert_eq!(out.patch_tokens().unwrap().dims(), &[2, 16, 16]);
        assert_eq!(out.last_attn.unwrap().dims(), &[2, 2, 17, 17]);
    }

    #[test]
    fn permutation_equivariance() {
        let store = ParamStore::new(DType::F64, Device::Cpu, 0);
        let cfg = tiny();
        let enc = Encoder::new(&store.scope("encoder", true), &cfg).unwrap();
        let x = random_tokens(1, 16, 48, 2);
        let base = enc.encode_all(&x, true).unwrap().patch_tokens().unwrap();
        let mut perm: Vec<u32> = (0..16).collect();
        perm.shuffle(&mut rng::keyed(5, Stream::Mask, &[]));
        let idx = Tensor::new(perm.as_slice(), &Device::Cpu).unwrap();
        let xp = x.index_select(&idx, 1).unwrap();
        let pos = idx.unsqueeze(0).unwrap();
        let out = enc.encode(&xp, &pos, true).unwrap().patch_tokens().unwrap();
        let expected = base.index_select(&idx, 1).unwrap();
        let diff = (out - expected).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-5);
    }

    #[test]
    fn zero_depth_is_embedding_plus_norm() {
        let store = ParamStore::new(DType::F64, Device::Cpu, 0);
        let cfg = ViTConfig { depth: 0, cls_token: false, ..tiny() };
        let s = store.scope("encoder", true);
        let enc = Encoder::new(&s, &cfg).unwrap();
        let x = random_tokens(1, 16, 48, 3);
        let out = enc.encode_all(&x, false).unwrap();
        let embed = Linear::new(&s.pp("patch_embed"), 48, 16).unwrap();
        let pos = sincos_table(16, 4, DType::F64, &Device::Cpu).unwrap();
        let norm = LayerNorm::new(&s.pp("norm"), 16).unwrap();
        let expected = norm
            .forward(&embed.forward(&x).unwrap().broadcast_add(&pos).unwrap())
            .unwrap();
        let diff = (out.tokens - expected).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_positions_and_cls() {
        let store = ParamStore::new(DType::F64, Device::Cpu, 0);
        let enc = Encoder::new(&store.scope("encoder", true), &ViTConfig { cls_token: false, ..tiny() }).unwrap();
        let x = random_tokens(1, 2, 48, 3);
        let pos = Tensor::new(&[[0u32, 16]], &Device::Cpu).unwrap();
        assert!(enc.encode(&x, &pos, false).is_err());
        let pos = Tensor::new(&[[0u32, 1]], &Device::Cpu).unwrap();
        assert_eq!(enc.encode(&x, &pos, true).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn inference_is_deterministic() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let enc = Encoder::new(&store.scope("encoder", false), &tiny()).unwrap();
        let x = random_tokens(2, 16, 48, 4).to_dtype(DType::F32).unwrap();
        let a = enc.encode_all(&x, true).unwrap().tokens.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = enc.encode_all(&x, true).unwrap().tokens.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
