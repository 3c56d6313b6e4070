use candle_core::{Tensor, D};

use crate::error::{CmaeError, Result};
use crate::nn::{Linear, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Mean over the restored patch tokens.
    Mean,
    /// The visible-pass cls token.
    Cls,
}

impl Pooling {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "cls" => Ok(Self::Cls),
            other => Err(CmaeError::config(format!("pooling must be mean or cls, got `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Cls => "cls",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSpec {
    pub hidden: usize,
    pub out_dim: usize,
    pub pooling: Pooling,
    /// Unit-normalize `z`; off gives raw dot-product logits.
    pub normalize: bool,
}

impl ProjectionSpec {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            hidden: dim,
            out_dim: 128,
            pooling: Pooling::Mean,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim < 2 {
            return Err(CmaeError::config("projection output dim must be at least 2"));
        }
        if self.hidden == 0 {
            return Err(CmaeError::config("projection hidden dim must be positive"));
        }
        Ok(())
    }
}

pub fn l2_normalize(z: &Tensor) -> Result<Tensor> {
    let norm = (z.sqr()?.sum_keepdim(D::Minus1)? + 1e-24)?.sqrt()?;
    Ok(z.broadcast_div(&norm)?)
}

/// Two-layer projection head `D → hidden → d_z`.
pub struct Projector {
    spec: ProjectionSpec,
    fc1: Linear,
    fc2: Linear,
}

impl Projector {
    pub fn new(s: &Scope, dim: usize, spec: &ProjectionSpec) -> Result<Self> {
        Ok(Self {
            spec: spec.clone(),
            fc1: Linear::new(&s.pp("fc1"), dim, spec.hidden)?,
            fc2: Linear::new(&s.pp("fc2"), spec.hidden, spec.out_dim)?,
        })
    }

    /// Projects an already pooled `B × D` representation.
    pub fn head(&self, pooled: &Tensor) -> Result<Tensor> {
        let z = self.fc2.forward(&self.fc1.forward(pooled)?.gelu_erf()?)?;
        if self.spec.normalize {
            l2_normalize(&z)
        } else {
            Ok(z)
        }
    }

    /// Pools the restored `B × N × D` patch sequence `h` (or takes `cls`
    /// under cls pooling) and projects it.
    pub fn project(&self, h: &Tensor, cls: Option<&Tensor>) -> Result<Tensor> {
        let pooled = match self.spec.pooling {
            Pooling::Mean => h.mean(1)?,
            Pooling::Cls => cls
                .ok_or_else(|| CmaeError::config("cls pooling needs an encoder with a cls token"))?
                .clone(),
        };
        self.head(&pooled)
    }
}
