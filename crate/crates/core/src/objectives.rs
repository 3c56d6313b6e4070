//! Contrastive, location and reconstruction losses and their weighted sum.

use candle_core::{DType, Tensor, D};

use crate::error::{CmaeError, Result};
use crate::masking::{gather_tokens, MaskBatch};
use crate::nn::{log_softmax_last, scalar, Linear, Scope};

/// Guards the square root of the unsquared location loss at zero residual.
pub const LOCATION_EPS: f64 = 1e-24;

/// Variance floor for per-patch target normalization.
pub const TARGET_EPS: f64 = 1e-6;

/// InfoNCE with in-batch negatives: row `i` of `z_q` is scored against every
/// row of `z_k` and the aligned row is the positive.
pub fn info_nce(z_q: &Tensor, z_k: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(CmaeError::config(format!("temperature must be positive, got {tau}")));
    }
    let (b, d) = z_q.dims2()?;
    if z_k.dims() != [b, d] {
        return Err(CmaeError::shape(format!(
            "z_q {:?} and z_k {:?} differ",
            z_q.dims(),
            z_k.dims()
        )));
    }
    let logits = (z_q.matmul(&z_k.t()?)? / tau)?;
    let logp = log_softmax_last(&logits)?;
    let eye = Tensor::eye(b, z_q.dtype(), z_q.device())?;
    Ok((logp.mul(&eye)?.sum_all()? / -(b as f64))?)
}

/// Two affine layers with a GELU between, mapping each visible token's
/// feature to raw scores over the `N` grid slots.
pub struct LocationHead {
    fc1: Linear,
    fc2: Linear,
}

impl LocationHead {
    pub fn new(s: &Scope, dim: usize, hidden: usize, num_tokens: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&s.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&s.pp("fc2"), hidden, num_tokens)?,
        })
    }

    /// `q1`: `B × |visible| × D` patch features. A cls row in the input is
    /// detected by the length mismatch against `mask`.
    pub fn forward(&self, q1: &Tensor, mask: &MaskBatch) -> Result<Tensor> {
        let (b, n, _) = q1.dims3()?;
        if b != mask.batch_size() || n != mask.num_visible() {
            return Err(CmaeError::shape(format!(
                "location head expects {} x {} visible patch tokens (cls removed), got {b} x {n}",
                mask.batch_size(),
                mask.num_visible()
            )));
        }
        self.fc2.forward(&self.fc1.forward(q1)?.gelu_erf()?)
    }
}

fn check_one_hot(t: &Tensor) -> Result<()> {
    let rows = t.flatten_to(1)?.to_dtype(DType::F64)?;
    let n = t.dim(D::Minus1)?;
    let rows = rows.reshape(((), n))?.to_vec2::<f64>()?;
    for (i, row) in rows.iter().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != n - 1 {
            return Err(CmaeError::shape(format!("location target row {i} is not one-hot")));
        }
    }
    Ok(())
}

/// Mean over visible tokens of `‖p − t‖₂` (or its square).
pub fn location_loss(p: &Tensor, t: &Tensor, squared: bool) -> Result<Tensor> {
    if p.dims() != t.dims() {
        return Err(CmaeError::shape(format!(
            "predictions {:?} vs targets {:?}",
            p.dims(),
            t.dims()
        )));
    }
    check_one_hot(t)?;
    let sq = (p - t)?.sqr()?.sum(D::Minus1)?;
    let per_token = if squared { sq } else { (sq + LOCATION_EPS)?.sqrt()? };
    Ok(per_token.mean_all()?)
}

/// Per-patch standardized pixels: each token's values minus their mean,
/// over the unbiased standard deviation.
pub fn normalize_targets(tokens: &Tensor) -> Result<Tensor> {
    let k = tokens.dim(D::Minus1)?;
    let mean = tokens.mean_keepdim(D::Minus1)?;
    let xc = tokens.broadcast_sub(&mean)?;
    let var = (xc.sqr()?.sum_keepdim(D::Minus1)? / (k.max(2) - 1) as f64)?;
    Ok(xc.broadcast_div(&(var + TARGET_EPS)?.sqrt()?)?)
}

/// Mean squared error over the masked tokens only. `target` holds the raw
/// pixel tokens; with `norm_pix` they are standardized per patch first.
pub fn reconstruction_loss(pred: &Tensor, target: &Tensor, mask: &MaskBatch, norm_pix: bool) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(CmaeError::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let Some(masked) = mask.masked.as_ref() else {
        log::warn!("reconstruction loss over an empty masked set");
        return Ok(Tensor::zeros((), pred.dtype(), pred.device())?);
    };
    let target = if norm_pix { normalize_targets(target)? } else { target.clone() };
    let p = gather_tokens(pred, masked)?;
    let t = gather_tokens(&target, masked)?.detach();
    Ok((p - t)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ctr: f64,
    pub loc: f64,
    pub con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ctr: 1.0,
            loc: 1.0,
            con: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_ctr", self.ctr), ("lambda_loc", self.loc), ("lambda_con", self.con)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(CmaeError::config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub ctr: f64,
    pub loc: f64,
    pub con: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.ctr, self.loc, self.con, self.total].iter().all(|v| v.is_finite())
    }
}

/// `λ_ctr·L_ctr + λ_loc·L_loc + λ_con·L_con`. Terms with a zero weight are
/// left out of the graph entirely, so their producers receive no gradient.
pub fn total_loss(ctr: &Tensor, loc: &Tensor, con: &Tensor, w: &LossWeights) -> Result<(Tensor, LossReport)> {
    w.validate()?;
    let mut total: Option<Tensor> = None;
    for (lambda, term) in [(w.ctr, ctr), (w.loc, loc), (w.con, con)] {
        if lambda == 0.0 {
            continue;
        }
        let weighted = (term * lambda)?;
        total = Some(match total {
            None => weighted,
            Some(t) => (t + weighted)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => Tensor::zeros((), ctr.dtype(), ctr.device())?,
    };
    let (c, l, r) = (scalar(ctr)?, scalar(loc)?, scalar(con)?);
    let report = LossReport {
        ctr: c,
        loc: l,
        con: r,
        total: w.ctr * c + w.loc * l + w.con * r,
    };
    Ok((total, report))
}
