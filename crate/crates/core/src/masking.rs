//! Random masking, visible/masked splitting and order restoration.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{CmaeError, Result};
use crate::rng::{self, Stream};

/// Number of visible tokens kept at mask ratio `ratio`: `⌊n·(1−ratio)⌋`.
pub fn keep_count(n: usize, ratio: f64) -> usize {
    // the epsilon absorbs representation error such as 10·(1−0.9) = 0.999…
    (n as f64 * (1.0 - ratio) + 1e-9).floor() as usize
}

/// One sample's mask. The first `num_visible` entries of `perm` are the
/// visible token indices, the rest are masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub perm: Vec<usize>,
    pub num_visible: usize,
}

impl MaskPlan {
    pub fn from_perm(perm: Vec<usize>, num_visible: usize) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(CmaeError::shape(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        if num_visible == 0 || num_visible > n {
            return Err(CmaeError::shape(format!(
                "visible count {num_visible} outside [1, {n}]"
            )));
        }
        Ok(Self { perm, num_visible })
    }

    pub fn num_tokens(&self) -> usize {
        self.perm.len()
    }

    pub fn visible(&self) -> &[usize] {
        &self.perm[..self.num_visible]
    }

    pub fn masked(&self) -> &[usize] {
        &self.perm[self.num_visible..]
    }

    /// `restore[j]` is the position of token `j` within `perm`.
    pub fn restore_index(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (pos, &tok) in self.perm.iter().enumerate() {
            inv[tok] = pos;
        }
        inv
    }
}

/// Draws a uniformly random permutation and keeps `⌊n(1−ratio)⌋` tokens.
pub fn make_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if n == 0 {
        return Err(CmaeError::config("mask over zero tokens"));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(CmaeError::config(format!("mask ratio {ratio} outside [0,1)")));
    }
    let keep = keep_count(n, ratio);
    if keep == 0 {
        return Err(CmaeError::config(format!(
            "mask ratio {ratio} leaves no visible token out of {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok(MaskPlan {
        perm,
        num_visible: keep,
    })
}

/// Plans for a whole batch plus the gather/restore index tensors.
#[derive(Debug, Clone)]
pub struct MaskBatch {
    pub plans: Vec<MaskPlan>,
    /// `B × |visible|`, u32.
    pub visible: Tensor,
    /// `B × |masked|`, u32; `None` when nothing is masked.
    pub masked: Option<Tensor>,
    /// `B × N`, u32.
    pub restore: Tensor,
}

fn index_tensor(rows: Vec<Vec<usize>>, device: &Device) -> Result<Tensor> {
    let b = rows.len();
    let n = rows.first().map_or(0, |r| r.len());
    let flat: Vec<u32> = rows.into_iter().flatten().map(|v| v as u32).collect();
    Ok(Tensor::from_vec(flat, (b, n), device)?)
}

impl MaskBatch {
    pub fn new(plans: Vec<MaskPlan>, device: &Device) -> Result<Self> {
        let first = plans
            .first()
            .ok_or_else(|| CmaeError::shape("mask batch without plans"))?;
        let (n, keep) = (first.num_tokens(), first.num_visible);
        if plans.iter().any(|p| p.num_tokens() != n || p.num_visible != keep) {
            return Err(CmaeError::shape("plans in a batch must share N and |visible|"));
        }
        let visible = index_tensor(plans.iter().map(|p| p.visible().to_vec()).collect(), device)?;
        let masked = if keep < n {
            Some(index_tensor(plans.iter().map(|p| p.masked().to_vec()).collect(), device)?)
        } else {
            None
        };
        let restore = index_tensor(plans.iter().map(|p| p.restore_index()).collect(), device)?;
        Ok(Self {
            plans,
            visible,
            masked,
            restore,
        })
    }

    /// Independent per-sample plans keyed by `(seed, step, sample id, view)`.
    pub fn sample(
        n: usize,
        ratio: f64,
        seed: u64,
        step: u64,
        sample_ids: &[usize],
        view: u64,
        device: &Device,
    ) -> Result<Self> {
        let plans = sample_ids
            .iter()
            .map(|&id| {
                let mut rng = rng::keyed(seed, Stream::Mask, &[step, id as u64, view]);
                make_mask(n, ratio, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(plans, device)
    }

    pub fn batch_size(&self) -> usize {
        self.plans.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.plans[0].num_tokens()
    }

    pub fn num_visible(&self) -> usize {
        self.plans[0].num_visible
    }

    pub fn num_masked(&self) -> usize {
        self.num_tokens() - self.num_visible()
    }

    /// One-hot `B × |visible| × N` location targets for the visible tokens.
    pub fn visible_one_hot(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (b, nv, n) = (self.batch_size(), self.num_visible(), self.num_tokens());
        let mut v = vec![0f32; b * nv * n];
        for (i, p) in self.plans.iter().enumerate() {
            for (j, &tok) in p.visible().iter().enumerate() {
                v[(i * nv + j) * n + tok] = 1.0;
            }
        }
        Ok(Tensor::from_vec(v, (b, nv, n), device)?.to_dtype(dtype)?)
    }
}

/// Gathers `B × n × D` rows of `tokens` at per-sample indices `idx` (`B × n`).
pub fn gather_tokens(tokens: &Tensor, idx: &Tensor) -> Result<Tensor> {
    let (b, _, d) = tokens.dims3()?;
    let (bi, n) = idx.dims2()?;
    if bi != b {
        return Err(CmaeError::shape(format!("index batch {bi} vs token batch {b}")));
    }
    let idx = idx.unsqueeze(2)?.broadcast_as((b, n, d))?.contiguous()?;
    Ok(tokens.contiguous()?.gather(&idx, 1)?)
}

#[derive(Debug, Clone)]
pub struct SplitTokens {
    pub visible: Tensor,
    /// `None` when the plan masks nothing.
    pub masked: Option<Tensor>,
}

/// Splits `B × N × D` tokens into visible and masked parts, each in
/// permutation order.
pub fn split(tokens: &Tensor, mask: &MaskBatch) -> Result<SplitTokens> {
    let (b, n, _) = tokens.dims3()?;
    if b != mask.batch_size() || n != mask.num_tokens() {
        return Err(CmaeError::shape(format!(
            "tokens {:?} do not match mask batch of {} x {}",
            tokens.dims(),
            mask.batch_size(),
            mask.num_tokens()
        )));
    }
    Ok(SplitTokens {
        visible: gather_tokens(tokens, &mask.visible)?,
        masked: mask.masked.as_ref().map(|m| gather_tokens(tokens, m)).transpose()?,
    })
}

/// `restore(concat[a, b])`: puts visible-order features `a` and
/// masked-order features `b` back into original token order. With
/// `stop_grad_b` no gradient reaches `b`'s producer.
pub fn restore_merge(
    a: &Tensor,
    b: Option<&Tensor>,
    mask: &MaskBatch,
    stop_grad_b: bool,
) -> Result<Tensor> {
    let na = a.dim(1)?;
    let nb = b.map(|t| t.dim(1)).transpose()?.unwrap_or(0);
    if na != mask.num_visible() || na + nb != mask.num_tokens() {
        return Err(CmaeError::shape(format!(
            "restore of {na}+{nb} tokens against a plan with {} visible of {}",
            mask.num_visible(),
            mask.num_tokens()
        )));
    }
    let joined = match b {
        Some(b) if nb > 0 => {
            let b = if stop_grad_b { b.detach() } else { b.clone() };
            Tensor::cat(&[a, &b], 1)?
        }
        _ => a.clone(),
    };
    gather_tokens(&joined, &mask.restore)
}
