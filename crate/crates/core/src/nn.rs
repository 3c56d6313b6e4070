//! Parameter storage and the small set of layers shared by the encoder,
//! projector, location head and decoders.
//!
//! Parameters live in a [`ParamStore`] as candle `Var`s keyed by dotted
//! names. Layers are plain tensor holders rebuilt from a [`Scope`] view of the
//! store; a non-tracking scope hands out detached tensors, which is how the
//! momentum branch and every no-gradient pass avoid building a graph.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{CmaeError, Result};
use crate::rng::{self, Stream};

/// How a parameter is initialised on first creation.
#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    XavierUniform { fan_in: usize, fan_out: usize },
    Values(Vec<f64>),
}

pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            dtype,
            device,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn scope(&self, prefix: &str, track: bool) -> Scope<'_> {
        Scope {
            store: self,
            prefix: prefix.to_string(),
            track,
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars
            .lock()
            .unwrap()
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.vars_with_prefix(prefix)
            .iter()
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Inserts (or overwrites) a variable holding a copy of `t`.
    pub fn insert(&self, name: &str, t: &Tensor) -> Result<()> {
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?.copy()?)?;
        self.vars.lock().unwrap().insert(name.to_string(), var);
        Ok(())
    }

    /// Deep copy of every variable whose name starts with one of `prefixes`.
    pub fn copy_prefixes(&self, prefixes: &[&str]) -> Result<ParamStore> {
        let out = ParamStore::new(self.dtype, self.device.clone(), self.seed);
        for (name, var) in self.vars() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                out.insert(&name, var.as_tensor())?;
            }
        }
        Ok(out)
    }

    /// Copies of all current values, detached from any graph.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites existing variables from `tensors`, in name order. Every
    /// store variable must be present with an identical shape; the first
    /// offending tensor is reported.
    pub fn load_from(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars() {
            let src = tensors.get(&name).ok_or_else(|| {
                CmaeError::shape(format!("tensor `{name}` missing from source"))
            })?;
            if src.dims() != var.dims() {
                return Err(CmaeError::ParamShape {
                    name,
                    expected: var.dims().to_vec(),
                    found: src.dims().to_vec(),
                });
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        for name in tensors.keys() {
            if self.get(name).is_none() {
                return Err(CmaeError::shape(format!(
                    "tensor `{name}` is not part of this model"
                )));
            }
        }
        Ok(())
    }

    fn create(&self, name: &str, dims: &[usize], init: &Init) -> Result<Var> {
        let n: usize = dims.iter().product();
        let mut rng = rng::keyed(self.seed, Stream::Init, &[rng::hash_str(name)]);
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, *std).map_err(|e| CmaeError::config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Uniform(bound) => {
                let dist = Uniform::new_inclusive(-bound, *bound)
                    .map_err(|e| CmaeError::config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let bound = (6.0 / (*fan_in + *fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| CmaeError::config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Values(v) => {
                if v.len() != n {
                    return Err(CmaeError::shape(format!(
                        "init for `{name}` has {} values, shape needs {n}",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }
}

/// A prefixed view into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
    track: bool,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
            track: self.track,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn tracking(&self) -> bool {
        self.track
    }

    /// Fetches a parameter, creating it with `init` if it does not exist yet.
    pub fn get(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut vars = self.store.vars.lock().unwrap();
        let var = match vars.get(&full) {
            Some(v) => {
                if v.dims() != dims {
                    return Err(CmaeError::ParamShape {
                        name: full,
                        expected: dims.to_vec(),
                        found: v.dims().to_vec(),
                    });
                }
                v.clone()
            }
            None => {
                let v = self.store.create(&full, dims, &init)?;
                vars.insert(full, v.clone());
                v
            }
        };
        Ok(if self.track {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        })
    }
}

/// Applies `f` over the last dimension after flattening the leading ones.
fn flat_matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().ok_or_else(|| CmaeError::shape("matmul on a scalar"))?;
    let lead: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((lead, last))?.matmul(w)?;
    let mut out = dims;
    *out.last_mut().unwrap() = w.dim(1)?;
    Ok(y.reshape(out)?)
}

/// Affine layer, weight stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(
            s,
            d_in,
            d_out,
            Init::XavierUniform {
                fan_in: d_in,
                fan_out: d_out,
            },
        )
    }

    pub fn with_init(s: &Scope, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        let weight = s.get("weight", &[d_in, d_out], init)?;
        let bias = Some(s.get("bias", &[d_out], Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = flat_matmul(x, &self.weight)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[dim], Init::Ones)?,
            bias: s.get("bias", &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / dim)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = (xc.sqr()?.sum_keepdim(D::Minus1)? / dim)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Softmax over the last dimension. The max shift is detached; the result
/// is shift invariant so the gradient is unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(s: &Scope, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&s.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&s.pp("fc2"), hidden, out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(s: &Scope, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(CmaeError::config(format!(
                "dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(&s.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&s.pp("proj"), dim, dim)?,
            heads,
        })
    }

    /// Returns the attended sequence and the attention probabilities
    /// (`B × heads × n × n`).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, dim) = x.dims3()?;
        let hd = dim / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let probs = softmax_last(&logits)?;
        let out = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, dim))?;
        Ok((self.proj.forward(&out)?, probs))
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(s: &Scope, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&s.pp("norm1"), dim)?,
            attn: Attention::new(&s.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&s.pp("norm2"), dim)?,
            mlp: Mlp::new(&s.pp("mlp"), dim, dim * mlp_ratio, dim)?,
        })
    }

    pub fn forward_with_attn(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (a, probs) = self.attn.forward(&self.norm1.forward(x)?)?;
        let x = (x + a)?;
        let m = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok(((x + m)?, probs))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attn(x)?.0)
    }
}

/// Fixed 2-D sine-cosine positional table, `grid_h·grid_w × dim`, row-major
/// over the grid. `dim` must be divisible by 4.
pub fn sincos_2d(dim: usize, grid_h: usize, grid_w: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(4) {
        return Err(CmaeError::config(format!(
            "sine-cosine positional embedding needs dim divisible by 4, got {dim}"
        )));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(grid_h * grid_w * dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            for pos in [r as f64, c as f64] {
                out.extend(omega.iter().map(|w| (pos * w).sin()));
                out.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    Ok(out)
}

/// Scalar value of a 0-d (or single-element) tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    t.flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .first()
        .copied()
        .ok_or_else(|| CmaeError::shape("empty tensor where a scalar was expected"))
}
