//! Training state as a single safetensors file.
//!
//! Tensors are stored under `online/`, `momentum/`, `adam_m/` and `adam_v/`
//! prefixes; everything else (step, epoch, config text, fingerprint, class
//! list, normalization statistics, per-parameter optimizer step counts, crop
//! rectangles) goes into the string metadata. All randomness is keyed by
//! `(seed, step)`, so the step counter is the whole random state.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::config::TrainConfig;
use super::optim::Moments;
use crate::crop::BoxCache;
use crate::datapipe::NormStats;
use crate::error::{CmaeError, Result};

pub const FORMAT: &str = "cmae-checkpoint";
pub const VERSION: &str = "1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub epoch: u64,
    pub config: TrainConfig,
    pub fingerprint: String,
    pub classes: Vec<String>,
    pub stats: NormStats,
    pub online: BTreeMap<String, Tensor>,
    pub momentum: BTreeMap<String, Tensor>,
    pub adam: BTreeMap<String, Moments>,
    /// Crop rectangles in use when the checkpoint was taken.
    pub crops: BoxCache,
}

fn bad(path: &Path, reason: impl Into<String>) -> CmaeError {
    CmaeError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

fn from_view(path: &Path, name: &str, view: &TensorView, device: &Device) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        other => return Err(bad(path, format!("tensor `{name}` has unsupported dtype {other:?}"))),
    };
    Ok(t)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut owned: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut push = |prefix: &str, name: &str, t: &Tensor| -> Result<()> {
            let (dt, bytes) = to_bytes(t)?;
            owned.push((format!("{prefix}/{name}"), dt, t.dims().to_vec(), bytes));
            Ok(())
        };
        for (n, t) in &self.online {
            push("online", n, t)?;
        }
        for (n, t) in &self.momentum {
            push("momentum", n, t)?;
        }
        for (n, m) in &self.adam {
            push("adam_m", n, &m.m)?;
            push("adam_v", n, &m.v)?;
        }
        let views = owned
            .iter()
            .map(|(n, dt, shape, bytes)| Ok((n.clone(), TensorView::new(*dt, shape.clone(), bytes).map_err(|e| bad(path, e.to_string()))?)))
            .collect::<Result<Vec<_>>>()?;
        let steps: BTreeMap<&String, u64> = self.adam.iter().map(|(n, m)| (n, m.steps)).collect();
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("version".to_string(), VERSION.to_string());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("fingerprint".to_string(), self.fingerprint.clone());
        meta.insert("config".to_string(), self.config.to_text());
        meta.insert("classes".to_string(), serde_json::to_string(&self.classes).unwrap());
        meta.insert("norm_mean".to_string(), serde_json::to_string(&self.stats.mean).unwrap());
        meta.insert("norm_std".to_string(), serde_json::to_string(&self.stats.std).unwrap());
        meta.insert("adam_steps".to_string(), serde_json::to_string(&steps).unwrap());
        meta.insert("crop_boxes".to_string(), self.crops.to_tsv());
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CmaeError::io(dir, e))?;
        }
        safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| bad(path, e.to_string()))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CmaeError::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(path, format!("not a checkpoint: {e}")))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| bad(path, "missing metadata"))?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(path, format!("missing `{k}`")));
        if field("format")? != FORMAT {
            return Err(bad(path, "not a cmae checkpoint"));
        }
        let version = field("version")?;
        if version != VERSION {
            return Err(bad(path, format!("unsupported version {version}, expected {VERSION}")));
        }
        let json_err = |k: &str| bad(path, format!("malformed `{k}`"));
        let step: u64 = field("step")?.parse().map_err(|_| json_err("step"))?;
        let epoch: u64 = field("epoch")?.parse().map_err(|_| json_err("epoch"))?;
        let config = TrainConfig::parse(&field("config")?)?;
        let classes: Vec<String> = serde_json::from_str(&field("classes")?).map_err(|_| json_err("classes"))?;
        let mean: [f64; 3] = serde_json::from_str(&field("norm_mean")?).map_err(|_| json_err("norm_mean"))?;
        let std: [f64; 3] = serde_json::from_str(&field("norm_std")?).map_err(|_| json_err("norm_std"))?;
        let steps: BTreeMap<String, u64> =
            serde_json::from_str(&field("adam_steps")?).map_err(|_| json_err("adam_steps"))?;

        let crops = BoxCache::parse_tsv(&field("crop_boxes")?, path)?;

        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(path, e.to_string()))?;
        let mut groups: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
        for (full, view) in st.tensors() {
            let (prefix, name) = full
                .split_once('/')
                .ok_or_else(|| bad(path, format!("unexpected tensor `{full}`")))?;
            let t = from_view(path, &full, &view, device)?;
            groups.entry(prefix.to_string()).or_default().insert(name.to_string(), t);
        }
        let mut take = |k: &str| groups.remove(k).unwrap_or_default();
        let online = take("online");
        let momentum = take("momentum");
        let mut adam_m = take("adam_m");
        let mut adam_v = take("adam_v");
        let mut adam = BTreeMap::new();
        for (name, n) in steps {
            let (Some(m), Some(v)) = (adam_m.remove(&name), adam_v.remove(&name)) else {
                return Err(bad(path, format!("optimizer state for `{name}` incomplete")));
            };
            adam.insert(name, Moments { m, v, steps: n });
        }
        if online.is_empty() {
            return Err(bad(path, "no online parameters"));
        }
        Ok(Self {
            step,
            epoch,
            fingerprint: field("fingerprint")?,
            config,
            classes,
            stats: NormStats { mean, std },
            online,
            momentum,
            adam,
            crops,
        })
    }

    /// Errors unless `cfg` describes the same run, or `force` is set.
    pub fn check_fingerprint(&self, cfg: &TrainConfig, force: bool, path: &Path) -> Result<()> {
        let mine = cfg.fingerprint();
        if mine == self.fingerprint {
            return Ok(());
        }
        if force {
            log::warn!("config fingerprint differs from {}; continuing (--force)", path.display());
            return Ok(());
        }
        Err(CmaeError::config(format!(
            "config fingerprint {} does not match checkpoint {} ({}); pass --force to override",
            &mine[..12],
            &self.fingerprint[..12.min(self.fingerprint.len())],
            path.display()
        )))
    }
}

/// `<out_dir>/checkpoint-<step>.safetensors`.
pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("checkpoint-{step:08}.safetensors"))
}
