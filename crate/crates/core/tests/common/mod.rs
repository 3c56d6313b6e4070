#![allow(dead_code)]

pub mod criteria;

use candle_core::{Tensor, Var};
use cmae::datapipe::Split;
use cmae::experiment::{open_split, TrainConfig, Trainer};

/// N=16 tokens (16px images, 4px patches), D=32, depth 2, batch 2, f64.
pub const TINY: &[(&str, &str)] = &[
    ("data_root", "synthetic:shapes:8"),
    ("image_size", "16"),
    ("patch_size", "4"),
    ("dtype", "f64"),
    ("batch", "2"),
    ("epochs", "4"),
    ("warmup_epochs", "1"),
    ("encoder_depth", "2"),
    ("encoder_dim", "32"),
    ("encoder_heads", "2"),
    ("proj_dim", "8"),
    ("loc_hidden", "16"),
    ("decoder_depth", "1"),
    ("decoder_dim", "16"),
    ("decoder_heads", "2"),
    ("crop_refresh_interval", "1"),
    ("eval_batch", "8"),
];

/// Default config with `pairs` applied in order (later pairs win).
pub fn cfg(pairs: &[(&str, &str)]) -> TrainConfig {
    let mut c = TrainConfig::default();
    for (k, v) in pairs {
        c.set(k, v).unwrap_or_else(|e| panic!("{k}={v}: {e}"));
    }
    c.validate().unwrap();
    c
}

pub fn tiny(extra: &[(&str, &str)]) -> TrainConfig {
    let mut all = TINY.to_vec();
    all.extend_from_slice(extra);
    cfg(&all)
}

pub fn trainer(c: TrainConfig) -> Trainer {
    let data = open_split(&c, Split::Train, c.train_subset).unwrap();
    Trainer::new(c, data).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(candle_core::DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}

/// Sets element `i` (row-major) of `var` to `value`.
pub fn set_element(var: &Var, i: usize, value: f64) {
    let mut v = flat(var.as_tensor());
    v[i] = value;
    let t = Tensor::from_vec(v, var.dims(), var.device())
        .unwrap()
        .to_dtype(var.dtype())
        .unwrap();
    var.set(&t).unwrap();
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    flat(a)
        .iter()
        .zip(flat(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
