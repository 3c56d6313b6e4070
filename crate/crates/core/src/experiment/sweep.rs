//! Decoder grid sweep: one short pretraining run plus a linear probe per
//! decoder variant.

use std::fmt::Write as _;
use std::path::Path;

use super::config::TrainConfig;
use super::eval::{linear_probe, ClassifierSettings};
use super::metrics::{MetricsLog, Record};
use super::train::{open_split, Trainer};
use crate::datapipe::{Dataset, Split};
use crate::decoder::param_count;
use crate::error::{CmaeError, Result};

pub const CSV_HEADER: &str = "kind,depth,dim,param_count,final_recon_loss,probe_top1";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kind: String,
    pub depth: usize,
    pub dim: usize,
    pub param_count: usize,
    pub final_recon_loss: f64,
    pub probe_top1: f64,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.kind, self.depth, self.dim, self.param_count, self.final_recon_loss, self.probe_top1
        )
    }
}

/// Largest head count not above `preferred` that divides `dim`.
pub fn heads_for(dim: usize, preferred: usize) -> usize {
    (1..=preferred.max(1)).rev().find(|h| dim.is_multiple_of(*h)).unwrap_or(1)
}

/// Every valid `(kind, depth, dim)` point of the grid as a run config.
/// Invalid combinations (hybrids shallower than three blocks) are skipped
/// with a warning.
pub fn grid(cfg: &TrainConfig) -> Vec<TrainConfig> {
    let mut out = Vec::new();
    for kind in &cfg.sweep_kinds {
        for &depth in &cfg.sweep_depths {
            for &dim in &cfg.sweep_dims {
                let mut c = cfg.clone();
                c.decoder_kind = kind.clone();
                c.decoder_depth = depth;
                c.decoder_dim = dim;
                c.decoder_heads = heads_for(dim, cfg.decoder_heads);
                c.max_steps = cfg.sweep_steps;
                match c.decoder_spec().validate() {
                    Ok(()) => out.push(c),
                    Err(e) => log::warn!("skipping decoder {kind} depth {depth} dim {dim}: {e}"),
                }
            }
        }
    }
    out
}

fn run_point(c: TrainConfig, train: &Dataset, val: &Dataset) -> Result<SweepRow> {
    let spec = c.decoder_spec();
    let params = param_count(&spec, &c.decoder_geometry())?;
    let mut trainer = Trainer::new(c, train.clone())?;
    let mut log = MetricsLog::in_memory();
    trainer.run(&mut log, None)?;
    let final_recon_loss = log
        .records
        .iter()
        .rev()
        .find_map(|r| match r {
            Record::Step { loss_con, .. } => Some(*loss_con),
            _ => None,
        })
        .unwrap_or(f64::NAN);
    let cfg = &trainer.cfg;
    let enc = trainer.model.backbone.encoder(&trainer.state.online, false)?;
    let (_, probe_top1) = linear_probe(
        &enc,
        train,
        val,
        &trainer.stats,
        &trainer.model.patch,
        &ClassifierSettings::from_config(cfg),
        cfg.dtype,
        &trainer.device,
    )?;
    Ok(SweepRow {
        kind: spec.kind,
        depth: spec.depth,
        dim: spec.dim,
        param_count: params,
        final_recon_loss,
        probe_top1,
    })
}

/// Runs the whole grid, rewriting `csv` after every finished point.
pub fn run_sweep(cfg: &TrainConfig, csv: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let train = open_split(cfg, Split::Train, cfg.train_subset)?;
    let val = open_split(cfg, Split::Val, cfg.eval_subset)?;
    if train.classes != val.classes {
        return Err(CmaeError::Data("train and val splits list different classes".into()));
    }
    if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CmaeError::io(dir, e))?;
    }
    let mut rows = Vec::new();
    for c in grid(cfg) {
        log::info!("sweep: {} depth {} dim {}", c.decoder_kind, c.decoder_depth, c.decoder_dim);
        let row = run_point(c, &train, &val)?;
        log::info!("sweep: {}", row.csv_line());
        rows.push(row);
        let mut text = format!("{CSV_HEADER}\n");
        for r in &rows {
            writeln!(text, "{}", r.csv_line()).unwrap();
        }
        std::fs::write(csv, text).map_err(|e| CmaeError::io(csv, e))?;
    }
    Ok(rows)
}
