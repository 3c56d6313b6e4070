use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CmaeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Step {
        step: u64,
        epoch: u64,
        lr: f64,
        loss_ctr: f64,
        loss_loc: f64,
        loss_con: f64,
        loss_total: f64,
    },
    Eval {
        step: u64,
        epoch: u64,
        mode: String,
        top1: f64,
    },
}

/// Append-only JSON-lines log. Records are also kept in memory.
#[derive(Default)]
pub struct MetricsLog {
    out: Option<BufWriter<File>>,
    pub records: Vec<Record>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it when missing.
    pub fn append_to(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CmaeError::io(path, e))?;
        Ok(Self {
            out: Some(BufWriter::new(f)),
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, r: Record) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            let line = serde_json::to_string(&r).expect("records always serialize");
            writeln!(out, "{line}").map_err(|e| CmaeError::io("metrics log", e))?;
            out.flush().map_err(|e| CmaeError::io("metrics log", e))?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<Record>> {
        let text = std::fs::read_to_string(path).map_err(|e| CmaeError::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| CmaeError::Data(format!("{}: {e}", path.display()))))
            .collect()
    }
}
