//! Checkpoints and metric logs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::FeatureDims;
use crate::optim::AdamWState;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Everything needed to continue a run bit-identically. Randomness is a pure
/// function of `(config.seed, epoch, ...)`, so the completed epoch count is the
/// whole RNG state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    pub dims: FeatureDims,
    /// Completed epochs.
    pub epoch: u64,
    pub params: ParamStore,
    pub optimizer: AdamWState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: u64,
    pub key: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(epoch: u64, key: &str, value: f64) -> Self {
        Self {
            epoch,
            key: key.to_string(),
            value,
        }
    }
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
