//! Checkpoint files: a magic line, one line of JSON header, then every
//! parameter array as little-endian `f32` in layout order.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layout_of, Model, ModelConfig, ParamSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::fsutil;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "DLAM-CHECKPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, if trained.
    pub best_epoch: Option<usize>,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.config.clone(), self.params.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    params: Vec<ParamSpec>,
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let model = c.model()?;
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: c.config.clone(),
        train_config: c.train_config.clone(),
        history: c.history.clone(),
        best_epoch: c.best_epoch,
        params: model.layout().specs().to_vec(),
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    fsutil::write_atomic_with(path, |w| {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "{json}")?;
        for x in &c.params {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if line.trim_end() != MAGIC {
        return Err(Error::SchemaMismatch("not a checkpoint file".into()));
    }
    line.clear();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&line).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::SchemaMismatch("missing format_version".into()))?;
    if found != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::VersionMismatch {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(value).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    let expected = layout_of(&header.config)?;
    if expected.specs() != header.params.as_slice() {
        return Err(Error::SchemaMismatch(
            "parameter layout does not match the configuration".into(),
        ));
    }
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() != expected.total() * 4 {
        return Err(Error::SchemaMismatch(format!(
            "{} parameter bytes, expected {}",
            raw.len(),
            expected.total() * 4
        )));
    }
    let params = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect::<Vec<_>>();
    if params.iter().any(|x| !x.is_finite()) {
        return Err(Error::SchemaMismatch("non-finite parameter".into()));
    }
    Ok(Checkpoint {
        config: header.config,
        train_config: header.train_config,
        history: header.history,
        best_epoch: header.best_epoch,
        params,
    })
}
