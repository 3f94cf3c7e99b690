//! Trained-model files: hyperparameters plus every parameter tensor, as JSON.
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! bitwise exact.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HyperParams, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub preset: String,
    pub hyper: HyperParams,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.params.is_finite() {
            return Err(Error::Checkpoint("refusing to save non-finite parameters".into()));
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, self).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ck.hyper.validate()?;
        Ok(ck)
    }
}
