//! Versioned checkpoint container: a JSON document holding the producing
//! config plus named parameter tensors with shapes. Shared by the fusion
//! classifier, the infusion network, and the LSTM baseline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "bargein-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// The config that produced the parameters, as plain JSON.
    pub config: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, params: ParamStore) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)
            .map_err(|e| Error::Io(format!("serialize checkpoint: {e}")))?;
        std::fs::write(path, bytes)
            .map_err(|e| Error::Io(format!("write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io(format!("read {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Validation(format!("parse checkpoint {}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!(
                "{} is not a checkpoint (format '{}')",
                path.display(),
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }
}

/// Copies values from `src` into `dst` wherever names and shapes match.
/// Returns the number of tensors imported.
pub fn import_matching(dst: &mut ParamStore, src: &ParamStore) -> usize {
    let mut count = 0;
    for i in 0..src.len() {
        if let Some(j) = dst.by_name(src.name(i)) {
            let s = src.get(i);
            if dst.get(j).rows == s.rows && dst.get(j).cols == s.cols {
                *dst.get_mut(j) = s.clone();
                count += 1;
            }
        }
    }
    count
}
