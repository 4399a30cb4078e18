use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Adam, ParamSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing JSON checkpoint: named parameter sets, their optimizer
/// moments and free-form metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub meta: serde_json::Value,
    pub param_sets: BTreeMap<String, ParamSet>,
    pub optimizers: BTreeMap<String, Adam>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            meta: serde_json::Value::Null,
            param_sets: BTreeMap::new(),
            optimizers: BTreeMap::new(),
        }
    }
}

impl Checkpoint {
    pub fn param_set(&self, name: &str) -> Result<&ParamSet> {
        self.param_sets
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter set {name:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes)?;
        let found = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
        if found != CHECKPOINT_VERSION as u64 {
            return Err(Error::CheckpointVersion {
                found: found as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(serde_json::from_value(raw)?)
    }
}
