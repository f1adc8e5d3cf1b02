use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, ParamSet};
use crate::seed::RngState;
use crate::Result;

/// Everything needed to resume a training run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub rng: RngState,
    /// Trainable parameters first, then any auxiliary sets (e.g. a target net).
    pub params: Vec<ParamSet>,
    pub adam: AdamState,
    pub losses: Vec<(u64, f64)>,
}

impl TrainState {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}
