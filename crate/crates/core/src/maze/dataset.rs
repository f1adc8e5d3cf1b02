use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{step, ActionId, EnvState, MazeSpec};
use crate::norm::Normalizer;
use crate::{Error, Result};

/// A recorded state/action sequence. `actions[t]` moves `states[t]` to
/// `states[t + 1]`; the final action is usually "stay".
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode_id: u64,
    pub states: Vec<EnvState>,
    pub actions: Vec<ActionId>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn end(&self) -> Option<&EnvState> {
        self.states.last()
    }

    /// Number of `(s, a, s')` transitions.
    pub fn transitions(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// Checks `states[t+1] == step(states[t], actions[t])` bit-exactly.
    pub fn check_closure(&self, spec: &MazeSpec) -> Result<bool> {
        for t in 0..self.transitions() {
            let next = step(spec, &self.states[t], self.actions[t])?;
            if !next.bits_eq(&self.states[t + 1]) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    #[serde(default)]
    pub params: Map<String, Value>,
}

impl DatasetMeta {
    pub fn new(generator: impl Into<String>, seed: u64) -> Self {
        Self {
            generator: generator.into(),
            seed,
            params: Map::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: MazeSpec,
    pub trajectories: Vec<Trajectory>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for traj in &self.trajectories {
            if traj.states.is_empty() {
                return Err(Error::InvalidState(format!(
                    "episode {} is empty",
                    traj.episode_id
                )));
            }
            if traj.states.len() != traj.actions.len() {
                return Err(Error::Shape(format!(
                    "episode {}: {} states vs {} actions",
                    traj.episode_id,
                    traj.states.len(),
                    traj.actions.len()
                )));
            }
            for s in &traj.states {
                self.spec.free_cell_of(s)?;
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::transitions).sum()
    }

    pub fn states(&self) -> impl Iterator<Item = &EnvState> {
        self.trajectories.iter().flat_map(|t| t.states.iter())
    }

    /// Dyadic z-score statistics of all states in the dataset.
    pub fn normalizer(&self) -> Normalizer {
        let rows: Vec<[f64; 2]> = self.states().map(|s| s.to_array()).collect();
        Normalizer::fit(rows.iter().map(|r| &r[..]), 2)
    }
}
