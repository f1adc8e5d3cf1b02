//! Flat `section.key = value` run configuration.
//!
//! Every key has a typed default. Config files hold one `key = value` pair
//! per line (`#` starts a comment) and `--set key=value` flags are applied on
//! top, in order. Unknown keys and values that do not fit the key's type are
//! rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use trajstitch::augment::{InverseTrainConfig, StitchConfig};
use trajstitch::diffusion::{DiffusionTrainConfig, ScheduleKind};
use trajstitch::embedding::EmbedTrainConfig;
use trajstitch::planner::PlannerConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_episodes: usize,
    pub ep_len: usize,
    /// Stitch datasets only.
    pub max_span: u32,
    /// Explore datasets only.
    pub resample_interval: usize,
    /// Explore datasets only.
    pub noise_prob: f64,
    pub cell_size: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_episodes: 1000,
            ep_len: 200,
            max_span: 4,
            resample_interval: 10,
            noise_prob: 0.3,
            cell_size: 1.0,
            seed: 0,
        }
    }
}

/// Diffusion training keys shared by the stitcher and the planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSection {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub train_steps: u64,
    pub log_every: u64,
    /// Offset between consecutive training windows.
    pub window_stride: usize,
    pub seed: u64,
}

impl DiffusionSection {
    fn with(train_steps: u64, window_stride: usize) -> Self {
        let d = DiffusionTrainConfig::default();
        Self {
            hidden: vec![128; 3],
            time_dim: d.time_dim,
            diffusion_steps: d.diffusion_steps,
            schedule: d.schedule,
            lr: d.lr,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            train_steps,
            log_every: d.log_every,
            window_stride,
            seed: 0,
        }
    }

    pub fn train_config(&self, horizon: usize) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            horizon,
            hidden: self.hidden.clone(),
            time_dim: self.time_dim,
            diffusion_steps: self.diffusion_steps,
            schedule: self.schedule,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            train_steps: self.train_steps,
            log_every: self.log_every,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitcherSection {
    /// States per bridge, boundaries included.
    pub horizon: usize,
    #[serde(flatten)]
    pub train: DiffusionSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub segment_len: usize,
    pub segment_stride: usize,
    /// 0 picks floor(sqrt(N)).
    pub n_list: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            segment_len: 26,
            segment_stride: 13,
            n_list: 0,
            seed: 0,
        }
    }
}

/// Stitching keys; the bridge length comes from the stitcher model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSection {
    pub k: usize,
    pub k_density: usize,
    pub beta: f64,
    pub n_stitch: usize,
    pub n_traj: usize,
    pub ddim_steps: usize,
    pub resample: usize,
    pub n_probe: Option<usize>,
    pub seed: u64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = StitchConfig::default();
        Self {
            k: d.k,
            k_density: d.k_density,
            beta: d.beta,
            n_stitch: d.n_stitch,
            n_traj: d.n_traj,
            ddim_steps: d.ddim_steps,
            resample: d.resample,
            n_probe: d.n_probe,
            seed: d.seed,
        }
    }
}

impl AugmentSection {
    pub fn stitch_config(&self, h_stitcher: usize) -> StitchConfig {
        StitchConfig {
            k: self.k,
            k_density: self.k_density,
            beta: self.beta,
            n_stitch: self.n_stitch,
            n_traj: self.n_traj,
            h_stitcher,
            ddim_steps: self.ddim_steps,
            resample: self.resample,
            n_probe: self.n_probe,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_tasks: usize,
    pub min_distance: u32,
    pub task_seed: u64,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_tasks: 20,
            min_distance: 8,
            task_seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub embedding: EmbedTrainConfig,
    pub stitcher: StitcherSection,
    pub inverse: InverseTrainConfig,
    pub planner: DiffusionSection,
    pub index: IndexConfig,
    pub augment: AugmentSection,
    pub plan: PlannerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            embedding: EmbedTrainConfig {
                hidden: vec![64; 3],
                train_steps: 12_000,
                ..Default::default()
            },
            stitcher: StitcherSection {
                horizon: 26,
                train: DiffusionSection::with(20_000, 5),
            },
            inverse: InverseTrainConfig {
                hidden: vec![64, 64],
                lr: 1e-3,
                train_steps: 2000,
                ..Default::default()
            },
            planner: DiffusionSection::with(10_000, 2),
            index: IndexConfig::default(),
            augment: AugmentSection::default(),
            plan: PlannerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_number(raw: &str) -> Result<Value, String> {
    if let Ok(v) = raw.parse::<u64>() {
        return Ok(v.into());
    }
    if let Ok(v) = raw.parse::<i64>() {
        return Ok(v.into());
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v.into()),
        _ => Err(format!("{raw:?} is not a finite number")),
    }
}

fn is_null_word(raw: &str) -> bool {
    matches!(raw, "off" | "none" | "null")
}

/// Parses `raw` into the JSON shape of the key's current value.
fn parse_like(current: &Value, raw: &str) -> Result<Value, String> {
    let raw = raw.trim();
    match current {
        Value::Null | Value::Number(_) if is_null_word(raw) => Ok(Value::Null),
        Value::Null | Value::Number(_) => parse_number(raw),
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|e| e.to_string()),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(_) => raw
            .trim_start_matches('[')
            .trim_end_matches(']')
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(parse_number)
            .collect::<Result<Vec<_>, _>>()
            .map(Value::Array),
        Value::Object(_) => Err("not a leaf key".into()),
    }
}

impl RunConfig {
    /// Overrides one `section.key`.
    pub fn set(&mut self, key: &str, raw: &str) -> CliResult<()> {
        let mut tree = serde_json::to_value(&*self).map_err(|e| CliError::Failed(e.to_string()))?;
        let slot = key
            .split_once('.')
            .and_then(|(section, field)| tree.get_mut(section)?.get_mut(field))
            .filter(|v| !v.is_object())
            .ok_or_else(|| CliError::Config(format!("unknown key {key:?}")))?;
        *slot = parse_like(slot, raw).map_err(|e| CliError::Config(format!("{key}: {e}")))?;
        *self = serde_json::from_value(tree).map_err(|e| CliError::Config(format!("{key} = {raw}: {e}")))?;
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn assign(&mut self, pair: &str) -> CliResult<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line)
                .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every key with its effective value, sorted.
    pub fn flatten(&self) -> BTreeMap<String, Value> {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut out = BTreeMap::new();
        if let Value::Object(sections) = tree {
            for (section, fields) in sections {
                if let Value::Object(fields) = fields {
                    for (k, v) in fields {
                        out.insert(format!("{section}.{k}"), v);
                    }
                }
            }
        }
        out
    }

    /// `key = value` lines that [`RunConfig::apply_text`] accepts.
    pub fn to_text(&self) -> String {
        self.flatten()
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    Value::Null => "none".to_string(),
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                format!("{k} = {v}\n")
            })
            .collect()
    }

    /// Hex SHA-256 of the canonical flattened config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.flatten()).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("embedding.lr", "1e-3").unwrap();
        c.set("plan.replanning_interval", "off").unwrap();
        c.set("stitcher.hidden", "32,32").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(back.hash(), RunConfig::default().hash());
    }

    #[test]
    fn typed_overrides() {
        let mut c = RunConfig::default();
        c.set("augment.n_probe", "64").unwrap();
        assert_eq!(c.augment.n_probe, Some(64));
        c.set("stitcher.schedule", "linear").unwrap();
        assert_eq!(c.stitcher.train.schedule, ScheduleKind::Linear);
        c.set("stitcher.horizon", "10").unwrap();
        assert_eq!(c.stitcher.horizon, 10);
        c.set("eval.seeds", "[3, 4]").unwrap();
        assert_eq!(c.eval.seeds, vec![3, 4]);
        c.set("plan.delta_g", "1").unwrap();
        assert_eq!(c.plan.delta_g, 1.0);
    }

    #[test]
    fn rejects_bad_keys_and_values() {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("embedding.nope", "1"),
            ("nope.lr", "1"),
            ("embedding", "1"),
            ("embedding.lr", "fast"),
            ("embedding.train_steps", "1.5"),
            ("embedding.train_steps", "-1"),
            ("stitcher.schedule", "quadratic"),
            ("embedding.lr", "off"),
            ("data.n_episodes", "inf"),
        ] {
            let err = c.set(k, v).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{k}={v}: {err}");
        }
        assert_eq!(c, RunConfig::default());
        assert!(c.apply_text("embedding.lr 3").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\n data.seed = 9 # trailing\n").unwrap();
        assert_eq!(c.data.seed, 9);
    }
}
