//! Inverse dynamics: a 9-way classifier over consecutive state pairs.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedding::sidecar_path;
use crate::maze::{ActionId, Dataset, EnvState};
use crate::nn::{load_params, save_params, Activation, AdamState, Mlp, MlpSpec, ParamSet, TrainState};
use crate::norm::Normalizer;
use crate::seed::{derive_seed, rng_from_seed, Rng, RngState};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseDynamicsModel {
    pub net: Mlp,
    pub normalizer: Normalizer,
    pub cell_size: f64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    normalizer: Normalizer,
    cell_size: f64,
}

/// `[normalized s, (s' - s) / cell_size]`.
fn features(norm: &Normalizer, cell: f64, pairs: &[(EnvState, EnvState)]) -> Array2<f64> {
    Array2::from_shape_fn((pairs.len(), 4), |(i, k)| {
        let (s, n) = pairs[i];
        match k {
            0 => norm.normalize_value(0, s.x),
            1 => norm.normalize_value(1, s.y),
            2 => (n.x - s.x) / cell,
            _ => (n.y - s.y) / cell,
        }
    })
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

impl InverseDynamicsModel {
    pub fn logits(&self, pairs: &[(EnvState, EnvState)]) -> Result<Array2<f64>> {
        self.net.forward(features(&self.normalizer, self.cell_size, pairs).view())
    }

    /// Most likely action per pair; ties go to the smaller id. A pair that
    /// did not move is "stay", matching the training labels.
    pub fn predict(&self, pairs: &[(EnvState, EnvState)]) -> Result<Vec<ActionId>> {
        let logits = self.logits(pairs)?;
        logits
            .rows()
            .into_iter()
            .zip(pairs)
            .map(|(r, (s, n))| {
                if s.bits_eq(n) {
                    Ok(ActionId::STAY)
                } else {
                    ActionId::new(argmax(r) as u8)
                }
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_params(path, &self.net.spec, &self.net.params)?;
        let side = Sidecar {
            normalizer: self.normalizer.clone(),
            cell_size: self.cell_size,
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (spec, params) = load_params(path)?;
        if spec.input_dim() != 4 || spec.output_dim() != ActionId::COUNT {
            return Err(Error::Corrupt("inverse dynamics net must map 4 -> 9".into()));
        }
        let side: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        Ok(Self {
            net: Mlp::from_parts(spec, params)?,
            normalizer: side.normalizer,
            cell_size: side.cell_size,
        })
    }
}

/// Labels each consecutive pair with the predicted action; the final state
/// gets "stay", so the output has one action per state.
pub fn infer_actions(model: &InverseDynamicsModel, states: &[EnvState]) -> Result<Vec<ActionId>> {
    let pairs: Vec<(EnvState, EnvState)> = states.windows(2).map(|w| (w[0], w[1])).collect();
    let mut actions = if pairs.is_empty() { Vec::new() } else { model.predict(&pairs)? };
    if !states.is_empty() {
        actions.push(ActionId::STAY);
    }
    Ok(actions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseTrainConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: u64,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for InverseTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            lr: 3e-4,
            batch_size: 256,
            train_steps: 3000,
            log_every: 100,
            seed: 0,
        }
    }
}

/// `(s, s', label)` triples; a transition that did not move is labelled
/// "stay", since every blocked move is indistinguishable from it.
pub fn labelled_transitions(dataset: &Dataset) -> Vec<(EnvState, EnvState, ActionId)> {
    let mut out = Vec::with_capacity(dataset.num_transitions());
    for traj in &dataset.trajectories {
        for t in 0..traj.transitions() {
            let (s, n) = (traj.states[t], traj.states[t + 1]);
            let a = if s.bits_eq(&n) { ActionId::STAY } else { traj.actions[t] };
            out.push((s, n, a));
        }
    }
    out
}

/// Mean cross-entropy of a batch and its parameter gradient.
pub fn cross_entropy_and_grad(net: &Mlp, inputs: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (logits, tape) = net.forward_tape(inputs)?;
    let b = labels.len() as f64;
    let mut upstream = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let log_z = mx + sum.ln();
        loss += log_z - row[labels[i]];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            upstream[[i, j]] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / b;
        }
    }
    let (grads, _) = net.backward(&tape, upstream.view())?;
    Ok((loss / b, grads))
}

pub struct InverseTrainer {
    pub cfg: InverseTrainConfig,
    pub net: Mlp,
    pub normalizer: Normalizer,
    pub cell_size: f64,
    pub adam: AdamState,
    pub rng: Rng,
    pub step: u64,
    pub losses: Vec<(u64, f64)>,
    inputs: Array2<f64>,
    labels: Vec<usize>,
}

impl InverseTrainer {
    pub fn new(dataset: &Dataset, cfg: InverseTrainConfig) -> Result<Self> {
        let data = labelled_transitions(dataset);
        if data.is_empty() {
            return Err(Error::Config("dataset has no transitions".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let normalizer = dataset.normalizer();
        let cell_size = dataset.spec.cell_size();
        let pairs: Vec<_> = data.iter().map(|t| (t.0, t.1)).collect();
        let inputs = features(&normalizer, cell_size, &pairs);
        let labels = data.iter().map(|t| t.2.index()).collect();
        let spec = MlpSpec::with_hidden(4, &cfg.hidden, ActionId::COUNT, Activation::Relu)?;
        let net = Mlp::new(spec, cfg.seed);
        Ok(Self {
            adam: AdamState::new(net.params.len(), cfg.lr),
            net,
            normalizer,
            cell_size,
            rng: rng_from_seed(derive_seed(cfg.seed, u64::MAX)),
            step: 0,
            losses: Vec::new(),
            inputs,
            labels,
            cfg,
        })
    }

    pub fn resume(dataset: &Dataset, cfg: InverseTrainConfig, state: TrainState) -> Result<Self> {
        let mut t = Self::new(dataset, cfg)?;
        let [params]: [ParamSet; 1] = state
            .params
            .try_into()
            .map_err(|_| Error::Corrupt("inverse dynamics state needs one param set".into()))?;
        t.net = Mlp::from_parts(t.net.spec.clone(), params)?;
        if state.adam.m.len() != t.net.params.len() {
            return Err(Error::Corrupt("adam moments do not match parameters".into()));
        }
        t.adam = state.adam;
        t.rng = state.rng.restore().ok_or_else(|| Error::Corrupt("bad rng state".into()))?;
        t.step = state.step;
        t.losses = state.losses;
        Ok(t)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            rng: RngState::capture(&self.rng),
            params: vec![self.net.params.clone()],
            adam: self.adam.clone(),
            losses: self.losses.clone(),
        }
    }

    pub fn train_step(&mut self) -> Result<f64> {
        let idx: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| self.rng.random_range(0..self.labels.len()))
            .collect();
        let x = crate::nn::gather_rows(self.inputs.view(), &idx);
        let y: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        let (loss, grads) = cross_entropy_and_grad(&self.net, x.view(), &y)?;
        self.adam.step(&mut self.net.params.values, &grads)?;
        self.step += 1;
        if self.cfg.log_every > 0 && self.step % self.cfg.log_every == 0 {
            self.losses.push((self.step, loss));
        }
        Ok(loss)
    }

    pub fn train_until(&mut self, total_steps: u64) -> Result<()> {
        while self.step < total_steps {
            self.train_step()?;
        }
        Ok(())
    }

    pub fn train(&mut self) -> Result<()> {
        self.train_until(self.cfg.train_steps)
    }

    pub fn model(&self) -> InverseDynamicsModel {
        InverseDynamicsModel {
            net: self.net.clone(),
            normalizer: self.normalizer.clone(),
            cell_size: self.cell_size,
        }
    }
}

pub fn train_inverse_dynamics(dataset: &Dataset, cfg: InverseTrainConfig) -> Result<InverseDynamicsModel> {
    let mut t = InverseTrainer::new(dataset, cfg)?;
    t.train()?;
    Ok(t.model())
}

/// Fraction of transitions whose label (canonicalized as in training) is
/// predicted exactly.
pub fn accuracy(model: &InverseDynamicsModel, dataset: &Dataset) -> Result<f64> {
    let data = labelled_transitions(dataset);
    if data.is_empty() {
        return Err(Error::Config("dataset has no transitions".into()));
    }
    let pairs: Vec<_> = data.iter().map(|t| (t.0, t.1)).collect();
    let pred = model.predict(&pairs)?;
    let hits = pred.iter().zip(&data).filter(|(p, t)| **p == t.2).count();
    Ok(hits as f64 / data.len() as f64)
}
