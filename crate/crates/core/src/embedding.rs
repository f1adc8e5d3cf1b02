//! Temporal-distance-preserving state embedding.
//!
//! `phi` maps a (normalized) state to a latent vector whose Euclidean
//! distances approximate the minimum number of environment steps between
//! states. It is trained with an expectile TD regression on the value
//! `V(s, g) = -||phi(s) - phi(g)||`, bootstrapping from a Polyak-averaged
//! target copy of the network.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::maze::{Cell, Dataset, DistanceOracle, EnvState, MazeSpec};
use crate::nn::{self, load_params, save_params, Activation, AdamState, Mlp, MlpSpec, ParamSet, TrainState};
use crate::norm::Normalizer;
use crate::seed::{rng_from_seed, Rng, RngState};
use crate::{Error, Result};

/// Anything that maps states to latent vectors.
pub trait StateEmbedding: Sync {
    fn latent_dim(&self) -> usize;

    /// One latent row per state.
    fn embed_batch(&self, states: &[EnvState]) -> Result<Array2<f64>>;

    fn embed(&self, s: &EnvState) -> Result<Vec<f64>> {
        Ok(self.embed_batch(std::slice::from_ref(s))?.row(0).to_vec())
    }
}

/// Uses world coordinates divided by the cell size as the latent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateEmbedding {
    pub cell_size: f64,
}

impl StateEmbedding for CoordinateEmbedding {
    fn latent_dim(&self) -> usize {
        2
    }

    fn embed_batch(&self, states: &[EnvState]) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn((states.len(), 2), |(i, d)| {
            let s = states[i];
            [s.x, s.y][d] / self.cell_size
        }))
    }
}

pub fn latent_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `V(s, g) = -||phi(s) - phi(g)||`.
pub fn value<E: StateEmbedding + ?Sized>(model: &E, s: &EnvState, g: &EnvState) -> Result<f64> {
    let z = model.embed_batch(&[*s, *g])?;
    Ok(-latent_distance(z.row(0).as_slice().expect("row"), z.row(1).as_slice().expect("row")))
}

/// Asymmetric squared loss `|xi - 1(u < 0)| * u^2`.
pub fn expectile_loss(u: f64, xi: f64) -> f64 {
    expectile_weight(u, xi) * u * u
}

fn expectile_weight(u: f64, xi: f64) -> f64 {
    if u < 0.0 {
        1.0 - xi
    } else {
        xi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub net: Mlp,
    pub normalizer: Normalizer,
    pub gamma: f64,
    pub xi: f64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    latent_dim: usize,
    gamma: f64,
    xi: f64,
    normalizer: Normalizer,
}

/// `model.bin` -> `model.bin.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

impl EmbeddingModel {
    pub fn latent(&self, s: &EnvState) -> Result<Vec<f64>> {
        self.embed(s)
    }

    /// Writes the parameters to `path` and the metadata to `path.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_params(path, &self.net.spec, &self.net.params)?;
        let side = Sidecar {
            latent_dim: self.net.spec.output_dim(),
            gamma: self.gamma,
            xi: self.xi,
            normalizer: self.normalizer.clone(),
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (spec, params) = load_params(path)?;
        let side: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        if side.latent_dim != spec.output_dim() || spec.input_dim() != 2 {
            return Err(Error::Corrupt("embedding sidecar does not match parameters".into()));
        }
        Ok(Self {
            net: Mlp::from_parts(spec, params)?,
            normalizer: side.normalizer,
            gamma: side.gamma,
            xi: side.xi,
        })
    }

    fn normalized(&self, states: &[EnvState]) -> Array2<f64> {
        normalized_batch(&self.normalizer, states)
    }
}

impl StateEmbedding for EmbeddingModel {
    fn latent_dim(&self) -> usize {
        self.net.spec.output_dim()
    }

    fn embed_batch(&self, states: &[EnvState]) -> Result<Array2<f64>> {
        self.net.forward(self.normalized(states).view())
    }
}

fn normalized_batch(norm: &Normalizer, states: &[EnvState]) -> Array2<f64> {
    Array2::from_shape_fn((states.len(), 2), |(i, d)| {
        let s = states[i];
        norm.normalize_value(d, [s.x, s.y][d])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTrainConfig {
    pub gamma: f64,
    pub xi: f64,
    pub batch_size: usize,
    pub train_steps: u64,
    pub lr: f64,
    pub tau_polyak: f64,
    pub p_hindsight: f64,
    pub p_random: f64,
    pub geometric_p: f64,
    /// `None` means half a cell.
    pub equal_threshold: Option<f64>,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            xi: 0.95,
            batch_size: 256,
            train_steps: 30_000,
            lr: 3e-4,
            tau_polyak: 0.005,
            p_hindsight: 0.8,
            p_random: 0.2,
            geometric_p: 0.1,
            equal_threshold: None,
            hidden: vec![128, 128, 128],
            latent_dim: 32,
            log_every: 100,
            seed: 0,
        }
    }
}

impl EmbedTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.xi > 0.5 && self.xi < 1.0) && self.xi != 0.5 {
            return bad("xi must lie in [0.5, 1)");
        }
        if (self.p_hindsight + self.p_random - 1.0).abs() > 1e-12 || self.p_hindsight < 0.0 || self.p_random < 0.0 {
            return bad("p_hindsight + p_random must equal 1");
        }
        if !(self.geometric_p > 0.0 && self.geometric_p <= 1.0) {
            return bad("geometric_p must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.latent_dim == 0 || self.hidden.is_empty() {
            return bad("batch_size, latent_dim and hidden must be non-empty");
        }
        if !(0.0..=1.0).contains(&self.tau_polyak) {
            return bad("tau_polyak must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn threshold(&self, spec: &MazeSpec) -> f64 {
        self.equal_threshold.unwrap_or(0.5 * spec.cell_size())
    }
}

/// Draws `(s, s', g)` training tuples from a dataset.
pub struct TupleSampler<'a> {
    dataset: &'a Dataset,
    /// Trajectories with at least one transition.
    usable: Vec<usize>,
    /// Prefix sums of trajectory lengths, for uniform state draws.
    cum_states: Vec<usize>,
    geometric: Geometric,
    p_hindsight: f64,
}

impl<'a> TupleSampler<'a> {
    pub fn new(dataset: &'a Dataset, cfg: &EmbedTrainConfig) -> Result<Self> {
        let usable: Vec<usize> = (0..dataset.trajectories.len())
            .filter(|&i| dataset.trajectories[i].len() >= 2)
            .collect();
        if usable.is_empty() {
            return Err(Error::Config("dataset has no transitions".into()));
        }
        let mut cum_states = Vec::with_capacity(dataset.trajectories.len() + 1);
        cum_states.push(0);
        for t in &dataset.trajectories {
            cum_states.push(cum_states.last().unwrap() + t.len());
        }
        let geometric = Geometric::new(cfg.geometric_p).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            dataset,
            usable,
            cum_states,
            geometric,
            p_hindsight: cfg.p_hindsight,
        })
    }

    pub fn random_state(&self, rng: &mut Rng) -> EnvState {
        let total = *self.cum_states.last().unwrap();
        let k = rng.random_range(0..total);
        let traj = self.cum_states.partition_point(|&c| c <= k) - 1;
        self.dataset.trajectories[traj].states[k - self.cum_states[traj]]
    }

    /// Hindsight offset: `1 + Geometric(p)`, so the support starts at 1.
    pub fn goal_offset(&self, rng: &mut Rng) -> u64 {
        1 + self.geometric.sample(rng)
    }

    pub fn sample(&self, rng: &mut Rng) -> (EnvState, EnvState, EnvState) {
        let traj = &self.dataset.trajectories[self.usable[rng.random_range(0..self.usable.len())]];
        let t = rng.random_range(0..traj.len() - 1);
        let (s, s_next) = (traj.states[t], traj.states[t + 1]);
        let g = if rng.random::<f64>() < self.p_hindsight {
            let off = self.goal_offset(rng);
            let idx = (t as u64).saturating_add(off).min(traj.len() as u64 - 1) as usize;
            traj.states[idx]
        } else {
            self.random_state(rng)
        };
        (s, s_next, g)
    }
}

/// Draws one tuple; see [`TupleSampler`].
pub fn sample_training_tuple(dataset: &Dataset, cfg: &EmbedTrainConfig, rng: &mut Rng) -> Result<(EnvState, EnvState, EnvState)> {
    Ok(TupleSampler::new(dataset, cfg)?.sample(rng))
}

/// Mean expectile TD loss of a batch and its gradient with respect to the
/// online parameters. `target` supplies the bootstrap distances.
pub fn td_loss_and_grad(
    net_spec: &MlpSpec,
    online: &[f64],
    target: &[f64],
    norm: &Normalizer,
    batch: &[(EnvState, EnvState, EnvState)],
    gamma: f64,
    xi: f64,
    equal_threshold: f64,
) -> Result<(f64, Vec<f64>)> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Shape("empty TD batch".into()));
    }
    // rows 0..b hold s, rows b..2b hold g
    let mut sg = Vec::with_capacity(2 * b);
    sg.extend(batch.iter().map(|t| t.0));
    sg.extend(batch.iter().map(|t| t.2));
    let mut ng = Vec::with_capacity(2 * b);
    ng.extend(batch.iter().map(|t| t.1));
    ng.extend(batch.iter().map(|t| t.2));

    let (z, tape) = nn::forward_tape(net_spec, online, normalized_batch(norm, &sg).view())?;
    let zt = nn::forward(net_spec, target, normalized_batch(norm, &ng).view())?;

    let latent = net_spec.output_dim();
    let mut upstream = Array2::<f64>::zeros((2 * b, latent));
    let mut loss = 0.0;
    for i in 0..b {
        let (s, _, g) = batch[i];
        let zs = z.row(i);
        let zg = z.row(b + i);
        let d = latent_distance(zs.as_slice().unwrap(), zg.as_slice().unwrap());
        let u = if s.distance(&g) > equal_threshold {
            let d_bar = latent_distance(zt.row(i).as_slice().unwrap(), zt.row(b + i).as_slice().unwrap());
            -1.0 - gamma * d_bar + d
        } else {
            d
        };
        loss += expectile_loss(u, xi);
        if d > 1e-12 {
            let dl_dd = 2.0 * expectile_weight(u, xi) * u / b as f64;
            for k in 0..latent {
                let gk = dl_dd * (zs[k] - zg[k]) / d;
                upstream[[i, k]] = gk;
                upstream[[b + i, k]] = -gk;
            }
        }
    }
    let (grads, _) = nn::backward(net_spec, online, &tape, upstream.view())?;
    Ok((loss / b as f64, grads))
}

/// `target <- (1 - tau) * target + tau * online`.
pub fn polyak_update(target: &mut [f64], online: &[f64], tau: f64) {
    for (t, o) in target.iter_mut().zip(online) {
        *t = (1.0 - tau) * *t + tau * o;
    }
}

/// Stateful expectile-TD trainer with an exactly resumable state.
pub struct EmbeddingTrainer {
    pub cfg: EmbedTrainConfig,
    pub online: Mlp,
    pub target: ParamSet,
    pub normalizer: Normalizer,
    pub adam: AdamState,
    pub rng: Rng,
    pub step: u64,
    pub losses: Vec<(u64, f64)>,
    threshold: f64,
}

impl EmbeddingTrainer {
    pub fn new(dataset: &Dataset, cfg: EmbedTrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = MlpSpec::with_hidden(2, &cfg.hidden, cfg.latent_dim, Activation::Gelu)?;
        let online = Mlp::new(spec, cfg.seed);
        let adam = AdamState::new(online.params.len(), cfg.lr);
        Ok(Self {
            target: online.params.clone(),
            online,
            normalizer: dataset.normalizer(),
            adam,
            rng: rng_from_seed(crate::seed::derive_seed(cfg.seed, u64::MAX)),
            step: 0,
            losses: Vec::new(),
            threshold: cfg.threshold(&dataset.spec),
            cfg,
        })
    }

    /// Restores a trainer from [`EmbeddingTrainer::state`].
    pub fn resume(dataset: &Dataset, cfg: EmbedTrainConfig, state: TrainState) -> Result<Self> {
        let mut t = Self::new(dataset, cfg)?;
        let [online, target]: [ParamSet; 2] = state
            .params
            .try_into()
            .map_err(|_| Error::Corrupt("embedding state needs online and target params".into()))?;
        t.online = Mlp::from_parts(t.online.spec.clone(), online)?;
        if target.len() != t.online.params.len() || state.adam.m.len() != target.len() {
            return Err(Error::Corrupt("embedding state has wrong sizes".into()));
        }
        t.target = target;
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
            params: vec![self.online.params.clone(), self.target.clone()],
            adam: self.adam.clone(),
            losses: self.losses.clone(),
        }
    }

    /// One gradient step followed by the Polyak target update.
    pub fn train_step(&mut self, sampler: &TupleSampler) -> Result<f64> {
        let batch: Vec<_> = (0..self.cfg.batch_size).map(|_| sampler.sample(&mut self.rng)).collect();
        let (loss, grads) = td_loss_and_grad(
            &self.online.spec,
            &self.online.params.values,
            &self.target.values,
            &self.normalizer,
            &batch,
            self.cfg.gamma,
            self.cfg.xi,
            self.threshold,
        )?;
        self.adam.step(&mut self.online.params.values, &grads)?;
        polyak_update(&mut self.target.values, &self.online.params.values, self.cfg.tau_polyak);
        self.step += 1;
        if self.cfg.log_every > 0 && self.step % self.cfg.log_every == 0 {
            self.losses.push((self.step, loss));
        }
        Ok(loss)
    }

    /// Runs until `cfg.train_steps` total steps have been taken.
    pub fn train(&mut self, dataset: &Dataset) -> Result<()> {
        self.train_until(dataset, self.cfg.train_steps)
    }

    pub fn train_until(&mut self, dataset: &Dataset, total_steps: u64) -> Result<()> {
        let sampler = TupleSampler::new(dataset, &self.cfg)?;
        while self.step < total_steps {
            self.train_step(&sampler)?;
        }
        Ok(())
    }

    pub fn model(&self) -> EmbeddingModel {
        EmbeddingModel {
            net: self.online.clone(),
            normalizer: self.normalizer.clone(),
            gamma: self.cfg.gamma,
            xi: self.cfg.xi,
        }
    }
}

pub fn train_embedding(dataset: &Dataset, cfg: EmbedTrainConfig) -> Result<EmbeddingModel> {
    let mut t = EmbeddingTrainer::new(dataset, cfg)?;
    t.train(dataset)?;
    Ok(t.model())
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two paired samples".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation("a sample has no rank variance".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Spearman correlation between latent distances and BFS distances over
/// `n_pairs` uniformly drawn pairs of distinct, mutually reachable free cells.
pub fn rank_quality<E: StateEmbedding + ?Sized>(model: &E, spec: &MazeSpec, n_pairs: usize, rng: &mut Rng) -> Result<f64> {
    let oracle = DistanceOracle::new(spec);
    let cells = oracle.free_cells().to_vec();
    let mut pairs = Vec::new();
    for (i, &a) in cells.iter().enumerate() {
        for &b in &cells[i + 1..] {
            if let Some(d) = oracle.distance(a, b)? {
                pairs.push((a, b, d));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::UndefinedCorrelation("no reachable pair of distinct cells".into()));
    }
    let latents = model.embed_batch(&cells.iter().map(|&c| spec.center(c)).collect::<Vec<_>>())?;
    let index: HashMap<Cell, usize> = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut lat = Vec::with_capacity(n_pairs);
    let mut oracle_d = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let (a, b, d) = pairs[rng.random_range(0..pairs.len())];
        let (ia, ib) = (index[&a], index[&b]);
        lat.push(latent_distance(latents.row(ia).as_slice().unwrap(), latents.row(ib).as_slice().unwrap()));
        oracle_d.push(d as f64);
    }
    spearman(&lat, &oracle_d)
}
