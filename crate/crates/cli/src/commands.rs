use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use trajstitch::augment::{augment_dataset, InverseDynamicsModel, InverseTrainer, StitchContext};
use trajstitch::diffusion::{strided_windows, DiffusionModel, DiffusionTrainer};
use trajstitch::embedding::{sidecar_path, EmbeddingModel, EmbeddingTrainer};
use trajstitch::index::{build_ivf, default_n_list, extract_segments, IvfIndex};
use trajstitch::maze::{
    generate_explore_dataset, generate_stitch_dataset, read_dataset, write_dataset, Dataset, DistanceOracle,
    ExploreParams, MazeSpec, StitchParams,
};
use trajstitch::nn::TrainState;
use trajstitch::planner::{evaluate, task_catalog, waypoint_windows, PlannerModels, Task};
use trajstitch::plot::{palette, render, Polyline};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DataKind {
    Stitch,
    Explore,
}

/// `path` with `suffix` appended to the file name.
pub fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(suffix);
    PathBuf::from(os)
}

pub fn meta_path(path: &Path) -> PathBuf {
    suffixed(path, ".meta.json")
}

pub fn checkpoint_path(path: &Path) -> PathBuf {
    suffixed(path, ".ckpt.json")
}

pub fn loss_path(path: &Path) -> PathBuf {
    suffixed(path, ".loss.csv")
}

/// A built-in maze name or a path to an ASCII maze file.
pub fn load_maze(arg: &str, cell_size: f64) -> CliResult<(MazeSpec, Option<PathBuf>)> {
    if let Some(spec) = MazeSpec::builtin(arg) {
        return Ok((MazeSpec::from_ascii(&spec.to_ascii(), cell_size)?, None));
    }
    let path = PathBuf::from(arg);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{arg}: {e}")))?;
    Ok((MazeSpec::from_ascii(&text, cell_size)?, Some(path)))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// State shared by every subcommand run.
pub struct Ctx {
    pub root: PathBuf,
    pub config: RunConfig,
    pub manifest: Manifest,
    pub name: &'static str,
    /// Full invocation, recorded in the manifest.
    pub invocation: String,
}

impl Ctx {
    /// Hashes the inputs (and any model sidecars), rejecting stale ones.
    fn inputs(&self, paths: &[&Path]) -> CliResult<BTreeMap<String, String>> {
        let mut all = Vec::new();
        for p in paths {
            if !p.exists() {
                return Err(CliError::Io(format!("{}: no such file", p.display())));
            }
            all.push(p.to_path_buf());
            let side = sidecar_path(p);
            if side.exists() {
                all.push(side);
            }
        }
        self.manifest.check_inputs(&self.root, &all)
    }

    /// The echo embedded in every output: command, effective config, inputs.
    fn meta(&self, inputs: &BTreeMap<String, String>) -> Value {
        json!({
            "command": self.name,
            "config": self.config.flatten(),
            "config_hash": self.config.hash(),
            "inputs": inputs,
        })
    }

    /// Writes `<primary>.meta.json`, records every output and saves the
    /// manifest.
    fn finish(&mut self, outputs: &[PathBuf], inputs: &BTreeMap<String, String>) -> CliResult<()> {
        let mut outputs = outputs.to_vec();
        if let Some(primary) = outputs.first() {
            let mp = meta_path(primary);
            fs::write(&mp, serde_json::to_vec_pretty(&self.meta(inputs))?).map_err(io_err(&mp))?;
            outputs.push(mp);
        }
        let hash = self.config.hash();
        for o in &outputs {
            self.manifest.record(&self.root, o, &self.invocation, &hash, inputs)?;
        }
        self.manifest.save(&self.root)
    }
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    Ok(read_dataset(path)?)
}

fn write_training_files(out: &Path, state: &TrainState) -> CliResult<Vec<PathBuf>> {
    let ckpt = checkpoint_path(out);
    state.save(&ckpt)?;
    let csv = loss_path(out);
    let mut text = String::from("step,loss\n");
    for (step, loss) in &state.losses {
        text.push_str(&format!("{step},{loss}\n"));
    }
    fs::write(&csv, text).map_err(io_err(&csv))?;
    Ok(vec![out.to_path_buf(), sidecar_path(out), ckpt, csv])
}

fn load_state(resume: Option<&Path>) -> CliResult<Option<TrainState>> {
    resume.map(|p| Ok(TrainState::load(p)?)).transpose()
}

pub fn gen_data(ctx: &mut Ctx, maze: &str, kind: DataKind, out: &Path) -> CliResult<()> {
    let c = ctx.config.data.clone();
    let (spec, maze_file) = load_maze(maze, c.cell_size)?;
    let inputs = match &maze_file {
        Some(p) => ctx.inputs(&[p])?,
        None => BTreeMap::new(),
    };
    let mut ds = match kind {
        DataKind::Stitch => generate_stitch_dataset(
            &spec,
            StitchParams {
                n_episodes: c.n_episodes,
                max_span: c.max_span,
                ep_len: c.ep_len,
                seed: c.seed,
            },
        )?,
        DataKind::Explore => generate_explore_dataset(
            &spec,
            ExploreParams {
                n_episodes: c.n_episodes,
                ep_len: c.ep_len,
                resample_interval: c.resample_interval,
                noise_prob: c.noise_prob,
                seed: c.seed,
            },
        )?,
    };
    ds.meta.params.insert("maze".into(), Value::String(maze.to_string()));
    ds.meta.params.insert("run".into(), ctx.meta(&inputs));
    ensure_parent(out)?;
    write_dataset(&ds, out)?;
    ctx.finish(&[out.to_path_buf()], &inputs)
}

pub fn train_embedding(ctx: &mut Ctx, data: &Path, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    let mut paths = vec![data];
    paths.extend(resume);
    let inputs = ctx.inputs(&paths)?;
    let ds = load_dataset(data)?;
    let cfg = ctx.config.embedding.clone();
    let mut t = match load_state(resume)? {
        Some(s) => EmbeddingTrainer::resume(&ds, cfg, s)?,
        None => EmbeddingTrainer::new(&ds, cfg)?,
    };
    t.train(&ds)?;
    ensure_parent(out)?;
    t.model().save(out)?;
    let files = write_training_files(out, &t.state())?;
    ctx.finish(&files, &inputs)
}

pub fn train_inverse(ctx: &mut Ctx, data: &Path, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    let mut paths = vec![data];
    paths.extend(resume);
    let inputs = ctx.inputs(&paths)?;
    let ds = load_dataset(data)?;
    let cfg = ctx.config.inverse.clone();
    let mut t = match load_state(resume)? {
        Some(s) => InverseTrainer::resume(&ds, cfg, s)?,
        None => InverseTrainer::new(&ds, cfg)?,
    };
    t.train()?;
    ensure_parent(out)?;
    t.model().save(out)?;
    let files = write_training_files(out, &t.state())?;
    ctx.finish(&files, &inputs)
}

/// Stitcher (`planner == false`) or high-level waypoint model.
pub fn train_diffusion(ctx: &mut Ctx, planner: bool, data: &Path, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    let mut paths = vec![data];
    paths.extend(resume);
    let inputs = ctx.inputs(&paths)?;
    let ds = load_dataset(data)?;
    let (windows, norm, cfg) = if planner {
        let plan = ctx.config.plan.clone();
        plan.validate()?;
        let section = &ctx.config.planner;
        if section.window_stride < 1 {
            return Err(CliError::Config("planner.window_stride must be at least 1".into()));
        }
        let (w, norm) = waypoint_windows(&ds, &plan, section.window_stride);
        (w, norm, section.train_config(plan.num_waypoints()))
    } else {
        let section = &ctx.config.stitcher;
        if section.train.window_stride < 1 {
            return Err(CliError::Config("stitcher.window_stride must be at least 1".into()));
        }
        let norm = ds.normalizer();
        let w = strided_windows(&ds, &norm, section.horizon, 1, section.train.window_stride);
        (w, norm, section.train.train_config(section.horizon))
    };
    let mut t = match load_state(resume)? {
        Some(s) => DiffusionTrainer::resume(windows, 2, norm, cfg, s)?,
        None => DiffusionTrainer::new(windows, 2, norm, cfg)?,
    };
    t.train()?;
    ensure_parent(out)?;
    t.model().save(out)?;
    let files = write_training_files(out, &t.state())?;
    ctx.finish(&files, &inputs)
}

pub fn build_index(ctx: &mut Ctx, data: &Path, embedding: &Path, out: &Path) -> CliResult<()> {
    let inputs = ctx.inputs(&[data, embedding])?;
    let ds = load_dataset(data)?;
    let phi = EmbeddingModel::load(embedding)?;
    let c = &ctx.config.index;
    let segs = extract_segments(&ds, &phi, c.segment_len, c.segment_stride)?;
    let n_list = if c.n_list == 0 {
        default_n_list(segs.records.len())
    } else {
        c.n_list
    };
    let index = build_ivf(segs.start_matrix().view(), n_list, c.seed)?;
    ensure_parent(out)?;
    index.save(out)?;
    ctx.finish(&[out.to_path_buf()], &inputs)
}

pub struct AugmentInputs<'a> {
    pub data: &'a Path,
    pub embedding: &'a Path,
    pub index: &'a Path,
    pub stitcher: &'a Path,
    pub inverse: &'a Path,
}

pub fn augment(ctx: &mut Ctx, inp: &AugmentInputs, out: &Path) -> CliResult<()> {
    let inputs = ctx.inputs(&[inp.data, inp.embedding, inp.index, inp.stitcher, inp.inverse])?;
    let ds = load_dataset(inp.data)?;
    let phi = EmbeddingModel::load(inp.embedding)?;
    let stitcher = DiffusionModel::load(inp.stitcher)?;
    let inverse = InverseDynamicsModel::load(inp.inverse)?;
    let c = &ctx.config.index;
    let segs = extract_segments(&ds, &phi, c.segment_len, c.segment_stride)?;
    let index = IvfIndex::load(inp.index, segs.start_matrix()).map_err(|e| {
        CliError::Config(format!(
            "index does not match the segments of this dataset and embedding ({e}); check index.segment_len and index.segment_stride"
        ))
    })?;
    let cfg = ctx.config.augment.stitch_config(stitcher.horizon());
    let sctx = StitchContext {
        dataset: &ds,
        segments: &segs,
        index: &index,
        phi: &phi,
        stitcher: &stitcher,
        inverse: &inverse,
    };
    let mut extra = Map::new();
    extra.insert("run".into(), ctx.meta(&inputs));
    let (aug, report) = augment_dataset(&sctx, &cfg, extra)?;
    ensure_parent(out)?;
    write_dataset(&aug, out)?;
    let report_path = suffixed(out, ".report.json");
    fs::write(&report_path, serde_json::to_vec(&report)?).map_err(io_err(&report_path))?;
    ctx.finish(&[out.to_path_buf(), report_path], &inputs)
}

pub struct EvalInputs<'a> {
    pub maze: &'a str,
    pub planner: &'a Path,
    pub stitcher: &'a Path,
    pub embedding: &'a Path,
    pub tasks: Option<&'a Path>,
}

pub fn eval(ctx: &mut Ctx, inp: &EvalInputs, out: &Path) -> CliResult<()> {
    let (spec, maze_file) = load_maze(inp.maze, ctx.config.data.cell_size)?;
    let mut paths = vec![inp.planner, inp.stitcher, inp.embedding];
    paths.extend(maze_file.as_deref());
    paths.extend(inp.tasks);
    let inputs = ctx.inputs(&paths)?;
    let high = DiffusionModel::load(inp.planner)?;
    let stitcher = DiffusionModel::load(inp.stitcher)?;
    let phi = EmbeddingModel::load(inp.embedding)?;
    let e = &ctx.config.eval;
    let tasks: Vec<Task> = match inp.tasks {
        Some(p) => serde_json::from_slice(&fs::read(p).map_err(io_err(p))?)
            .map_err(|err| CliError::Config(format!("{}: {err}", p.display())))?,
        None => task_catalog(&DistanceOracle::new(&spec), e.n_tasks, e.min_distance, e.task_seed)?,
    };
    for t in &tasks {
        if !spec.is_free(t.start) || !spec.is_free(t.goal) {
            return Err(CliError::Config(format!("task {t:?} is not on free cells")));
        }
    }
    let models = PlannerModels {
        high: &high,
        stitcher: &stitcher,
        phi: &phi,
    };
    let report = evaluate(&spec, &models, &tasks, &ctx.config.plan, &e.seeds)?;
    let mut value = serde_json::to_value(&report)?;
    if let Value::Object(m) = &mut value {
        m.insert("run".into(), ctx.meta(&inputs));
    }
    ensure_parent(out)?;
    fs::write(out, serde_json::to_vec_pretty(&value)?).map_err(io_err(out))?;
    ctx.finish(&[out.to_path_buf()], &inputs)
}

/// `"3"`, `"0-4"` or `"1,5,9"` into trajectory indices.
pub fn parse_subset(s: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::Config(format!("bad trajectory subset {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// One SVG per subset: `<out_dir>/subset_<k>.svg`.
pub fn plot(ctx: &mut Ctx, data: &Path, out_dir: &Path, subsets: &[String]) -> CliResult<()> {
    let inputs = ctx.inputs(&[data])?;
    let ds = load_dataset(data)?;
    let subsets: Vec<Vec<usize>> = subsets.iter().map(|s| parse_subset(s)).collect::<CliResult<_>>()?;
    for s in &subsets {
        if let Some(&i) = s.iter().find(|&&i| i >= ds.trajectories.len()) {
            return Err(CliError::Config(format!(
                "trajectory {i} out of range (dataset has {})",
                ds.trajectories.len()
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let echo = serde_json::to_string(&ctx.meta(&inputs))?;
    let mut files = Vec::new();
    for (k, subset) in subsets.iter().enumerate() {
        let lines: Vec<Polyline> = subset
            .iter()
            .enumerate()
            .map(|(j, &i)| Polyline::new(ds.trajectories[i].states.clone(), palette(j)))
            .collect();
        let svg = render(&ds.spec, &lines);
        let svg = svg.replacen('\n', &format!("\n<metadata><![CDATA[{echo}]]></metadata>\n"), 1);
        let path = out_dir.join(format!("subset_{k}.svg"));
        fs::write(&path, svg).map_err(io_err(&path))?;
        files.push(path);
    }
    let hash = ctx.config.hash();
    for f in &files {
        ctx.manifest.record(&ctx.root, f, &ctx.invocation, &hash, &inputs)?;
    }
    ctx.manifest.save(&ctx.root)
}
