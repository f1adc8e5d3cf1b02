use ndarray::Array2;
use proptest::prelude::*;

use super::*;
use crate::diffusion::{DiffusionTrainConfig, DiffusionTrainer};
use crate::embedding::CoordinateEmbedding;
use crate::maze::{generate_stitch_dataset, StitchParams};

fn small_cfg() -> PlannerConfig {
    PlannerConfig {
        plan_horizon: 8,
        temporal_jump: 4,
        replanning_interval: Some(50),
        subgoal_horizon: 2,
        max_episode_steps: 60,
        delta_g: 0.5,
        ddim_steps: 4,
        resample: 2,
    }
}

fn tiny_model(windows: Array2<f64>, norm: Normalizer, horizon: usize) -> DiffusionModel {
    let cfg = DiffusionTrainConfig {
        horizon,
        hidden: vec![16, 16],
        time_dim: 8,
        diffusion_steps: 20,
        batch_size: 8,
        train_steps: 5,
        ..Default::default()
    };
    let mut t = DiffusionTrainer::new(windows, 2, norm, cfg).unwrap();
    t.train().unwrap();
    t.model()
}

struct Models {
    spec: MazeSpec,
    high: DiffusionModel,
    stitcher: DiffusionModel,
}

fn models() -> Models {
    let spec = MazeSpec::open(7, 7).unwrap();
    let data = generate_stitch_dataset(
        &spec,
        StitchParams {
            n_episodes: 30,
            max_span: 4,
            ep_len: 40,
            seed: 0,
        },
    )
    .unwrap();
    let cfg = small_cfg();
    let (w, norm) = waypoint_windows(&data, &cfg, 1);
    let high = tiny_model(w, norm.clone(), cfg.num_waypoints());
    let sw = strided_windows(&data, &norm, cfg.temporal_jump + 1, 1, 1);
    let stitcher = tiny_model(sw, norm, cfg.temporal_jump + 1);
    Models { spec, high, stitcher }
}

#[test]
fn config_arithmetic_and_validation() {
    let c = PlannerConfig::default();
    assert_eq!(c.num_waypoints(), 5);
    assert_eq!(c.plan_len(), 101);
    c.validate().unwrap();
    let bad = |f: fn(&mut PlannerConfig)| {
        let mut c = PlannerConfig::default();
        f(&mut c);
        c.validate().is_err()
    };
    assert!(bad(|c| c.temporal_jump = 1));
    assert!(bad(|c| c.subgoal_horizon = 26));
    assert!(bad(|c| c.subgoal_horizon = 0));
    assert!(bad(|c| c.replanning_interval = Some(70)));
    assert!(bad(|c| c.delta_g = 0.0));
    assert!(!bad(|c| c.replanning_interval = None));
    assert_eq!(small_cfg().plan_len(), 9);
}

#[test]
fn plan_boundaries_are_exact() {
    let m = models();
    let cfg = small_cfg();
    let free = m.spec.free_cells();
    let mut rng = rng_from_seed(4);
    for (i, &a) in free.iter().enumerate() {
        let b = free[(i * 7 + 3) % free.len()];
        let (s, g) = (m.spec.center(a), m.spec.center(b));
        let p = plan(&m.spec, &m.high, &m.stitcher, &s, &g, &cfg, &mut rng).unwrap();
        assert_eq!(p.states.len(), cfg.plan_len());
        assert_eq!(p.states.len(), (cfg.num_waypoints() - 1) * cfg.temporal_jump + 1);
        assert!(p.states[0].bits_eq(&s));
        assert!(p.states.last().unwrap().bits_eq(&g));
        assert_eq!(p.waypoint_indices, vec![0, 4, 8]);
        for st in &p.states {
            assert!(m.spec.center(m.spec.free_cell_of(st).unwrap()).bits_eq(st));
        }
        assert!(plan_dynamic_mse(&m.spec, &p.states).unwrap().iter().all(|v| *v >= 0.0));
    }
    let s = m.spec.center(free[0]);
    let p = plan(&m.spec, &m.high, &m.stitcher, &s, &s, &cfg, &mut rng).unwrap();
    assert!(p.waypoints()[0].bits_eq(&s) && p.waypoints()[2].bits_eq(&s));
}

#[test]
fn plan_rejects_mismatched_horizons() {
    let m = models();
    let mut cfg = small_cfg();
    cfg.temporal_jump = 3;
    let s = m.spec.center(m.spec.free_cells()[0]);
    assert!(plan(&m.spec, &m.high, &m.stitcher, &s, &s, &cfg, &mut rng_from_seed(0)).is_err());
}

/// Latents multiplied by a positive constant.
struct Scaled<E>(E, f64);

impl<E: StateEmbedding> StateEmbedding for Scaled<E> {
    fn latent_dim(&self) -> usize {
        self.0.latent_dim()
    }

    fn embed_batch(&self, states: &[EnvState]) -> Result<Array2<f64>> {
        Ok(self.0.embed_batch(states)? * self.1)
    }
}

#[test]
fn controller_matches_bfs_on_open_maze() {
    let spec = MazeSpec::open(9, 8).unwrap();
    let oracle = DistanceOracle::new(&spec);
    let phi = CoordinateEmbedding { cell_size: 1.0 };
    let scaled = Scaled(CoordinateEmbedding { cell_size: 1.0 }, 4.0);
    for &a in oracle.free_cells() {
        for &b in oracle.free_cells() {
            let (s, g) = (spec.center(a), spec.center(b));
            let act = low_level_act(&spec, &phi, &s, &g).unwrap();
            assert!(oracle.optimal_actions(a, b).unwrap().contains(&act), "{a:?} -> {b:?}: {act:?}");
            assert_eq!(low_level_act(&spec, &scaled, &s, &g).unwrap(), act);
        }
    }
}

#[test]
fn controller_stays_on_subgoal_and_steps_east() {
    let spec = MazeSpec::corridor(6).unwrap();
    let phi = CoordinateEmbedding { cell_size: 1.0 };
    let cells = spec.free_cells();
    let s = spec.center(cells[2]);
    assert_eq!(low_level_act(&spec, &phi, &s, &s).unwrap(), ActionId::STAY);
    let east = ActionId::from_displacement(1, 0).unwrap();
    assert_eq!(low_level_act(&spec, &phi, &s, &spec.center(cells[3])).unwrap(), east);
}

#[test]
fn dynamic_mse_examples() {
    let spec = MazeSpec::compact8();
    let s = spec.center(spec.free_cells()[5]);
    for a in ActionId::all() {
        let n = step(&spec, &s, a).unwrap();
        assert_eq!(dynamic_mse(&spec, &s, a, &n).unwrap(), 0.0);
        let off = EnvState::new(n.x + 0.1, n.y);
        assert!((dynamic_mse(&spec, &s, a, &off).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(best_action_mse(&spec, &s, &n).unwrap(), 0.0);
    }
}

#[test]
fn coverage_examples() {
    let spec = MazeSpec::compact8();
    let n_free = spec.free_cells().len() as f64;
    let s = spec.center(spec.free_cells()[3]);
    assert_eq!(coverage(&spec, &vec![s; 20]), 1.0 / n_free);
    let sweep: Vec<EnvState> = spec.free_cells().into_iter().map(|c| spec.center(c)).collect();
    assert_eq!(coverage(&spec, &sweep), 1.0);

    // 4x4 with free cells (1,1), (2,1), (1,2); the trajectory visits two
    let small = MazeSpec::from_ascii("####\n#..#\n#.##\n####\n", 1.0).unwrap();
    assert_eq!(small.free_cells().len(), 3);
    let traj = [
        small.center(Cell::new(1, 1)),
        small.center(Cell::new(2, 1)),
        small.center(Cell::new(1, 1)),
    ];
    assert_eq!(coverage(&small, &traj), 2.0 / 3.0);
}

#[test]
fn trivial_episode_succeeds_without_planning() {
    let m = models();
    let phi = CoordinateEmbedding { cell_size: 1.0 };
    let pm = PlannerModels {
        high: &m.high,
        stitcher: &m.stitcher,
        phi: &phi,
    };
    let s = m.spec.center(m.spec.free_cells()[4]);
    let out = rollout_episode(&m.spec, &pm, &s, &s, &small_cfg(), &mut rng_from_seed(0)).unwrap();
    assert!(out.success);
    assert_eq!(out.steps, 0);
    assert_eq!(out.n_plans, 0);
    assert_eq!(out.trace, vec![s]);
}

#[test]
fn episodes_replay_and_follow_dynamics() {
    let m = models();
    let phi = CoordinateEmbedding { cell_size: 1.0 };
    let pm = PlannerModels {
        high: &m.high,
        stitcher: &m.stitcher,
        phi: &phi,
    };
    let free = m.spec.free_cells();
    let (s, g) = (m.spec.center(free[0]), m.spec.center(*free.last().unwrap()));
    for interval in [Some(50), None] {
        let cfg = PlannerConfig {
            replanning_interval: interval,
            ..small_cfg()
        };
        let a = rollout_episode(&m.spec, &pm, &s, &g, &cfg, &mut rng_from_seed(9)).unwrap();
        let b = rollout_episode(&m.spec, &pm, &s, &g, &cfg, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), a.steps + 1);
        for (t, act) in a.actions.iter().enumerate() {
            assert_eq!(dynamic_mse(&m.spec, &a.trace[t], *act, &a.trace[t + 1]).unwrap(), 0.0);
        }
        assert_eq!(a.success, success_step(&a.trace, &g, cfg.delta_g).is_some());
        if a.success {
            assert_eq!(success_step(&a.trace, &g, cfg.delta_g), Some(a.steps));
        }
    }
    let mut long = small_cfg();
    long.max_episode_steps = 120;
    long.replanning_interval = Some(50);
    let out = rollout_episode(&m.spec, &pm, &s, &g, &long, &mut rng_from_seed(1)).unwrap();
    assert!(out.n_plans >= 1);
    assert!(!out.success || out.steps <= 120);
    if !out.success {
        assert_eq!(out.n_plans, 3);
    }
}

#[test]
fn task_catalog_is_stratified() {
    let spec = MazeSpec::compact8();
    let oracle = DistanceOracle::new(&spec);
    let tasks = task_catalog(&oracle, 12, 3, 5).unwrap();
    assert_eq!(tasks.len(), 12);
    let d: Vec<u32> = tasks
        .iter()
        .map(|t| oracle.distance(t.start, t.goal).unwrap().unwrap())
        .collect();
    assert!(d.iter().all(|&x| x >= 3));
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(task_catalog(&oracle, 12, 3, 5).unwrap(), tasks);
    assert!(task_catalog(&oracle, 10, 1000, 0).is_err());
}

#[test]
fn evaluate_accounting_and_replay() {
    let m = models();
    let phi = CoordinateEmbedding { cell_size: 1.0 };
    let pm = PlannerModels {
        high: &m.high,
        stitcher: &m.stitcher,
        phi: &phi,
    };
    let free = m.spec.free_cells();
    let trivial: Vec<Task> = free[..4].iter().map(|&c| Task { start: c, goal: c }).collect();
    let r = evaluate(&m.spec, &pm, &trivial, &small_cfg(), &[0, 1]).unwrap();
    assert_eq!(r.success_rate, 1.0);
    assert_eq!(r.n_episodes, 8);

    let tasks = vec![
        Task {
            start: free[0],
            goal: free[free.len() - 1],
        },
        Task {
            start: free[3],
            goal: free[10],
        },
        Task {
            start: free[7],
            goal: free[7],
        },
    ];
    let seeds = [3, 4, 5];
    let r = evaluate(&m.spec, &pm, &tasks, &small_cfg(), &seeds).unwrap();
    assert_eq!(r.per_task.iter().map(|t| t.successes).sum::<usize>(), r.n_successes);
    assert_eq!(r.per_task.iter().map(|t| t.episodes).sum::<usize>(), r.n_episodes);
    assert_eq!(r.n_episodes, 9);
    assert_eq!(r.success_rate, r.n_successes as f64 / 9.0);
    assert!((0.0..=1.0).contains(&r.success_rate));
    assert_eq!(r.episodes[1].task, 0);
    assert_eq!(r.episodes[1].seed, 4);
    let again = evaluate(&m.spec, &pm, &tasks, &small_cfg(), &seeds).unwrap();
    assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
    assert!(evaluate(&m.spec, &pm, &[], &small_cfg(), &seeds).is_err());
}

#[test]
fn percentile_hand_values() {
    let p = Percentiles::of(&[5.0, 1.0, 3.0, 2.0, 4.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
    assert_eq!(p.count, 10);
    assert_eq!(p.median, 5.5);
    assert_eq!(p.p90, 9.0);
    assert_eq!(p.p95, 10.0);
    assert_eq!(p.max, 10.0);
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert!(Percentiles::of(&[]).is_none());
}

proptest! {
    #[test]
    fn larger_delta_g_never_loses_success(
        pts in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..40),
        gx in 0.0f64..10.0,
        gy in 0.0f64..10.0,
        d1 in 0.01f64..5.0,
        extra in 0.0f64..5.0,
    ) {
        let trace: Vec<EnvState> = pts.iter().map(|&(x, y)| EnvState::new(x, y)).collect();
        let g = EnvState::new(gx, gy);
        let small = success_step(&trace, &g, d1);
        let large = success_step(&trace, &g, d1 + extra);
        if let Some(k) = small {
            prop_assert!(large.is_some_and(|j| j <= k));
        }
    }
}
