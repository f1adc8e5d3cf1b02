use ndarray::Array2;
use rand::Rng as _;

use super::*;
use crate::diffusion::{strided_windows, DiffusionTrainConfig, DiffusionTrainer};
use crate::embedding::CoordinateEmbedding;
use crate::index::{build_ivf, default_n_list, extract_segments};
use crate::maze::{generate_stitch_dataset, ActionId, MazeSpec, StitchParams};
use crate::seed::rng_from_seed;

fn stitch_data(seed: u64, n: usize) -> Dataset {
    generate_stitch_dataset(
        &MazeSpec::compact8(),
        StitchParams {
            n_episodes: n,
            max_span: 4,
            ep_len: 60,
            seed,
        },
    )
    .unwrap()
}

fn small_inverse(d: &Dataset, steps: u64) -> InverseDynamicsModel {
    let cfg = InverseTrainConfig {
        hidden: vec![64, 64],
        lr: 3e-3,
        batch_size: 128,
        train_steps: steps,
        ..Default::default()
    };
    train_inverse_dynamics(d, cfg).unwrap()
}

#[test]
fn direction_is_unit() {
    let mut rng = rng_from_seed(0);
    for _ in 0..200 {
        let z = sample_direction(1, &mut rng);
        assert!(z[0] == 1.0 || z[0] == -1.0);
    }
    for _ in 0..10_000 {
        let z = sample_direction(32, &mut rng);
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn direction_mean_is_zero() {
    let mut rng = rng_from_seed(1);
    let (dim, n) = (4, 100_000);
    let mut mean = vec![0.0; dim];
    for _ in 0..n {
        for (m, v) in mean.iter_mut().zip(sample_direction(dim, &mut rng)) {
            *m += v / n as f64;
        }
    }
    // each coordinate of a uniform unit vector has variance 1 / dim
    let se = (1.0 / dim as f64 / n as f64).sqrt();
    assert!(mean.iter().all(|m| m.abs() < 3.0 * se), "{mean:?}");
}

#[test]
fn progress_hand_values() {
    let mut z = vec![0.0; 5];
    z[0] = 1.0;
    assert_eq!(progress_score(&[0.0; 5], &[3.0, 4.0, 0.0, 0.0, 0.0], &z), 3.0);
    assert_eq!(progress_score(&[1.0, 2.0], &[1.0, 2.0], &[0.6, 0.8]), 0.0);
    let p = progress_score(&[0.0, 0.0], &[-3.0, -4.0], &[0.6, 0.8]);
    assert!((p + 5.0).abs() < 1e-15);
}

#[test]
fn novelty_hand_values() {
    let v = vec![vec![0.0], vec![10.0]];
    assert_eq!(novelty_score(&[1.0], &v, 2), 5.0);
    assert_eq!(novelty_score(&[1.0], &v, 30), 5.0);
    assert_eq!(novelty_score(&[1.0], &[], 30), 0.0);
    let same = vec![vec![2.0, 3.0]; 4];
    assert_eq!(novelty_score(&[2.0, 3.0], &same, 4), 0.0);
}

#[test]
fn novelty_matches_sort_oracle() {
    let mut rng = rng_from_seed(2);
    for _ in 0..200 {
        let n = rng.random_range(1..80);
        let k = rng.random_range(1..40);
        let v: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut d: Vec<f64> = v
            .iter()
            .map(|p| p.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        let kk = k.min(n);
        let want = d[..kk].iter().sum::<f64>() / kk as f64;
        assert_eq!(novelty_score(&c, &v, k), want);
    }
}

#[test]
fn combined_and_selection() {
    assert_eq!(combined_score(3.0, 0.5, 2.0), 4.0);
    assert_eq!(combined_score(3.0, 0.5, 0.0), 3.0);
    let mk = |id, score| ScoredCandidate {
        id,
        progress: score,
        novelty: 0.0,
        score,
    };
    assert_eq!(select_best(&[mk(4, 1.0)]).unwrap().id, 4);
    assert_eq!(select_best(&[mk(0, 1.0), mk(7, 4.0), mk(3, 4.0)]).unwrap().id, 3);
    assert!(matches!(select_best(&[]), Err(Error::NoCandidates)));
}

#[test]
fn selection_matches_max_scan_and_shift() {
    let mut rng = rng_from_seed(3);
    for _ in 0..500 {
        let n = rng.random_range(1..12);
        let cands: Vec<ScoredCandidate> = (0..n)
            .map(|i| {
                let p = (rng.random_range(-4..4)) as f64 * 0.5;
                let nv = (rng.random_range(0..4)) as f64 * 0.25;
                ScoredCandidate {
                    id: 100 - i * 3,
                    progress: p,
                    novelty: nv,
                    score: combined_score(p, nv, 2.0),
                }
            })
            .collect();
        let mut want = cands[0];
        for c in &cands[1..] {
            if c.score > want.score || (c.score == want.score && c.id < want.id) {
                want = *c;
            }
        }
        assert_eq!(select_best(&cands).unwrap(), want);
        // shifting every progress by a constant keeps the winner
        let shifted: Vec<ScoredCandidate> = cands
            .iter()
            .map(|c| ScoredCandidate {
                score: combined_score(c.progress + 8.0, c.novelty, 2.0),
                ..*c
            })
            .collect();
        assert_eq!(select_best(&shifted).unwrap().id, want.id);
        // novelty scaled by c with beta scaled by 1 / c
        let scaled: Vec<ScoredCandidate> = cands
            .iter()
            .map(|c| ScoredCandidate {
                score: combined_score(c.progress, c.novelty * 4.0, 2.0 / 4.0),
                ..*c
            })
            .collect();
        assert_eq!(select_best(&scaled).unwrap().id, want.id);
    }
}

#[test]
fn inverse_dynamics_learns_env_labels() {
    let train = stitch_data(0, 80);
    let model = small_inverse(&train, 1500);
    let held_out = stitch_data(99, 40);
    let acc = accuracy(&model, &held_out).unwrap();
    assert!(acc >= 0.99, "accuracy {acc}");

    // recorded actions are recovered where unique
    let traj = &held_out.trajectories[0];
    let inferred = infer_actions(&model, &traj.states).unwrap();
    assert_eq!(inferred.len(), traj.len());
    for t in 0..traj.transitions() {
        if !traj.states[t].bits_eq(&traj.states[t + 1]) {
            assert_eq!(inferred[t], traj.actions[t]);
        }
    }
    let s = traj.states[0];
    assert_eq!(infer_actions(&model, &[s, s]).unwrap(), vec![ActionId::STAY, ActionId::STAY]);
}

#[test]
fn enclosed_cell_pair_is_stay() {
    // a single free cell: the only transition is (s, s)
    let spec = MazeSpec::from_ascii("#####\n#.#.#\n#####\n", 1.0).unwrap();
    let s = spec.center(spec.free_cells()[0]);
    let traj = Trajectory {
        episode_id: 0,
        states: vec![s; 10],
        actions: vec![ActionId::STAY; 10],
    };
    let d = Dataset {
        spec: spec.clone(),
        trajectories: vec![traj],
        meta: DatasetMeta::new("manual", 0),
    };
    let model = small_inverse(&d, 200);
    assert_eq!(model.predict(&[(s, s)]).unwrap(), vec![ActionId::STAY]);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let spec = crate::nn::MlpSpec::new(vec![4, 6, 9], crate::nn::Activation::Gelu).unwrap();
    let net = crate::nn::Mlp::new(spec, 3);
    let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.3).sin());
    let labels = [0, 3, 8, 3, 5];
    let (_, g) = cross_entropy_and_grad(&net, x.view(), &labels).unwrap();
    let mut probe = net.clone();
    let h = 1e-6;
    for i in 0..g.len() {
        let orig = probe.params.values[i];
        probe.params.values[i] = orig + h;
        let up = cross_entropy_and_grad(&probe, x.view(), &labels).unwrap().0;
        probe.params.values[i] = orig - h;
        let down = cross_entropy_and_grad(&probe, x.view(), &labels).unwrap().0;
        probe.params.values[i] = orig;
        let num = (up - down) / (2.0 * h);
        assert!((num - g[i]).abs() < 1e-7 + 1e-4 * num.abs(), "{i}: {num} vs {}", g[i]);
    }
}

struct Pipeline {
    data: Dataset,
    segments: SegmentSet,
    index: IvfIndex,
    phi: CoordinateEmbedding,
    stitcher: DiffusionModel,
    inverse: InverseDynamicsModel,
}

fn pipeline() -> Pipeline {
    let data = stitch_data(5, 60);
    let phi = CoordinateEmbedding { cell_size: 1.0 };
    let segments = extract_segments(&data, &phi, 8, 4).unwrap();
    let index = build_ivf(segments.start_matrix().view(), default_n_list(segments.records.len()), 0).unwrap();
    let norm = data.normalizer();
    let windows = strided_windows(&data, &norm, 8, 1, 1);
    let cfg = DiffusionTrainConfig {
        horizon: 8,
        hidden: vec![32, 32],
        time_dim: 8,
        diffusion_steps: 50,
        batch_size: 16,
        train_steps: 20,
        ..Default::default()
    };
    let mut t = DiffusionTrainer::new(windows, 2, norm, cfg).unwrap();
    t.train().unwrap();
    let stitcher = t.model();
    let inverse = small_inverse(&data, 50);
    Pipeline {
        data,
        segments,
        index,
        phi,
        stitcher,
        inverse,
    }
}

fn ctx(p: &Pipeline) -> StitchContext<'_, CoordinateEmbedding> {
    StitchContext {
        dataset: &p.data,
        segments: &p.segments,
        index: &p.index,
        phi: &p.phi,
        stitcher: &p.stitcher,
        inverse: &p.inverse,
    }
}

fn cfg(n_stitch: usize) -> StitchConfig {
    StitchConfig {
        n_stitch,
        n_traj: 3,
        h_stitcher: 8,
        ddim_steps: 5,
        resample: 2,
        ..Default::default()
    }
}

#[test]
fn zero_stitches_returns_initial_segment() {
    let p = pipeline();
    let out = run_rollout(&ctx(&p), &cfg(0), 0, 11).unwrap();
    assert_eq!(out.trajectory.len(), 8);
    let first = out.trajectory.states[0];
    let found = p.segments.records.iter().any(|r| {
        let src = &p.data.trajectories[r.traj_id].states[r.start_offset..r.start_offset + 8];
        r.start_state == first && src == &out.trajectory.states[..]
    });
    assert!(found);
    assert_eq!(out.trajectory.actions, infer_actions(&p.inverse, &out.trajectory.states).unwrap());
}

#[test]
fn rollout_growth_and_determinism() {
    let p = pipeline();
    let c = ctx(&p);
    let out = run_rollout(&c, &cfg(4), 0, 7).unwrap();
    assert_eq!(out.trajectory.len(), 8 + 4 * 7);
    assert_eq!(out.visited.len(), out.trajectory.len());
    assert_eq!(out.diagnostics.selected.len(), 4);
    assert_eq!(out.diagnostics.bridge_mse.len(), 4 * 7);
    for s in &out.diagnostics.scored {
        assert_eq!(s.score, combined_score(s.progress, s.novelty, 2.0));
    }
    for s in &out.trajectory.states {
        let cell = p.data.spec.free_cell_of(s).unwrap();
        assert!(p.data.spec.center(cell).bits_eq(s));
    }
    let again = run_rollout(&c, &cfg(4), 0, 7).unwrap();
    assert_eq!(again, out);

    let (d, report) = augment_dataset(&c, &cfg(2), Map::new()).unwrap();
    assert_eq!(d.trajectories.len(), 3);
    assert_eq!(d.num_states(), 3 * (8 + 2 * 7));
    assert_eq!(report.rollouts.len(), 3);
    d.validate().unwrap();
    let (d2, _) = augment_dataset(&c, &cfg(2), Map::new()).unwrap();
    assert_eq!(d, d2);
}

#[test]
fn untrained_stitcher_is_rejected() {
    let mut p = pipeline();
    p.stitcher.noise.trained_steps = 0;
    assert!(matches!(run_rollout(&ctx(&p), &cfg(1), 0, 0), Err(Error::Untrained(_))));
}
