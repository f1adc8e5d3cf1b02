use trajstitch::embedding::{rank_quality, EmbedTrainConfig, EmbeddingTrainer};
use trajstitch::maze::{generate_stitch_dataset, MazeSpec, StitchParams};
use trajstitch::seed::rng_from_seed;

#[test]
fn smoothed_td_loss_decreases_on_open_maze() {
    let spec = MazeSpec::open(5, 5).unwrap();
    let data = generate_stitch_dataset(
        &spec,
        StitchParams {
            n_episodes: 200,
            ep_len: 100,
            ..Default::default()
        },
    )
    .unwrap();
    let cfg = EmbedTrainConfig {
        hidden: vec![64, 64],
        latent_dim: 16,
        batch_size: 128,
        train_steps: 1000,
        log_every: 1,
        ..Default::default()
    };
    let mut trainer = EmbeddingTrainer::new(&data, cfg).unwrap();
    let before = rank_quality(&trainer.model(), &spec, 300, &mut rng_from_seed(1)).unwrap();
    trainer.train(&data).unwrap();
    let losses: Vec<f64> = trainer.losses.iter().map(|l| l.1).collect();
    assert_eq!(losses.len(), 1000);
    let smoothed: Vec<f64> = losses.chunks(100).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in smoothed.windows(2) {
        assert!(pair[1] < pair[0], "smoothed losses {smoothed:?}");
    }
    let after = rank_quality(&trainer.model(), &spec, 300, &mut rng_from_seed(1)).unwrap();
    assert!(after > before, "rho {before} -> {after}");
}
