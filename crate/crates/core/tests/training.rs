use std::path::Path;

use uwgan::checkpoint;
use uwgan::datasets::{build_dataset, load_dataset, load_real_pool, procedural, DatasetConfig};
use uwgan::tensor::Tensor;
use uwgan::training::{
    prepare_real_pool, read_loss_log, train_loop, TrainConfig, TrainState, TrainingPair,
};

fn toy_data(root: &Path, size: usize) -> (Vec<TrainingPair>, Vec<(String, Tensor<f32>)>) {
    procedural::write_corpus(&root.join("corpus"), 4, 40, 48, 1).unwrap();
    procedural::write_real_pool(&root.join("real"), 4, 40, 48, 2).unwrap();
    let cfg = DatasetConfig {
        count: 4,
        seed: 7,
        train_resolution: [size, size],
        ..Default::default()
    };
    build_dataset(&cfg, &root.join("corpus"), &root.join("data")).unwrap();
    let (_, quads) = load_dataset(&root.join("data/manifest.json")).unwrap();
    let pairs = quads
        .iter()
        .map(|(r, q)| TrainingPair::from_quad(&r.id, q))
        .collect();
    let pool = load_real_pool(&root.join("real"), None).unwrap();
    (pairs, prepare_real_pool(&pool, (size, size)))
}

#[test]
fn pixel_loss_falls_steadily_on_a_tiny_set() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, real) = toy_data(dir.path(), 16);
    let cfg = TrainConfig {
        steps: 200,
        checkpoint_every: 0,
        preview_count: 0,
        ..Default::default()
    };
    let summary = train_loop(
        &cfg,
        &pairs,
        &real,
        TrainState::new(&cfg).unwrap(),
        &dir.path().join("run"),
    )
    .unwrap();
    let log = read_loss_log(&summary.loss_log).unwrap();
    assert_eq!(log.len(), 200);
    let windows: Vec<f64> = log
        .chunks(20)
        .map(|w| w.iter().map(|r| r.l_g.unwrap()).sum::<f64>() / w.len() as f64)
        .collect();
    for pair in windows.windows(2) {
        assert!(pair[1] < pair[0], "window means {windows:?}");
    }
    assert!(log.iter().all(|r| r.total.is_finite()));
}

#[test]
fn zero_epochs_checkpoint_the_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, real) = toy_data(dir.path(), 16);
    let cfg = TrainConfig {
        epochs: Some(0),
        preview_count: 0,
        seed: 11,
        ..Default::default()
    };
    let summary = train_loop(
        &cfg,
        &pairs,
        &real,
        TrainState::new(&cfg).unwrap(),
        &dir.path().join("run"),
    )
    .unwrap();
    assert_eq!(summary.steps, 0);
    assert!(summary.last.is_none());
    let (state, saved) = checkpoint::load_state(&summary.final_checkpoint).unwrap();
    let fresh = TrainState::new(&cfg).unwrap();
    assert_eq!(state.step, 0);
    assert!(state.generator.params() == fresh.generator.params());
    assert!(state.d_g.params() == fresh.d_g.params() && state.d_p.params() == fresh.d_p.params());
    assert_eq!(saved, Some(cfg));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, real) = toy_data(dir.path(), 16);
    let cfg = TrainConfig {
        epochs: Some(3),
        checkpoint_every: 5,
        preview_count: 2,
        ..Default::default()
    };
    let full = dir.path().join("full");
    train_loop(&cfg, &pairs, &real, TrainState::new(&cfg).unwrap(), &full).unwrap();
    let resumed = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    std::fs::copy(full.join("losses.jsonl"), resumed.join("losses.jsonl")).unwrap();
    let (state, saved) =
        checkpoint::load_state(&full.join("checkpoints/step_0000005.ckpt")).unwrap();
    let summary = train_loop(&saved.unwrap(), &pairs, &real, state, &resumed).unwrap();
    assert_eq!(summary.steps, 12);
    for f in ["losses.jsonl", "final.ckpt"] {
        assert!(
            std::fs::read(full.join(f)).unwrap() == std::fs::read(resumed.join(f)).unwrap(),
            "{f} differs"
        );
    }
}
