//! Overfits a handful of procedural quads and reports the PSNR gain.
//!
//! `cargo run --release --example toy_overfit -- [steps] [size] [out_dir]`

use std::path::PathBuf;

use uwgan::datasets::{build_dataset, load_dataset, load_real_pool, procedural, DatasetConfig};
use uwgan::metrics::mse_psnr;
use uwgan::training::{prepare_real_pool, train_loop, TrainConfig, TrainState, TrainingPair};

fn main() -> uwgan::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map_or(2000, |s| s.parse().expect("steps"));
    let size: usize = args.get(2).map_or(32, |s| s.parse().expect("size"));
    let root = args
        .get(3)
        .map_or_else(|| std::env::temp_dir().join("uwgan-toy"), PathBuf::from);

    procedural::write_corpus(&root.join("corpus"), 4, 48, 64, 1)?;
    procedural::write_real_pool(&root.join("real"), 4, 48, 64, 2)?;
    let cfg = DatasetConfig {
        count: 4,
        seed: 7,
        train_resolution: [size, size],
        ..Default::default()
    };
    build_dataset(&cfg, &root.join("corpus"), &root.join("data"))?;
    let (_, quads) = load_dataset(&root.join("data/manifest.json"))?;
    let pairs: Vec<TrainingPair> = quads
        .iter()
        .map(|(r, q)| TrainingPair::from_quad(&r.id, q))
        .collect();
    let real = prepare_real_pool(&load_real_pool(&root.join("real"), None)?, (size, size));

    let train = TrainConfig {
        steps,
        checkpoint_every: 0,
        ..Default::default()
    };
    let start = std::time::Instant::now();
    let summary = train_loop(
        &train,
        &pairs,
        &real,
        TrainState::new(&train)?,
        &root.join("run"),
    )?;
    let (mut raw, mut enhanced) = (0.0, 0.0);
    for (_, q) in &quads {
        raw += mse_psnr(&q.underwater.clipped(), &q.ground_truth)?.1;
        enhanced += mse_psnr(
            &summary.state.generator.enhance(&q.underwater)?,
            &q.ground_truth,
        )?
        .1;
    }
    let n = quads.len() as f64;
    println!(
        "steps {steps} size {size}: raw {:.2} dB, enhanced {:.2} dB, gain {:.2} dB in {:.0?}",
        raw / n,
        enhanced / n,
        (enhanced - raw) / n,
        start.elapsed()
    );
    Ok(())
}
