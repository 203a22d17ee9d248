//! Demonstrate bitwise-deterministic checkpointing: a pretraining run
//! split across a save/restore boundary reproduces the straight run's
//! losses and final parameters exactly (in double precision).
//!
//! Run with `cargo run --release --example resume_split_run`.

use std::path::PathBuf;
use uniemo::config::Config;
use uniemo::data::{samples_from_synth, synth_pretrain_set};
use uniemo::train::{load_checkpoint, run_pretrain};

fn main() -> uniemo::Result<()> {
    let mut config = Config::default();
    config.backbone.image_size = 16;
    config.backbone.patch = 4;
    config.backbone.encoder_width = 16;
    config.backbone.encoder_depth = 1;
    config.backbone.encoder_heads = 2;
    config.backbone.decoder_width = 8;
    config.backbone.decoder_depth = 1;
    config.backbone.cls_proj_dim = 8;
    config.fusion_kappa = 2;
    config.batch_size = 4;
    config.optim.total_steps = 20;
    config.optim.warmup_steps = 2;
    config.checkpoint_every = 10;
    config.validate()?;

    let samples = samples_from_synth(&synth_pretrain_set(8, 16, 3)?)?;
    let out = PathBuf::from("target/examples/resume_split_run");
    std::fs::create_dir_all(&out).expect("create output directory");

    // Straight run: 20 steps in one go, checkpointing every 10.
    let straight = run_pretrain(&config, &samples, Some(&out), None)?;

    // Split run: load the step-10 checkpoint and finish from there.
    let midpoint = load_checkpoint(&out.join("step000010.ckpt"))?;
    println!("resuming from step {}", midpoint.step);
    let resumed = run_pretrain(&config, &samples, None, Some(&midpoint))?;

    println!(
        "{:>6} {:>14} {:>14}",
        "step", "straight lt", "resumed lt"
    );
    for (s, r) in straight.reports[10..].iter().zip(&resumed.reports) {
        assert_eq!(s.step, r.step);
        println!("{:>6} {:>14.8} {:>14.8}", s.step, s.lt, r.lt);
        assert_eq!(s.lt.to_bits(), r.lt.to_bits(), "losses must match bitwise");
    }
    assert_eq!(
        straight.checkpoint, resumed.checkpoint,
        "final states must be identical"
    );
    println!("split run matches the straight run bitwise");
    Ok(())
}
