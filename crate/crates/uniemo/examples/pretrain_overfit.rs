//! Pretrain the dual-stream model on a small synthetic scene set and watch
//! the combined loss fall as it overfits.
//!
//! Run with `cargo run --release --example pretrain_overfit`. Artifacts
//! (checkpoint, headerless `metrics.csv` with `step,l1,l2,l3,lt` rows, and
//! a config snapshot via the CLI conventions) land in
//! `target/examples/pretrain_overfit/`.

use std::path::PathBuf;
use uniemo::config::Config;
use uniemo::data::{samples_from_synth, synth_pretrain_set};
use uniemo::train::run_pretrain;

fn main() -> uniemo::Result<()> {
    // Desk-scale knobs shrunk further so the run takes seconds: 16-pixel
    // images in 4-pixel patches, a one-block encoder, and 60 steps over
    // twelve fixed images.
    let mut config = Config::default();
    config.backbone.image_size = 16;
    config.backbone.patch = 4;
    config.backbone.encoder_width = 32;
    config.backbone.encoder_depth = 1;
    config.backbone.encoder_heads = 2;
    config.backbone.decoder_width = 16;
    config.backbone.decoder_depth = 1;
    config.backbone.cls_proj_dim = 16;
    config.fusion_kappa = 2;
    config.batch_size = 8;
    config.optim.total_steps = 60;
    config.optim.warmup_steps = 5;
    config.checkpoint_every = 30;
    config.validate()?;

    let items = synth_pretrain_set(12, config.backbone.image_size, 7)?;
    let samples = samples_from_synth(&items)?;

    let out = PathBuf::from("target/examples/pretrain_overfit");
    std::fs::create_dir_all(&out).expect("create output directory");

    println!(
        "pretraining on {} synthetic scenes for {} steps...",
        samples.len(),
        config.optim.total_steps
    );
    let outcome = run_pretrain(&config, &samples, Some(&out), None)?;

    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "step", "l1", "l2", "l3", "lt");
    for report in outcome
        .reports
        .iter()
        .step_by(10)
        .chain(outcome.reports.last())
    {
        println!(
            "{:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            report.step, report.l1, report.l2, report.l3, report.lt
        );
    }

    let first = outcome.reports.first().expect("at least one step");
    let last = outcome.reports.last().expect("at least one step");
    println!(
        "combined loss fell from {:.4} to {:.4} ({:.1}% of the start)",
        first.lt,
        last.lt,
        100.0 * last.lt / first.lt
    );
    println!("artifacts: {}", out.display());
    Ok(())
}
