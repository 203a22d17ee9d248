//! Transfer a pretrained encoder to a two-class recognition task: a short
//! pretraining run, then fine-tuning with mixup and soft targets, then a
//! full evaluation with a confusion matrix.
//!
//! Run with `cargo run --release --example finetune_transfer`.

use std::path::PathBuf;
use uniemo::config::Config;
use uniemo::data::{samples_from_synth, synth_pretrain_set, synth_twoclass_set};
use uniemo::eval::evaluate_split;
use uniemo::train::{run_finetune, run_pretrain};

fn main() -> uniemo::Result<()> {
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
    config.optim.total_steps = 20;
    config.optim.warmup_steps = 2;
    config.num_classes = 2;
    config.ft_total_steps = 60;
    config.ft_warmup_steps = 5;
    config.ft_batch_size = 8;
    config.val_fraction = 0.25;
    config.validate()?;

    // Stage 1: pretraining provides the encoder initialization.
    let scenes = samples_from_synth(&synth_pretrain_set(12, config.backbone.image_size, 7)?)?;
    println!("stage 1: pretraining {} steps...", config.optim.total_steps);
    let pretrained = run_pretrain(&config, &scenes, None, None)?;

    // Stage 2: only `encoder.*` weights transfer; a fresh two-way head is
    // trained with mixup-weighted soft-target cross entropy.
    let items = synth_twoclass_set(24, config.backbone.image_size, 9)?;
    let labeled = samples_from_synth(&items)?;
    println!("stage 2: fine-tuning {} steps...", config.ft_total_steps);
    let out = PathBuf::from("target/examples/finetune_transfer");
    std::fs::create_dir_all(&out).expect("create output directory");
    let finetuned = run_finetune(&config, &pretrained.checkpoint, &labeled, Some(&out))?;

    println!("train accuracy: {:.4}", finetuned.train_accuracy);
    match finetuned.val_accuracy {
        Some(acc) => println!("held-out accuracy: {acc:.4}"),
        None => println!("held-out accuracy: (no validation split)"),
    }

    // Stage 3: evaluate the classifier over the full labeled set.
    let report = {
        let (config, backbone, params) =
            uniemo::eval::load_classifier(&finetuned.checkpoint)?;
        evaluate_split(&backbone, &params, config.precision, &labeled, 8)?
    };
    println!("full-set accuracy: {:.4}", report.accuracy);
    println!("per-class accuracy: {:?}", report.per_class);
    println!("confusion matrix (rows = true class, columns = predicted):");
    for row in &report.confusion {
        println!("  {row:?}");
    }
    println!("artifacts: {}", out.display());
    Ok(())
}
