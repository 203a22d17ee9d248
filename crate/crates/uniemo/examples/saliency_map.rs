//! Export a gradient-weighted class-activation heatmap from a fine-tuned
//! classifier: pretrain briefly, fine-tune a two-way head, then overlay
//! the saliency for the predicted class of one sample onto its image.
//!
//! Run with `cargo run --release --example saliency_map`. The blended
//! overlay is written to `target/examples/saliency_map/saliency.png`.

use std::path::PathBuf;
use uniemo::config::Config;
use uniemo::data::{samples_from_synth, synth_pretrain_set, synth_twoclass_set};
use uniemo::eval::{export_heatmap, load_classifier, saliency_from_checkpoint};
use uniemo::train::{predict, run_finetune, run_pretrain};

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
    config.val_fraction = 0.0;
    config.validate()?;

    let scenes = samples_from_synth(&synth_pretrain_set(12, 16, 7)?)?;
    let pretrained = run_pretrain(&config, &scenes, None, None)?;
    let labeled = samples_from_synth(&synth_twoclass_set(24, 16, 9)?)?;
    let finetuned = run_finetune(&config, &pretrained.checkpoint, &labeled, None)?;
    println!("classifier train accuracy: {:.4}", finetuned.train_accuracy);

    // Target the class the classifier actually predicts for this sample.
    let sample = &labeled[0];
    let (cfg, backbone, params) = load_classifier(&finetuned.checkpoint)?;
    let batch = sample.pixels.clone().insert_axis(ndarray::Axis(0));
    let target = predict(&backbone, &params, cfg.precision, &batch)?[0];
    println!(
        "sample 0: true label {:?}, predicted class {target}",
        sample.label
    );

    let heat = saliency_from_checkpoint(&finetuned.checkpoint, &sample.pixels, target)?;
    let (mut max, mut argmax) = (f64::NEG_INFINITY, (0, 0));
    for r in 0..heat.shape()[0] {
        for c in 0..heat.shape()[1] {
            if heat[[r, c]] > max {
                max = heat[[r, c]];
                argmax = (r, c);
            }
        }
    }
    println!("heatmap peak {max:.3} at pixel {argmax:?}");

    let out = PathBuf::from("target/examples/saliency_map");
    std::fs::create_dir_all(&out).expect("create output directory");
    let path = out.join("saliency.png");
    export_heatmap(&heat, &sample.pixels, &path)?;
    println!("overlay written to {}", path.display());
    Ok(())
}
