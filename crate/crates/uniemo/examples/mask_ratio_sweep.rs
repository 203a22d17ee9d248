//! Sweep the masking ratio across the full pipeline: for each ratio,
//! pretrain, fine-tune, and evaluate, then compare final pretraining loss
//! and downstream accuracy side by side.
//!
//! Run with `cargo run --release --example mask_ratio_sweep`.

use uniemo::config::Config;
use uniemo::data::{samples_from_synth, synth_pretrain_set, synth_twoclass_set};
use uniemo::eval::evaluate_checkpoint;
use uniemo::train::{run_finetune, run_pretrain};

fn main() -> uniemo::Result<()> {
    let mut base = Config::default();
    base.backbone.image_size = 16;
    base.backbone.patch = 4;
    base.backbone.encoder_width = 32;
    base.backbone.encoder_depth = 1;
    base.backbone.encoder_heads = 2;
    base.backbone.decoder_width = 16;
    base.backbone.decoder_depth = 1;
    base.backbone.cls_proj_dim = 16;
    base.fusion_kappa = 2;
    base.batch_size = 8;
    base.optim.total_steps = 30;
    base.optim.warmup_steps = 3;
    base.num_classes = 2;
    base.ft_total_steps = 60;
    base.ft_warmup_steps = 5;
    base.ft_batch_size = 8;
    base.val_fraction = 0.0;

    let scenes = samples_from_synth(&synth_pretrain_set(12, 16, 7)?)?;
    let labeled = samples_from_synth(&synth_twoclass_set(24, 16, 9)?)?;

    println!("{:>6} {:>12} {:>10}", "ratio", "final lt", "accuracy");
    for ratio in [0.25, 0.5, 0.75] {
        let mut config = base.clone();
        config.backbone.mask_ratio = ratio;
        config.validate()?;

        let pretrained = run_pretrain(&config, &scenes, None, None)?;
        let lt = pretrained.reports.last().expect("steps ran").lt;
        let finetuned = run_finetune(&config, &pretrained.checkpoint, &labeled, None)?;
        let report = evaluate_checkpoint(&finetuned.checkpoint, &labeled)?;
        println!("{ratio:>6} {lt:>12.4} {:>10.4}", report.accuracy);
    }
    Ok(())
}
