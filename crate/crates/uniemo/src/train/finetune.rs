//! Fine-tuning: transfer the pretrained encoder, attach a fresh linear
//! classification head over pooled patch tokens, and train with mixup and
//! soft-target cross entropy.

use crate::autograd::{Array, Graph, Var};
use crate::backbone::{patchify, Backbone};
use crate::config::Config;
use crate::data::{mixup_batch, stack_samples, ImageSample};
use crate::objectives::{
    accuracy, argmax_rows, mixup_cross_entropy, soft_target_cross_entropy, FinetuneReport,
};
use crate::params::{self, BoundParams, ParamStore};
use crate::train::checkpoint::{save_checkpoint, Checkpoint};
use crate::train::optim::{schedule_lr, AdamW};
use crate::{rng, Error, Result};
use indexmap::IndexMap;
use std::io::Write;
use std::path::Path;

/// Handles into the classifier forward pass, kept for saliency: the last
/// block's patch tokens (CLS dropped) and the head logits.
pub struct ClassifierTrace {
    /// `[N, δ1, C2]` activations feeding the pooled head.
    pub patch_tokens: Var,
    /// `[N, num_classes]` head outputs.
    pub logits: Var,
}

/// Register the fresh classification head: `head.weight` `[C2, d]` and
/// `head.bias` `[d]`.
pub fn init_head_params(
    store: &mut ParamStore,
    encoder_width: usize,
    num_classes: usize,
    generator: &mut rand_chacha::ChaCha8Rng,
) {
    store.insert(
        "head.weight",
        params::gaussian(generator, &[encoder_width, num_classes], 0.02),
    );
    store.insert("head.bias", params::zeros(&[num_classes]));
}

/// Classifier forward pass: embed patches, run the encoder with its CLS
/// token, drop the CLS row, average the patch tokens, normalize, and apply
/// the linear head.
pub fn classifier_forward(
    g: &mut Graph,
    bound: &BoundParams,
    backbone: &Backbone,
    pixels: &Array,
) -> Result<ClassifierTrace> {
    let patches = patchify(pixels, backbone.cfg.patch)?;
    let patches_const = g.constant(patches);
    let tokens = backbone.embed_patches(g, bound, patches_const)?;
    let encoded = backbone.encode_tokens(g, bound, tokens, true)?;
    let delta1 = backbone.cfg.num_patches();
    let patch_rows: Vec<usize> = (1..=delta1).collect();
    let patch_tokens = g.select(encoded, 1, &patch_rows);
    let pooled = g.mean_axis(patch_tokens, 1, false);
    let gamma = bound.var("encoder.norm.gamma");
    let beta = bound.var("encoder.norm.beta");
    let normed = g.layer_norm(pooled, gamma, beta, crate::backbone::LN_EPS);
    let w = bound.var("head.weight");
    let b = bound.var("head.bias");
    let logits = g.affine(normed, w, b);
    Ok(ClassifierTrace {
        patch_tokens,
        logits,
    })
}

/// Predicted class ids for a pixel batch under the given parameters.
pub fn predict(
    backbone: &Backbone,
    params: &ParamStore,
    precision: crate::autograd::Precision,
    pixels: &Array,
) -> Result<Vec<usize>> {
    let mut g = Graph::new(precision);
    let bound = params.bind(&mut g);
    let trace = classifier_forward(&mut g, &bound, backbone, pixels)?;
    Ok(argmax_rows(g.value(trace.logits)))
}

/// A finished fine-tuning run.
#[derive(Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub reports: Vec<FinetuneReport>,
    /// Accuracy over the training portion after the last step.
    pub train_accuracy: f64,
    /// Accuracy over the held-out portion (absent when
    /// `finetune.val_fraction` rounds to zero samples).
    pub val_accuracy: Option<f64>,
}

fn batch_accuracy(
    backbone: &Backbone,
    params: &ParamStore,
    precision: crate::autograd::Precision,
    samples: &[ImageSample],
    labels: &[usize],
    chunk: usize,
) -> Result<f64> {
    let mut predictions = Vec::with_capacity(samples.len());
    for group in samples.chunks(chunk.max(1)) {
        let (pixels, _, _, _) = stack_samples(group)?;
        predictions.extend(predict(backbone, params, precision, &pixels)?);
    }
    accuracy(&predictions, labels)
}

/// Fine-tune from a pretraining checkpoint.
///
/// Exactly the `encoder.*` parameter set transfers; decoder, fusion, and
/// projection weights are discarded. A fresh `num_classes`-way head trains
/// with mixup (when `finetune.mixup_alpha > 0`) and soft-target cross
/// entropy; with `finetune.freeze_encoder` only the head updates. Reports
/// stream to `finetune.csv` as headerless `step,lf,acc` rows, where `acc`
/// is the step's clean-batch accuracy.
pub fn run_finetune(
    config: &Config,
    pretrained: &Checkpoint,
    samples: &[ImageSample],
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    let d = config.num_classes;
    let mut labels = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        match sample.label {
            Some(label) if label < d => labels.push(label),
            Some(label) => {
                return Err(Error::invalid(format!(
                    "label {label} at sample {i} does not fit the {d}-way head"
                )))
            }
            None => return Err(Error::invalid(format!("sample {i} has no label"))),
        }
    }
    if samples.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one sample"));
    }

    let backbone = Backbone::new(config.backbone.clone())?;
    let mut params = pretrained.params().filter_prefixes(&["encoder."]);
    if params.is_empty() {
        return Err(Error::invalid("checkpoint has no encoder parameters"));
    }
    let mut init_rng = rng::derive(config.seed, "finetune.init");
    init_head_params(
        &mut params,
        config.backbone.encoder_width,
        d,
        &mut init_rng,
    );

    // Held-out split for reporting: a seeded shuffle, first vf·n samples.
    let mut split_rng = rng::derive(config.seed, "finetune.split");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut split_rng);
    let n_val = (config.val_fraction * samples.len() as f64).round() as usize;
    let val_idx: Vec<usize> = order[..n_val].to_vec();
    let train_idx: Vec<usize> = order[n_val..].to_vec();
    if train_idx.is_empty() {
        return Err(Error::invalid(
            "held-out fraction leaves no training samples",
        ));
    }
    let train_samples: Vec<ImageSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let val_samples: Vec<ImageSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut optimizer = AdamW::new(config.ft_beta1, config.ft_beta2, config.ft_weight_decay);
    let mut train_rng = rng::derive(config.seed, "finetune.train");

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let mut metrics = match out_dir {
        Some(dir) => {
            let path = dir.join("finetune.csv");
            Some(std::fs::File::create(&path).map_err(|source| Error::Io {
                path,
                source,
            })?)
        }
        None => None,
    };

    let mut reports = Vec::new();
    for step in 0..config.ft_total_steps as u64 {
        // Batch selection.
        let (batch, batch_labels): (Vec<ImageSample>, Vec<usize>) =
            if train_samples.len() <= config.ft_batch_size {
                (train_samples.clone(), train_labels.clone())
            } else {
                let picks = rand::seq::index::sample(
                    &mut train_rng,
                    train_samples.len(),
                    config.ft_batch_size,
                );
                picks
                    .into_iter()
                    .map(|i| (train_samples[i].clone(), train_labels[i]))
                    .unzip()
            };
        let (pixels, _, _, _) = stack_samples(&batch)?;

        let mut g = Graph::new(config.precision);
        let bound = params.bind(&mut g);
        // Clean forward for the step's reported accuracy.
        let clean = classifier_forward(&mut g, &bound, &backbone, &pixels)?;
        let predictions = argmax_rows(g.value(clean.logits));
        let acc = accuracy(&predictions, &batch_labels)?;

        let use_mixup = config.mixup_alpha > 0.0 && batch.len() >= 2;
        let loss = if use_mixup {
            let (mixed, y_a, y_b, lambda) =
                mixup_batch(&pixels, &batch_labels, config.mixup_alpha, &mut train_rng)?;
            let mixed_trace = classifier_forward(&mut g, &bound, &backbone, &mixed)?;
            mixup_cross_entropy(&mut g, mixed_trace.logits, &y_a, &y_b, lambda)?
        } else {
            soft_target_cross_entropy(&mut g, clean.logits, &batch_labels)?
        };
        let lf = g.scalar_value(loss);
        if !lf.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite loss {lf} at step {}",
                step + 1
            )));
        }

        let grads = g.backward(loss);
        let mut grad_map = IndexMap::new();
        for (name, &var) in bound.iter() {
            if config.freeze_encoder && !name.starts_with("head.") {
                continue;
            }
            if let Some(grad) = grads.get(var) {
                grad_map.insert(name.clone(), grad.clone());
            }
        }
        let lr = schedule_lr(
            config.optim.schedule,
            config.ft_base_lr,
            config.ft_warmup_steps,
            config.ft_total_steps,
            step,
        );
        optimizer.update(&mut params, &grad_map, lr);

        let report = FinetuneReport {
            step: step + 1,
            lf,
            acc,
        };
        if let Some(file) = metrics.as_mut() {
            writeln!(file, "{},{:?},{:?}", report.step, report.lf, report.acc).map_err(
                |source| Error::Io {
                    path: out_dir.unwrap().join("finetune.csv"),
                    source,
                },
            )?;
        }
        reports.push(report);
    }

    let train_accuracy = batch_accuracy(
        &backbone,
        &params,
        config.precision,
        &train_samples,
        &train_labels,
        config.ft_batch_size,
    )?;
    let val_accuracy = if val_samples.is_empty() {
        None
    } else {
        Some(batch_accuracy(
            &backbone,
            &params,
            config.precision,
            &val_samples,
            &val_labels,
            config.ft_batch_size,
        )?)
    };

    let checkpoint = Checkpoint::from_state(
        config.to_text(),
        config.ft_total_steps as u64,
        rng::capture(&train_rng),
        &params,
        &optimizer,
    );
    if let Some(dir) = out_dir {
        save_checkpoint(&checkpoint, &dir.join("finetune.ckpt"))?;
    }
    Ok(FinetuneOutcome {
        checkpoint,
        reports,
        train_accuracy,
        val_accuracy,
    })
}
