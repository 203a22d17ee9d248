//! Pretraining: the dual-stream step (masked scene reconstruction plus
//! fused-feature distillation against a frozen teacher) and the run loop
//! with scheduling, metrics, and checkpointing.

use crate::autograd::Graph;
use crate::backbone::{patchify, Backbone, MaskPlan};
use crate::config::{Config, TeacherKind};
use crate::data::{stack_samples, ImageSample};
use crate::distill::{
    correlation_matrix, feature_similarity_loss, row_normalize, similarity_contrastive_loss,
    StubTeacher, Teacher,
};
use crate::fusion::Fusion;
use crate::objectives::{
    masked_reconstruction_loss, normalize_target_patches, total_pretrain_loss, LossReport,
};
use crate::params::ParamStore;
use crate::train::checkpoint::{save_checkpoint, Checkpoint};
use crate::train::optim::{schedule_lr, AdamW};
use crate::{rng, Error, Result};
use indexmap::IndexMap;
use std::io::Write;
use std::path::Path;

/// Instantiate the configured teacher. The stub needs no external files;
/// the external adapter is a deliberate extension point.
pub fn build_teacher(config: &Config) -> Result<Box<dyn Teacher>> {
    match config.teacher_kind {
        TeacherKind::Stub => Ok(Box::new(StubTeacher::new(
            config.teacher_seed,
            config.backbone.cls_proj_dim,
        )?)),
        TeacherKind::External => Err(Error::invalid(
            "teacher.kind = external requires an adapter with its own weight files; \
             use teacher.kind = stub",
        )),
    }
}

/// Initialize all pretraining parameters (backbone plus fusion) from the
/// config seed. Insertion order is part of the determinism contract.
pub fn init_pretrain_params(config: &Config) -> Result<(Backbone, Fusion, ParamStore)> {
    let backbone = Backbone::new(config.backbone.clone())?;
    let fusion = Fusion::new(
        config.fusion_strategy,
        config.fusion_kappa,
        config.backbone.cls_proj_dim,
    )?;
    let mut store = ParamStore::new();
    let mut init_rng = rng::derive(config.seed, "init");
    backbone.init_params(&mut store, &mut init_rng);
    fusion.init_params(&mut store, &mut init_rng);
    Ok((backbone, fusion, store))
}

/// One pretraining step.
///
/// Scene stream: patchify → embed + positions → random mask → encode →
/// decode → reconstruction loss over masked patches. Person stream:
/// patchify → embed → encode unmasked. The two CLS embeddings fuse into
/// Υ, which is row-normalized and compared against the teacher's text
/// and image features through the correlation (L2) and feature-similarity
/// (L3) losses. One optimizer update covers every learnable parameter.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    config: &Config,
    backbone: &Backbone,
    fusion: &Fusion,
    params: &mut ParamStore,
    optimizer: &mut AdamW,
    teacher: &dyn Teacher,
    batch: &[ImageSample],
    step: u64,
    step_seed: u64,
    lr: f64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::invalid("pretrain step needs a non-empty batch"));
    }
    let (pixels, person, captions, _labels) = stack_samples(batch)?;
    if teacher.width() != config.backbone.cls_proj_dim {
        return Err(Error::invalid(format!(
            "teacher width {} does not match the projection width {}",
            teacher.width(),
            config.backbone.cls_proj_dim
        )));
    }

    // Teacher features are plain data: they enter the tape as constants,
    // so no gradient can reach the teacher by construction.
    let text_features = teacher.encode_text(&captions)?;
    let image_features = teacher.encode_image(&pixels)?;

    let mut g = Graph::new(config.precision);
    let bound = params.bind(&mut g);

    // Scene stream: masked reconstruction.
    let scene_patches = patchify(&pixels, config.backbone.patch)?;
    let plan = MaskPlan::from_seed(
        backbone.cfg.num_patches(),
        config.backbone.mask_ratio,
        step_seed,
    )?;
    let scene_const = g.constant(scene_patches.clone());
    let scene_tokens = backbone.embed_patches(&mut g, &bound, scene_const)?;
    let kept = backbone.apply_mask(&mut g, scene_tokens, &plan)?;
    let encoded = backbone.encode(&mut g, &bound, kept, true)?;
    let alpha = encoded.cls_embedding;
    let reconstructed = backbone.decode(&mut g, &bound, encoded.tokens, &plan)?;
    let target = if config.norm_pix {
        normalize_target_patches(&scene_patches)
    } else {
        scene_patches
    };
    let target_const = g.constant(target);
    let l1 = masked_reconstruction_loss(&mut g, reconstructed, target_const, &plan)?;

    // Person stream: unmasked encoding of the person-focused view.
    let person_patches = patchify(&person, config.backbone.patch)?;
    let person_const = g.constant(person_patches);
    let person_tokens = backbone.embed_patches(&mut g, &bound, person_const)?;
    let person_encoded = backbone.encode(&mut g, &bound, person_tokens, true)?;
    let beta = person_encoded.cls_embedding;

    // Fusion and the two distillation losses.
    let upsilon = fusion.fuse(&mut g, &bound, alpha, beta)?;
    let upsilon_n = row_normalize(&mut g, upsilon, config.norm_floor)?;
    let text_const = g.constant(text_features);
    let text_n = row_normalize(&mut g, text_const, config.norm_floor)?;
    let image_const = g.constant(image_features);
    let image_n = row_normalize(&mut g, image_const, config.norm_floor)?;
    let a = correlation_matrix(&mut g, upsilon_n, text_n, config.norm_floor)?;
    let c = correlation_matrix(&mut g, image_n, text_n, config.norm_floor)?;
    let l2 = similarity_contrastive_loss(&mut g, a, c)?;
    let l3 = feature_similarity_loss(&mut g, upsilon_n, image_n)?;

    let weights = (config.loss_w1, config.loss_w2, config.loss_w3);
    let lt = total_pretrain_loss(&mut g, l1, l2, l3, weights);

    let report = LossReport {
        step,
        l1: g.scalar_value(l1),
        l2: g.scalar_value(l2),
        l3: g.scalar_value(l3),
        lt: g.scalar_value(lt),
    };
    if !report.lt.is_finite() {
        return Err(Error::invalid(format!(
            "non-finite loss {} at step {step}",
            report.lt
        )));
    }

    let grads = g.backward(lt);
    let mut grad_map = IndexMap::new();
    for (name, &var) in bound.iter() {
        if let Some(grad) = grads.get(var) {
            grad_map.insert(name.clone(), grad.clone());
        }
    }
    optimizer.update(params, &grad_map, lr);
    Ok(report)
}

/// A finished (or checkpointed) pretraining run.
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub reports: Vec<LossReport>,
}

fn select_batch(
    samples: &[ImageSample],
    batch_size: usize,
    generator: &mut rand_chacha::ChaCha8Rng,
) -> Vec<ImageSample> {
    if samples.len() <= batch_size {
        return samples.to_vec();
    }
    rand::seq::index::sample(generator, samples.len(), batch_size)
        .into_iter()
        .map(|i| samples[i].clone())
        .collect()
}

/// Run (or resume) pretraining for `optim.total_steps` steps.
///
/// Reports stream to `metrics.csv` under `out_dir` as headerless
/// `step,l1,l2,l3,lt` rows — one per executed step — and checkpoints are
/// written every `train.checkpoint_every` steps plus once at the end.
/// Resuming restores parameters, optimizer moments, the step counter, and
/// the training generator, so a split run reproduces a straight run
/// bitwise in double precision.
pub fn run_pretrain(
    config: &Config,
    samples: &[ImageSample],
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("pretraining needs at least one sample"));
    }
    let teacher = build_teacher(config)?;
    let backbone = Backbone::new(config.backbone.clone())?;
    let fusion = Fusion::new(
        config.fusion_strategy,
        config.fusion_kappa,
        config.backbone.cls_proj_dim,
    )?;
    let mut optimizer = AdamW::new(
        config.optim.beta1,
        config.optim.beta2,
        config.optim.weight_decay,
    );
    let (mut params, mut train_rng, start_step) = match resume {
        Some(checkpoint) => {
            checkpoint.restore_moments(&mut optimizer);
            (
                checkpoint.params(),
                rng::restore(&checkpoint.rng),
                checkpoint.step,
            )
        }
        None => {
            let (_, _, store) = init_pretrain_params(config)?;
            (store, rng::derive(config.seed, "train"), 0)
        }
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let mut metrics = match out_dir {
        Some(dir) => {
            let path = dir.join("metrics.csv");
            Some(std::fs::File::create(&path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?)
        }
        None => None,
    };

    let mut reports = Vec::new();
    let total = config.optim.total_steps as u64;
    for step in start_step..total {
        let batch = select_batch(samples, config.batch_size, &mut train_rng);
        let step_seed = rng::next_seed(&mut train_rng);
        let lr = schedule_lr(
            config.optim.schedule,
            config.optim.base_lr,
            config.optim.warmup_steps,
            config.optim.total_steps,
            step,
        );
        let report = pretrain_step(
            config,
            &backbone,
            &fusion,
            &mut params,
            &mut optimizer,
            teacher.as_ref(),
            &batch,
            step + 1,
            step_seed,
            lr,
        )?;
        if let Some(file) = metrics.as_mut() {
            writeln!(
                file,
                "{},{:?},{:?},{:?},{:?}",
                report.step, report.l1, report.l2, report.l3, report.lt
            )
            .map_err(|source| Error::Io {
                path: out_dir.unwrap().join("metrics.csv"),
                source,
            })?;
        }
        reports.push(report);
        let done = step + 1;
        if config.checkpoint_every > 0
            && done % config.checkpoint_every as u64 == 0
            && done < total
        {
            if let Some(dir) = out_dir {
                let checkpoint = Checkpoint::from_state(
                    config.to_text(),
                    done,
                    rng::capture(&train_rng),
                    &params,
                    &optimizer,
                );
                save_checkpoint(&checkpoint, &dir.join(format!("step{done:06}.ckpt")))?;
            }
        }
    }

    let checkpoint = Checkpoint::from_state(
        config.to_text(),
        total,
        rng::capture(&train_rng),
        &params,
        &optimizer,
    );
    if let Some(dir) = out_dir {
        save_checkpoint(&checkpoint, &dir.join("pretrain.ckpt"))?;
    }
    Ok(PretrainOutcome {
        checkpoint,
        reports,
    })
}
