//! Held-out evaluation, confusion matrices, and gradient-weighted class
//! activation maps over a fine-tuned classifier.

use crate::autograd::{Array, Graph, Precision, Var};
use crate::backbone::Backbone;
use crate::config::Config;
use crate::data::{bilinear_resize, save_image, stack_samples, ImageSample};
use crate::params::ParamStore;
use crate::train::{classifier_forward, predict, Checkpoint};
use crate::{Error, Result};
use ndarray::{Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Accuracy summary for one evaluated split.
///
/// `confusion[t][p]` counts samples with true class `t` predicted as `p`,
/// so row sums equal per-class sample counts and the trace divided by the
/// total count equals `accuracy`. A class with no samples in the split
/// reports a per-class accuracy of `0.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
}

/// Width of the stored classifier head, or an error when the parameter
/// set has no head at all.
fn head_width(params: &ParamStore) -> Result<usize> {
    let w = params.get("head.weight").ok_or_else(|| {
        Error::invalid("parameter set has no classifier head (head.weight missing); fine-tune before evaluating")
    })?;
    Ok(w.shape()[1])
}

/// Evaluate labeled samples with a fine-tuned classifier.
///
/// Predictions are the argmax over logits (ties resolve to the lowest
/// class index), computed in `batch_size` chunks with no augmentation.
pub fn evaluate_split(
    backbone: &Backbone,
    params: &ParamStore,
    precision: Precision,
    samples: &[ImageSample],
    batch_size: usize,
) -> Result<EvalReport> {
    let d = head_width(params)?;
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty sample set"));
    }
    let mut labels = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let label = sample
            .label
            .ok_or_else(|| Error::invalid(format!("sample {i} has no label")))?;
        if label >= d {
            return Err(Error::invalid(format!(
                "label {label} at sample {i} does not fit the {d}-way head"
            )));
        }
        labels.push(label);
    }
    let mut confusion = vec![vec![0u64; d]; d];
    let mut cursor = 0;
    for group in samples.chunks(batch_size.max(1)) {
        let (pixels, _, _, _) = stack_samples(group)?;
        for predicted in predict(backbone, params, precision, &pixels)? {
            confusion[labels[cursor]][predicted] += 1;
            cursor += 1;
        }
    }
    let total: u64 = samples.len() as u64;
    let trace: u64 = (0..d).map(|c| confusion[c][c]).sum();
    let per_class = (0..d)
        .map(|c| {
            let row: u64 = confusion[c].iter().sum();
            if row == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / row as f64
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: trace as f64 / total as f64,
        per_class,
        confusion,
    })
}

/// Rebuild the classifier stored in a fine-tuned checkpoint: its config,
/// the backbone it describes, and the parameter set including the head.
pub fn load_classifier(checkpoint: &Checkpoint) -> Result<(Config, Backbone, ParamStore)> {
    let mut config = Config::default();
    config.apply_text(&checkpoint.config_text)?;
    let backbone = Backbone::new(config.backbone.clone())?;
    let params = checkpoint.params();
    head_width(&params)?;
    Ok((config, backbone, params))
}

/// Evaluate labeled samples directly from a fine-tuned checkpoint.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, samples: &[ImageSample]) -> Result<EvalReport> {
    let (config, backbone, params) = load_classifier(checkpoint)?;
    evaluate_split(
        &backbone,
        &params,
        config.precision,
        samples,
        config.ft_batch_size,
    )
}

/// Gradient-weighted class activation map from a traced forward pass.
///
/// `patch_tokens` must be `[1, P, C]` with the CLS row already excluded
/// and `P` a square number; `logits` must be `[1, d]`. The target-class
/// logit is differentiated w.r.t. the patch tokens, channel weights are
/// the per-channel mean of that gradient over patches, and the per-patch
/// map is the ReLU of the weighted activation sum. The map is reshaped to
/// the patch grid, bilinearly upsampled (align-corners) to
/// `out_h`×`out_w`, and min-max normalized into `[0, 1]`; a map without
/// contrast (all patches equal, in particular all-zero) comes back
/// all-zero.
pub fn gradcam_from_trace(
    g: &mut Graph,
    patch_tokens: Var,
    logits: Var,
    target_class: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Array> {
    let lsh = g.shape(logits).to_vec();
    if lsh.len() != 2 || lsh[0] != 1 {
        return Err(Error::invalid(format!(
            "expected [1, d] logits for one image, got {lsh:?}"
        )));
    }
    if target_class >= lsh[1] {
        return Err(Error::invalid(format!(
            "target class {target_class} is out of range for the {}-way head",
            lsh[1]
        )));
    }
    let psh = g.shape(patch_tokens).to_vec();
    if psh.len() != 3 || psh[0] != 1 {
        return Err(Error::invalid(format!(
            "expected [1, P, C] patch tokens, got {psh:?}"
        )));
    }
    let (p, c) = (psh[1], psh[2]);
    let grid = (p as f64).sqrt().round() as usize;
    if grid * grid != p {
        return Err(Error::invalid(format!(
            "{p} patch tokens do not form a square grid"
        )));
    }
    let picked = g.select(logits, 1, &[target_class]);
    let root = g.sum_all(picked);
    let grads = g.backward(root);
    let act = g.value(patch_tokens);
    let zeros;
    let grad = match grads.get(patch_tokens) {
        Some(grad) => grad,
        None => {
            zeros = Array::zeros(IxDyn(&[1, p, c]));
            &zeros
        }
    };
    let mut weights = vec![0.0; c];
    for ci in 0..c {
        for pi in 0..p {
            weights[ci] += grad[[0, pi, ci]];
        }
        weights[ci] /= p as f64;
    }
    let cam: Vec<f64> = (0..p)
        .map(|pi| {
            let s: f64 = (0..c).map(|ci| weights[ci] * act[[0, pi, ci]]).sum();
            s.max(0.0)
        })
        .collect();
    let cam_grid =
        Array::from_shape_vec(IxDyn(&[grid, grid, 1]), cam).expect("cam length matches grid");
    let upsampled = bilinear_resize(&cam_grid, out_h, out_w)?;
    let mut heat = upsampled.remove_axis(Axis(2));
    let min = heat.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = heat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        heat.mapv_inplace(|v| (v - min) / (max - min));
    } else {
        heat.fill(0.0);
    }
    Ok(heat)
}

/// Saliency heatmap for one image under a fine-tuned classifier.
///
/// Runs the classifier forward pass, then applies [`gradcam_from_trace`]
/// to the last block's patch tokens. Returns an `[H, W]` array in
/// `[0, 1]` matching the input's spatial dimensions.
pub fn gradcam_heatmap(
    backbone: &Backbone,
    params: &ParamStore,
    precision: Precision,
    pixels: &Array,
    target_class: usize,
) -> Result<Array> {
    let d = head_width(params)?;
    if target_class >= d {
        return Err(Error::invalid(format!(
            "target class {target_class} is out of range for the {d}-way head"
        )));
    }
    let sh = pixels.shape().to_vec();
    let (size, channels) = (backbone.cfg.image_size, backbone.cfg.in_channels);
    if sh != [size, size, channels] {
        return Err(Error::invalid(format!(
            "expected [{size}, {size}, {channels}] pixels, got {sh:?}"
        )));
    }
    let batched = pixels.clone().insert_axis(Axis(0));
    let mut g = Graph::new(precision);
    let bound = params.bind(&mut g);
    let trace = classifier_forward(&mut g, &bound, backbone, &batched)?;
    gradcam_from_trace(
        &mut g,
        trace.patch_tokens,
        trace.logits,
        target_class,
        sh[0],
        sh[1],
    )
}

/// Saliency heatmap directly from a fine-tuned checkpoint.
pub fn saliency_from_checkpoint(
    checkpoint: &Checkpoint,
    pixels: &Array,
    target_class: usize,
) -> Result<Array> {
    let (config, backbone, params) = load_classifier(checkpoint)?;
    gradcam_heatmap(&backbone, &params, config.precision, pixels, target_class)
}

/// Black-anchored hot colormap: black → red → yellow → white.
fn hot_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (3.0 * v).min(1.0),
        (3.0 * v - 1.0).clamp(0.0, 1.0),
        (3.0 * v - 2.0).clamp(0.0, 1.0),
    ]
}

/// Colorize a heatmap and alpha-blend it onto the base image.
///
/// `heat` must be `[H, W]` in `[0, 1]` and `base` `[H, W, 3]` in
/// `[0, 1]` with matching spatial dimensions. Each pixel becomes
/// `0.5·base + 0.5·colormap(heat)` with a colormap whose zero is black,
/// so an all-zero heatmap writes exactly the half-dimmed base image. The
/// file is a lossless PNG.
pub fn export_heatmap(heat: &Array, base: &Array, path: &Path) -> Result<()> {
    let hs = heat.shape().to_vec();
    let bs = base.shape().to_vec();
    if hs.len() != 2 || bs.len() != 3 || bs[2] != 3 || hs[0] != bs[0] || hs[1] != bs[1] {
        return Err(Error::invalid(format!(
            "heatmap {hs:?} does not match base image {bs:?}"
        )));
    }
    let mut blended = Array::zeros(IxDyn(&bs));
    for h in 0..hs[0] {
        for w in 0..hs[1] {
            let color = hot_color(heat[[h, w]]);
            for c in 0..3 {
                blended[[h, w, c]] = 0.5 * base[[h, w, c]] + 0.5 * color[c];
            }
        }
    }
    save_image(&blended, path)
}
