//! Training objectives: masked reconstruction (L1), the combined pretraining
//! objective L_t, soft-target cross entropy with mixup weighting for
//! fine-tuning, and the accuracy metric.

use crate::autograd::{Array, Graph, Var};
use crate::backbone::MaskPlan;
use crate::{Error, Result};
use ndarray::IxDyn;

/// Per-step pretraining loss values. At default unit loss weights,
/// `lt == l1 + l2 + l3` within 1e-9.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub lt: f64,
}

/// Per-step fine-tuning loss and training-batch accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneReport {
    pub step: u64,
    pub lf: f64,
    pub acc: f64,
}

/// Mean squared reconstruction error over masked patches only:
/// `L1 = (1/(N·|M|)) Σ_batch Σ_{i∈M} ‖S'ᵢ − Sᵢ‖²`. Unmasked positions
/// contribute nothing (and receive zero gradient).
pub fn masked_reconstruction_loss(
    g: &mut Graph,
    s_prime: Var,
    s_target: Var,
    plan: &MaskPlan,
) -> Result<Var> {
    let sp = g.shape(s_prime).to_vec();
    let st = g.shape(s_target).to_vec();
    if sp != st || sp.len() != 3 {
        return Err(Error::invalid(format!(
            "reconstruction loss expects matching [N, δ1, P], got {sp:?} and {st:?}"
        )));
    }
    if plan.delta1() != sp[1] {
        return Err(Error::invalid(format!(
            "mask plan covers {} patches but sequences have {}",
            plan.delta1(),
            sp[1]
        )));
    }
    if plan.masked_idx.is_empty() {
        return Err(Error::invalid("reconstruction loss needs a non-empty mask set"));
    }
    let n = sp[0] as f64;
    let m = plan.masked_idx.len() as f64;
    let pred = g.select(s_prime, 1, &plan.masked_idx);
    let target = g.select(s_target, 1, &plan.masked_idx);
    let diff = g.sub(pred, target);
    let sq = g.square(diff);
    let total = g.sum_all(sq);
    Ok(g.scale(total, 1.0 / (n * m)))
}

/// Optional target transformation: standardize each patch vector to zero
/// mean and unit variance before the reconstruction loss (off by default;
/// raw pixel targets are the primary formulation).
pub fn normalize_target_patches(s: &Array) -> Array {
    let mut out = s.to_owned();
    let p = s.shape()[s.ndim() - 1] as f64;
    for mut row in out.rows_mut() {
        let mean = row.iter().sum::<f64>() / p;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p;
        let denom = (var + 1e-6).sqrt();
        row.mapv_inplace(|v| (v - mean) / denom);
    }
    out
}

/// Weighted sum of the three pretraining losses. The defaults (all 1)
/// give the plain `L_t = L1 + L2 + L3`.
pub fn total_pretrain_loss(
    g: &mut Graph,
    l1: Var,
    l2: Var,
    l3: Var,
    weights: (f64, f64, f64),
) -> Var {
    let a = g.scale(l1, weights.0);
    let b = g.scale(l2, weights.1);
    let c = g.scale(l3, weights.2);
    let ab = g.add(a, b);
    g.add(ab, c)
}

/// Soft-target cross entropy:
/// `L_f = (1/N) Σₙ (−x_{n,yₙ} + log Σᵢ exp(x_{n,i}))`, computed with a
/// detached per-row max shift so large logits cannot overflow (the shift
/// cancels exactly, so gradients are unaffected).
pub fn soft_target_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let sh = g.shape(logits).to_vec();
    if sh.len() != 2 {
        return Err(Error::invalid(format!(
            "cross entropy expects [N, d] logits, got {sh:?}"
        )));
    }
    let (n, d) = (sh[0], sh[1]);
    if d < 2 {
        return Err(Error::invalid("cross entropy needs at least 2 classes"));
    }
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= d) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {d} classes"
        )));
    }
    let values = g.value(logits);
    let mut max = Array::zeros(IxDyn(&[n, 1]));
    let mut onehot = Array::zeros(IxDyn(&[n, d]));
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for j in 0..d {
            m = m.max(values[[i, j]]);
        }
        max[[i, 0]] = m;
        onehot[[i, labels[i]]] = 1.0;
    }
    let max_flat = Array::from_shape_fn(IxDyn(&[n]), |ix| max[[ix[0], 0]]);
    let max_c = g.constant(max);
    let shifted = g.sub(logits, max_c);
    let e = g.exp(shifted);
    let z = g.sum_axis(e, 1, false); // [N]
    let logz = g.ln(z);
    let oh = g.constant(onehot);
    let picked_terms = g.mul(logits, oh);
    let picked = g.sum_axis(picked_terms, 1, false); // [N] true-class logits
    let neg_picked = g.neg(picked);
    let max_v = g.constant(max_flat);
    let a = g.add(neg_picked, max_v);
    let per_sample = g.add(a, logz);
    let total = g.sum_all(per_sample);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Mixup loss: `λ·CE(logits, y_a) + (1−λ)·CE(logits, y_b)`.
pub fn mixup_cross_entropy(
    g: &mut Graph,
    logits: Var,
    y_a: &[usize],
    y_b: &[usize],
    lambda: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "mixup lambda {lambda} outside [0, 1]"
        )));
    }
    let ce_a = soft_target_cross_entropy(g, logits, y_a)?;
    let ce_b = soft_target_cross_entropy(g, logits, y_b)?;
    let a = g.scale(ce_a, lambda);
    let b = g.scale(ce_b, 1.0 - lambda);
    Ok(g.add(a, b))
}

/// Row-wise argmax with ties resolved to the lowest class index.
pub fn argmax_rows(logits: &Array) -> Vec<usize> {
    let sh = logits.shape();
    let (n, d) = (sh[0], sh[1]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0usize;
        for j in 1..d {
            if logits[[i, j]] > logits[[i, best]] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}

/// Fraction of matching prediction/label pairs.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy of an empty prediction set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let matches = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(matches as f64 / predictions.len() as f64)
}
