//! Batch assembly and mixup augmentation.

use crate::autograd::Array;
use crate::{Error, Result};
use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

/// One training sample: scene pixels, the person-focused view, the caption
/// used for the text teacher, and the class label (absent at pretraining).
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Array,
    pub person_pixels: Array,
    pub caption: String,
    pub label: Option<usize>,
}

/// Stack per-sample tensors into `[N, H, W, C]` batches.
///
/// All samples must share one image shape. Captions and labels come back
/// in sample order.
pub fn stack_samples(
    samples: &[ImageSample],
) -> Result<(Array, Array, Vec<String>, Vec<Option<usize>>)> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot stack an empty batch"));
    }
    let shape = samples[0].pixels.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(format!(
            "expected [H, W, C] sample pixels, got {shape:?}"
        )));
    }
    for (i, sample) in samples.iter().enumerate() {
        if sample.pixels.shape() != shape.as_slice()
            || sample.person_pixels.shape() != shape.as_slice()
        {
            return Err(Error::invalid(format!(
                "sample {i} shape {:?} does not match batch shape {shape:?}",
                sample.pixels.shape()
            )));
        }
    }
    let batch_shape = [&[samples.len()][..], &shape].concat();
    let mut pixels = Array::zeros(IxDyn(&batch_shape));
    let mut person = Array::zeros(IxDyn(&batch_shape));
    for (i, sample) in samples.iter().enumerate() {
        let mut px = pixels.index_axis_mut(ndarray::Axis(0), i);
        px.assign(&sample.pixels);
        let mut pp = person.index_axis_mut(ndarray::Axis(0), i);
        pp.assign(&sample.person_pixels);
    }
    let captions = samples.iter().map(|s| s.caption.clone()).collect();
    let labels = samples.iter().map(|s| s.label).collect();
    Ok((pixels, person, captions, labels))
}

/// Mixup with an explicit coefficient and pairing permutation:
/// `x_mix = λ·x + (1−λ)·x[π]`, labels returned as `(y, y[π])`.
pub fn mix_with(
    x: &Array,
    labels: &[usize],
    permutation: &[usize],
    lambda: f64,
) -> Result<(Array, Vec<usize>, Vec<usize>)> {
    let n = x.shape().first().copied().unwrap_or(0);
    if labels.len() != n || permutation.len() != n {
        return Err(Error::invalid(format!(
            "batch of {n} with {} labels and a permutation of {}",
            labels.len(),
            permutation.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "mixup coefficient {lambda} outside [0, 1]"
        )));
    }
    let mut mixed = Array::zeros(x.raw_dim());
    for i in 0..n {
        let a = x.index_axis(ndarray::Axis(0), i);
        let b = x.index_axis(ndarray::Axis(0), permutation[i]);
        let mut m = mixed.index_axis_mut(ndarray::Axis(0), i);
        m.assign(&(&a * lambda + &b * (1.0 - lambda)));
    }
    let y_a = labels.to_vec();
    let y_b = permutation.iter().map(|&p| labels[p]).collect();
    Ok((mixed, y_a, y_b))
}

/// Mixup augmentation: draw `λ ~ Beta(alpha, alpha)` and a pairing
/// permutation, then blend each sample with its partner.
///
/// Returns `(x_mix, y_a, y_b, λ)` where `y_a` are the original labels and
/// `y_b` the partners' labels, so the loss can be mixed the same way.
pub fn mixup_batch(
    x: &Array,
    labels: &[usize],
    alpha: f64,
    generator: &mut ChaCha8Rng,
) -> Result<(Array, Vec<usize>, Vec<usize>, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!(
            "mixup alpha must be positive, got {alpha}"
        )));
    }
    let n = x.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::invalid(format!(
            "mixup needs a batch of at least 2, got {n}"
        )));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::invalid(format!("mixup alpha {alpha}: {e}")))?;
    let lambda: f64 = beta.sample(generator);
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(generator);
    let (mixed, y_a, y_b) = mix_with(x, labels, &permutation, lambda)?;
    Ok((mixed, y_a, y_b, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn batch(n: usize) -> (Array, Vec<usize>) {
        let x = Array::from_shape_fn(IxDyn(&[n, 2, 2, 1]), |idx| {
            idx[0] as f64 + 0.1 * idx[1] as f64 + 0.01 * idx[2] as f64
        });
        let labels = (0..n).map(|i| i % 3).collect();
        (x, labels)
    }

    #[test]
    fn lambda_one_is_the_identity() {
        let (x, labels) = batch(4);
        let perm = vec![3, 2, 1, 0];
        let (mixed, y_a, y_b) = mix_with(&x, &labels, &perm, 1.0).unwrap();
        assert_eq!(mixed, x);
        assert_eq!(y_a, labels);
        assert_eq!(y_b, vec![labels[3], labels[2], labels[1], labels[0]]);
    }

    #[test]
    fn lambda_zero_is_the_partner() {
        let (x, labels) = batch(4);
        let perm = vec![1, 0, 3, 2];
        let (mixed, _, y_b) = mix_with(&x, &labels, &perm, 0.0).unwrap();
        for i in 0..4 {
            let got = mixed.index_axis(ndarray::Axis(0), i);
            let want = x.index_axis(ndarray::Axis(0), perm[i]);
            assert_eq!(got, want);
        }
        assert_eq!(y_b, vec![labels[1], labels[0], labels[3], labels[2]]);
    }

    #[test]
    fn lambda_half_is_the_elementwise_mean() {
        let (x, labels) = batch(2);
        let (mixed, _, _) = mix_with(&x, &labels, &[1, 0], 0.5).unwrap();
        for idx in 0..4 {
            let (h, w) = (idx / 2, idx % 2);
            let want = (x[[0, h, w, 0]] + x[[1, h, w, 0]]) / 2.0;
            assert!((mixed[[0, h, w, 0]] - want).abs() < 1e-12);
            assert!((mixed[[1, h, w, 0]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mixup_preserves_shape_and_lambda_range() {
        let (x, labels) = batch(6);
        let mut generator = rng::seeded(3);
        for _ in 0..20 {
            let (mixed, y_a, y_b, lambda) =
                mixup_batch(&x, &labels, 0.8, &mut generator).unwrap();
            assert_eq!(mixed.shape(), x.shape());
            assert_eq!(y_a.len(), 6);
            assert_eq!(y_b.len(), 6);
            assert!((0.0..=1.0).contains(&lambda));
        }
    }

    #[test]
    fn mixup_rejects_tiny_batches_and_bad_alpha() {
        let (x, labels) = batch(6);
        let mut generator = rng::seeded(3);
        assert!(mixup_batch(&x, &labels, 0.0, &mut generator).is_err());
        assert!(mixup_batch(&x, &labels, -1.0, &mut generator).is_err());
        let (x1, labels1) = batch(1);
        assert!(mixup_batch(&x1, &labels1, 0.8, &mut generator).is_err());
    }

    #[test]
    fn stacking_preserves_order_and_shape() {
        let samples: Vec<ImageSample> = (0..3)
            .map(|i| ImageSample {
                pixels: Array::from_elem(IxDyn(&[2, 2, 3]), i as f64),
                person_pixels: Array::from_elem(IxDyn(&[2, 2, 3]), 10.0 + i as f64),
                caption: format!("caption {i}"),
                label: Some(i),
            })
            .collect();
        let (pixels, person, captions, labels) = stack_samples(&samples).unwrap();
        assert_eq!(pixels.shape(), &[3, 2, 2, 3]);
        assert_eq!(person.shape(), &[3, 2, 2, 3]);
        for i in 0..3 {
            assert_eq!(pixels[[i, 0, 0, 0]], i as f64);
            assert_eq!(person[[i, 1, 1, 2]], 10.0 + i as f64);
        }
        assert_eq!(captions, vec!["caption 0", "caption 1", "caption 2"]);
        assert_eq!(labels, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn mismatched_sample_shapes_are_rejected() {
        let samples = vec![
            ImageSample {
                pixels: Array::zeros(IxDyn(&[2, 2, 3])),
                person_pixels: Array::zeros(IxDyn(&[2, 2, 3])),
                caption: String::new(),
                label: None,
            },
            ImageSample {
                pixels: Array::zeros(IxDyn(&[4, 4, 3])),
                person_pixels: Array::zeros(IxDyn(&[4, 4, 3])),
                caption: String::new(),
                label: None,
            },
        ];
        assert!(stack_samples(&samples).is_err());
    }
}
