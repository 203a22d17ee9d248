//! Pick a stratified train/val/test split whose subsets also match in
//! appearance: candidate 8:1:1 splits are scored by how far the val
//! color-histogram distribution drifts from the train distribution, and
//! the lowest-divergence candidate wins.
//!
//! Run with `cargo run --release --example split_selection`.

use ndarray::{Axis, IxDyn};
use uniemo::autograd::Array;
use uniemo::data::{
    color_histogram, samples_from_synth, select_best_split, split_divergence, stratified_split,
    synth_split_set,
};

fn main() -> uniemo::Result<()> {
    let items = synth_split_set(200, 16, 4, 5)?;
    let samples = samples_from_synth(&items)?;
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| s.label.expect("split set is labeled"))
        .collect();

    // Per-sample appearance features: 16-bin color histograms per channel.
    let mut rows = Vec::with_capacity(samples.len());
    for sample in &samples {
        rows.push(color_histogram(&sample.pixels, 16)?);
    }
    let width = rows[0].len();
    let mut features = Array::zeros(IxDyn(&[rows.len(), width]));
    for (i, row) in rows.iter().enumerate() {
        features.index_axis_mut(Axis(0), i).assign(row);
    }

    // Score every candidate by hand first — the same train-vs-val
    // divergence the selector minimizes — to make the selection visible.
    println!("candidate divergence scores (seed: score):");
    for seed in 9..19 {
        let (train, val, _test) = stratified_split(&labels, seed)?;
        let score = split_divergence(&features, &train, &val)?;
        println!("  {seed:2}: {score:.6}");
    }

    let plan = select_best_split(&features, &labels, 10, 9)?;
    println!("\nselected seed {} with score {:.6}", plan.seed, plan.divergence_score);
    println!(
        "sizes: train {} / val {} / test {}",
        plan.train.len(),
        plan.val.len(),
        plan.test.len()
    );

    // Stratification holds per class.
    let classes = 1 + labels.iter().max().unwrap();
    let count = |idx: &[usize], class: usize| idx.iter().filter(|&&i| labels[i] == class).count();
    println!("per-class train/val/test counts:");
    for class in 0..classes {
        println!(
            "  class {class}: {} / {} / {}",
            count(&plan.train, class),
            count(&plan.val, class),
            count(&plan.test, class)
        );
    }
    Ok(())
}
