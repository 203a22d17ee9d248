//! Show the masking sampler and the masked-patch reconstruction loss in
//! isolation: how many patches a ratio hides, that kept and masked index
//! lists always partition the grid, and that the loss only propagates
//! gradient through *masked* patches.
//!
//! Run with `cargo run --release --example masked_reconstruction`.

use ndarray::IxDyn;
use uniemo::autograd::{Array, Graph, Precision};
use uniemo::backbone::MaskPlan;
use uniemo::objectives::masked_reconstruction_loss;

fn main() -> uniemo::Result<()> {
    // 16 patches (a 4x4 grid) at the ratios the sweep tooling explores.
    let delta1 = 16;
    println!("masked-patch counts out of {delta1} (round-half-up of ratio x {delta1}):");
    for ratio in [0.25, 0.5, 0.75, 0.85] {
        let plan = MaskPlan::from_seed(delta1, ratio, 7)?;
        assert_eq!(plan.kept_idx.len() + plan.masked_idx.len(), delta1);
        println!(
            "  ratio {ratio:4}: {:2} masked, kept {:?}",
            plan.masked_idx.len(),
            plan.kept_idx
        );
    }

    // Reconstruction loss: mean squared error over masked patches only.
    let plan = MaskPlan::from_seed(6, 0.5, 3)?;
    let (n, p) = (2, 4); // two images, four pixels per patch row
    let target = Array::from_shape_fn(IxDyn(&[n, 6, p]), |ix| {
        (ix[0] + ix[1] * 2 + ix[2]) as f64 / 10.0
    });
    let predicted = Array::from_shape_fn(IxDyn(&[n, 6, p]), |ix| {
        (ix[0] + ix[1] + ix[2]) as f64 / 10.0
    });

    let mut g = Graph::new(Precision::Double);
    let pred = g.leaf(predicted, true);
    let tgt = g.leaf(target, false);
    let loss = masked_reconstruction_loss(&mut g, pred, tgt, &plan)?;
    println!("\nmasked indices: {:?}", plan.masked_idx);
    println!("reconstruction loss: {:.6}", g.scalar_value(loss));

    let grads = g.backward(loss);
    let grad = grads.get(pred).expect("prediction gradient");
    println!("gradient L1 mass per patch row (zero rows were kept, not masked):");
    for patch in 0..6 {
        let mass: f64 = (0..n)
            .flat_map(|i| (0..p).map(move |j| (i, j)))
            .map(|(i, j)| grad[[i, patch, j]].abs())
            .sum();
        let tag = if plan.masked_idx.contains(&patch) {
            "masked"
        } else {
            "kept"
        };
        println!("  patch {patch}: {mass:.6} ({tag})");
    }
    Ok(())
}
