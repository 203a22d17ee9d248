//! Drive all four feature-fusion strategies over the same pair of scene
//! and person embeddings and compare outputs, parameter budgets, and
//! gradient flow.
//!
//! Run with `cargo run --release --example fusion_strategies`.

use uniemo::autograd::{Array, Graph, Precision};
use uniemo::config::FusionStrategy;
use uniemo::fusion::Fusion;
use uniemo::params::ParamStore;
use uniemo::rng;
use ndarray::IxDyn;

fn main() -> uniemo::Result<()> {
    let (n, c3, kappa) = (4, 8, 2);

    // One shared pair of embeddings: α for the full scene, β for the
    // person crop, both [N, C3].
    let alpha = Array::from_shape_fn(IxDyn(&[n, c3]), |ix| {
        0.3 + 0.1 * ((ix[0] * 7 + ix[1] * 3) % 5) as f64
    });
    let beta = Array::from_shape_fn(IxDyn(&[n, c3]), |ix| {
        -0.2 + 0.05 * ((ix[0] * 5 + ix[1]) % 7) as f64
    });

    let strategies = [
        (FusionStrategy::Gamma1, "weighted sum + layer norm"),
        (FusionStrategy::Gamma2, "score-gated mix"),
        (FusionStrategy::Gamma3, "multi-head gated attention"),
        (FusionStrategy::Gamma4, "plain addition baseline"),
    ];

    for (strategy, describe) in strategies {
        let fusion = Fusion::new(strategy, kappa, c3)?;
        let mut store = ParamStore::new();
        let mut init = rng::derive(42, "fusion-example");
        fusion.init_params(&mut store, &mut init);

        let mut g = Graph::new(Precision::Double);
        let bound = store.bind(&mut g);
        let a = g.leaf(alpha.clone(), true);
        let b = g.leaf(beta.clone(), true);
        let upsilon = fusion.fuse(&mut g, &bound, a, b)?;

        // A scalar readout so gradients can flow back to α, β, and every
        // fusion parameter. Summing the first output column (rather than
        // the whole matrix) keeps the probe informative for the
        // layer-normalized strategy, whose rows sum to zero by design.
        let column = g.select(upsilon, 1, &[0]);
        let root = g.sum_all(column);
        let grads = g.backward(root);
        let grad_alpha = grads.get(a).expect("alpha gradient");

        let out = g.value(upsilon);
        let row0: Vec<f64> = (0..4).map(|j| out[[0, j]]).collect();
        println!("{strategy:?} ({describe})");
        println!("  parameters: {}", store.len());
        println!("  upsilon[0][..4] = {row0:.4?}");
        println!(
            "  d(sum of column 0)/d(alpha)[0][0] = {:.4}",
            grad_alpha[[0, 0]]
        );
    }
    Ok(())
}
