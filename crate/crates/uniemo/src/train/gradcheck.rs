//! Finite-difference gradient verification for every differentiable
//! component: the four fusion strategies, the three pretraining losses,
//! the fine-tuning cross entropy, and a one-block encoder.

use crate::autograd::{Array, Graph, Precision, Var};
use crate::backbone::{Backbone, BackboneConfig, MaskPlan};
use crate::config::FusionStrategy;
use crate::distill::{
    correlation_matrix, feature_similarity_loss, row_normalize, row_normalize_array,
    similarity_contrastive_loss,
};
use crate::fusion::Fusion;
use crate::objectives::{masked_reconstruction_loss, soft_target_cross_entropy};
use crate::params::{BoundParams, ParamStore};
use crate::{rng, Error, Result};
use ndarray::IxDyn;
use rand::Rng;

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Central finite-difference step.
const FD_STEP: f64 = 1e-5;

/// All checkable components, in report order.
pub const COMPONENTS: [&str; 9] = [
    "fusion-gamma1",
    "fusion-gamma2",
    "fusion-gamma3",
    "fusion-gamma4",
    "reconstruction",
    "correlation-alignment",
    "feature-similarity",
    "cross-entropy",
    "encoder-block",
];

/// Result of checking one component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_err: f64,
    /// Number of scalar derivatives compared.
    pub compared: usize,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }
}

/// Compare autodiff gradients of a scalar-valued builder against central
/// finite differences over every parameter and input element. The
/// relative-error denominator is floored at 1e-4 so near-zero derivative
/// pairs compare absolutely.
pub(crate) fn check_scenario<F>(
    store: &ParamStore,
    inputs: &[Array],
    build: F,
) -> Result<(f64, usize)>
where
    F: Fn(&mut Graph, &BoundParams, &[Var]) -> Result<Var>,
{
    let evaluate = |store: &ParamStore, inputs: &[Array]| -> Result<f64> {
        let mut g = Graph::new(Precision::Double);
        let bound = store.bind(&mut g);
        let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
        let root = build(&mut g, &bound, &vars)?;
        Ok(g.scalar_value(root))
    };

    // Analytic pass.
    let mut g = Graph::new(Precision::Double);
    let bound = store.bind(&mut g);
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let root = build(&mut g, &bound, &vars)?;
    let grads = g.backward(root);

    let mut max_rel: f64 = 0.0;
    let mut compared = 0;
    let mut record = |analytic: f64, numeric: f64| {
        let denom = (analytic.abs() + numeric.abs()).max(1e-4);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
        compared += 1;
    };

    let names: Vec<String> = store.names().cloned().collect();
    for name in &names {
        let shape = store.get(name).unwrap().shape().to_vec();
        let grad = grads.get(bound.var(name)).cloned();
        for idx in ndarray::indices(IxDyn(&shape)) {
            let analytic = grad.as_ref().map_or(0.0, |g| g[&idx]);
            let mut plus = store.clone();
            plus.get_mut(name).unwrap()[&idx] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap()[&idx] -= FD_STEP;
            let numeric = (evaluate(&plus, inputs)? - evaluate(&minus, inputs)?) / (2.0 * FD_STEP);
            record(analytic, numeric);
        }
    }
    for (k, input) in inputs.iter().enumerate() {
        let grad = grads.get(vars[k]).cloned();
        for idx in ndarray::indices(input.raw_dim()) {
            let analytic = grad.as_ref().map_or(0.0, |g| g[&idx]);
            let mut plus = inputs.to_vec();
            plus[k][&idx] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k][&idx] -= FD_STEP;
            let numeric = (evaluate(store, &plus)? - evaluate(store, &minus)?) / (2.0 * FD_STEP);
            record(analytic, numeric);
        }
    }
    Ok((max_rel, compared))
}

fn random_array(generator: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_shape_fn(IxDyn(shape), |_| generator.gen_range(-1.0..1.0))
}

fn fusion_check(strategy: FusionStrategy, seed: u64) -> Result<(f64, usize)> {
    let (n, c3, kappa) = (4, 8, 3);
    let fusion = Fusion::new(strategy, kappa, c3)?;
    let mut store = ParamStore::new();
    let mut generator = rng::derive(seed, "gradcheck.fusion");
    fusion.init_params(&mut store, &mut generator);
    let alpha = random_array(&mut generator, &[n, c3]);
    let beta = random_array(&mut generator, &[n, c3]);
    check_scenario(&store, &[alpha, beta], |g, bound, vars| {
        let fused = fusion.fuse(g, bound, vars[0], vars[1])?;
        Ok(g.sum_all(fused))
    })
}

fn reconstruction_check(seed: u64) -> Result<(f64, usize)> {
    let mut generator = rng::derive(seed, "gradcheck.recon");
    let plan = MaskPlan::from_seed(6, 0.5, seed)?;
    let s_prime = random_array(&mut generator, &[2, 6, 5]);
    let s_target = random_array(&mut generator, &[2, 6, 5]);
    let store = ParamStore::new();
    check_scenario(&store, &[s_prime, s_target], |g, _, vars| {
        masked_reconstruction_loss(g, vars[0], vars[1], &plan)
    })
}

fn correlation_alignment_check(seed: u64) -> Result<(f64, usize)> {
    let (n, c3) = (4, 8);
    let mut generator = rng::derive(seed, "gradcheck.corr");
    let upsilon = random_array(&mut generator, &[n, c3]);
    let text = row_normalize_array(&random_array(&mut generator, &[n, c3]), false)?;
    let image = row_normalize_array(&random_array(&mut generator, &[n, c3]), false)?;
    let store = ParamStore::new();
    check_scenario(&store, &[upsilon], move |g, _, vars| {
        let ups_n = row_normalize(g, vars[0], false)?;
        let text_c = g.constant(text.clone());
        let image_c = g.constant(image.clone());
        let a = correlation_matrix(g, ups_n, text_c, false)?;
        let c = correlation_matrix(g, image_c, text_c, false)?;
        similarity_contrastive_loss(g, a, c)
    })
}

fn feature_similarity_check(seed: u64) -> Result<(f64, usize)> {
    let (n, c3) = (4, 8);
    let mut generator = rng::derive(seed, "gradcheck.featsim");
    let upsilon = random_array(&mut generator, &[n, c3]);
    let image = row_normalize_array(&random_array(&mut generator, &[n, c3]), false)?;
    let store = ParamStore::new();
    check_scenario(&store, &[upsilon], move |g, _, vars| {
        let ups_n = row_normalize(g, vars[0], false)?;
        let image_c = g.constant(image.clone());
        feature_similarity_loss(g, ups_n, image_c)
    })
}

fn cross_entropy_check(seed: u64) -> Result<(f64, usize)> {
    let mut generator = rng::derive(seed, "gradcheck.ce");
    let logits = random_array(&mut generator, &[4, 8]);
    let labels = vec![0, 3, 7, 2];
    let store = ParamStore::new();
    check_scenario(&store, &[logits], move |g, _, vars| {
        soft_target_cross_entropy(g, vars[0], &labels)
    })
}

fn encoder_check(seed: u64) -> Result<(f64, usize)> {
    let cfg = BackboneConfig {
        image_size: 8,
        patch: 4,
        in_channels: 3,
        encoder_width: 8,
        encoder_depth: 1,
        encoder_heads: 2,
        decoder_width: 8,
        decoder_depth: 0,
        cls_proj_dim: 4,
        mask_ratio: 0.5,
    };
    let backbone = Backbone::new(cfg.clone())?;
    let mut full = ParamStore::new();
    let mut generator = rng::derive(seed, "gradcheck.encoder");
    backbone.init_params(&mut full, &mut generator);
    let store = full.filter_prefixes(&["encoder.", "cls_proj."]);
    let patches = random_array(&mut generator, &[2, cfg.num_patches(), cfg.patch_dim()]);
    check_scenario(&store, &[patches], move |g, bound, vars| {
        let tokens = backbone.embed_patches(g, bound, vars[0])?;
        let encoded = backbone.encode(g, bound, tokens, true)?;
        let token_sum = g.sum_all(encoded.tokens);
        let cls_sum = g.sum_all(encoded.cls_embedding);
        Ok(g.add(token_sum, cls_sum))
    })
}

/// Check one component by name.
pub fn gradient_check(component: &str, seed: u64) -> Result<ComponentCheck> {
    let (max_rel_err, compared) = match component {
        "fusion-gamma1" => fusion_check(FusionStrategy::Gamma1, seed)?,
        "fusion-gamma2" => fusion_check(FusionStrategy::Gamma2, seed)?,
        "fusion-gamma3" => fusion_check(FusionStrategy::Gamma3, seed)?,
        "fusion-gamma4" => fusion_check(FusionStrategy::Gamma4, seed)?,
        "reconstruction" => reconstruction_check(seed)?,
        "correlation-alignment" => correlation_alignment_check(seed)?,
        "feature-similarity" => feature_similarity_check(seed)?,
        "cross-entropy" => cross_entropy_check(seed)?,
        "encoder-block" => encoder_check(seed)?,
        other => {
            return Err(Error::invalid(format!(
                "unknown gradient-check component {other:?}; known: {}",
                COMPONENTS.join(", ")
            )))
        }
    };
    Ok(ComponentCheck {
        component: component.to_string(),
        max_rel_err,
        compared,
    })
}

/// Check every component.
pub fn gradient_check_all(seed: u64) -> Result<Vec<ComponentCheck>> {
    COMPONENTS
        .iter()
        .map(|name| gradient_check(name, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes_the_tolerance() {
        for check in gradient_check_all(7).unwrap() {
            assert!(
                check.passed(),
                "{} max rel err {} over {} comparisons",
                check.component,
                check.max_rel_err,
                check.compared
            );
            assert!(check.compared > 0);
        }
    }

    #[test]
    fn additive_fusion_is_exact_to_roundoff() {
        let check = gradient_check("fusion-gamma4", 3).unwrap();
        assert!(
            check.max_rel_err < 1e-8,
            "linear map should differentiate exactly, got {}",
            check.max_rel_err
        );
    }

    #[test]
    fn depth_zero_token_path_is_linear_and_exact() {
        // With no blocks, the token path is patch embedding plus constants,
        // so finite differences agree to roundoff.
        let cfg = BackboneConfig {
            image_size: 8,
            patch: 4,
            in_channels: 3,
            encoder_width: 8,
            encoder_depth: 0,
            encoder_heads: 2,
            decoder_width: 8,
            decoder_depth: 0,
            cls_proj_dim: 4,
            mask_ratio: 0.5,
        };
        let backbone = Backbone::new(cfg.clone()).unwrap();
        let mut full = ParamStore::new();
        let mut generator = rng::derive(5, "gradcheck.depth0");
        backbone.init_params(&mut full, &mut generator);
        let mut store = full.filter_prefixes(&["encoder.", "cls_proj."]);
        // Strictly positive values keep every live gradient coefficient
        // well away from zero, so the roundoff-level comparison below is
        // not dominated by the relative-error floor.
        let weight = Array::from_shape_fn(IxDyn(&[48, 8]), |ix| {
            0.05 + 0.01 * ((ix[0] + 7 * ix[1]) % 11) as f64
        });
        *store.get_mut("encoder.patch_embed.weight").unwrap() = weight;
        let patches = Array::from_shape_fn(IxDyn(&[2, 4, 48]), |ix| {
            0.1 + 0.9 * (0.3 + (ix[0] + 3 * ix[1] + 5 * ix[2]) as f64).sin().abs()
        });
        let (max_rel, compared) = check_scenario(&store, &[patches], move |g, bound, vars| {
            let tokens = backbone.embed_patches(g, bound, vars[0])?;
            let encoded = backbone.encode(g, bound, tokens, true)?;
            Ok(g.sum_all(encoded.tokens))
        })
        .unwrap();
        assert!(max_rel < 1e-8, "max rel err {max_rel} over {compared}");
    }

    #[test]
    fn unknown_component_is_rejected() {
        let err = gradient_check("bogus", 1).unwrap_err().to_string();
        assert!(err.contains("bogus"));
        assert!(err.contains("fusion-gamma1"));
    }
}
