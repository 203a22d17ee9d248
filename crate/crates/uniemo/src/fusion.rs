//! Feature fusion: four strategies combining the full-scene CLS embedding
//! α and the person CLS embedding β (both `[N, C3]`) into the
//! discriminative representation Υ.
//!
//! Every strategy ends with a fixed, non-learnable bias vector ε (1e-6 per
//! component) except the plain addition baseline, which is parameter-free.

use crate::autograd::{Graph, Var};
use crate::config::FusionStrategy;
use crate::params::{self, BoundParams, ParamStore};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;

/// Component value of the fixed bias vector ε.
pub const EPSILON_BIAS: f64 = 1e-6;

/// One configured fusion map with named parameters.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub strategy: FusionStrategy,
    pub kappa: usize,
    pub c3: usize,
}

impl Fusion {
    pub fn new(strategy: FusionStrategy, kappa: usize, c3: usize) -> Result<Self> {
        if kappa == 0 {
            return Err(Error::invalid("fusion head count kappa must be >= 1"));
        }
        if c3 == 0 {
            return Err(Error::invalid("fusion feature width must be >= 1"));
        }
        Ok(Fusion {
            strategy,
            kappa,
            c3,
        })
    }

    /// Register this strategy's learnable parameters.
    ///
    /// λᵢ = μᵢ = 1/κ so the weighted-sum strategy starts at the addition
    /// baseline; score vectors are small Gaussians; the gated MLP uses
    /// fan-in uniform weights and biases.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let (c3, kappa) = (self.c3, self.kappa);
        const STD: f64 = 0.02;
        match self.strategy {
            FusionStrategy::Gamma1 => {
                for i in 0..kappa {
                    store.insert(
                        format!("fusion.lambda{i}"),
                        params::full(&[c3], 1.0 / kappa as f64),
                    );
                    store.insert(
                        format!("fusion.mu{i}"),
                        params::full(&[c3], 1.0 / kappa as f64),
                    );
                }
                store.insert("fusion.ln.gamma", params::ones(&[c3]));
                store.insert("fusion.ln.beta", params::zeros(&[c3]));
            }
            FusionStrategy::Gamma2 => {
                for i in 0..kappa {
                    store.insert(format!("fusion.eta{i}"), params::gaussian(rng, &[c3], STD));
                    store.insert(format!("fusion.xi{i}"), params::gaussian(rng, &[c3], STD));
                }
            }
            FusionStrategy::Gamma3 => {
                for i in 0..kappa {
                    store.insert(
                        format!("fusion.phi{i}"),
                        params::gaussian(rng, &[c3, c3], STD),
                    );
                    store.insert(
                        format!("fusion.phi_prime{i}"),
                        params::gaussian(rng, &[c3, c3], STD),
                    );
                }
                let fan = c3 * kappa;
                store.insert("fusion.w1", params::fan_in_uniform(rng, &[fan, c3], fan));
                store.insert("fusion.b1", params::fan_in_uniform(rng, &[c3], fan));
                store.insert("fusion.w2", params::fan_in_uniform(rng, &[c3, c3], c3));
                store.insert("fusion.b2", params::fan_in_uniform(rng, &[c3], c3));
                store.insert("fusion.w3", params::fan_in_uniform(rng, &[c3, c3], c3));
                store.insert("fusion.b3", params::fan_in_uniform(rng, &[c3], c3));
            }
            FusionStrategy::Gamma4 => {}
        }
    }

    /// Combine α and β into Υ, `[N, C3]`.
    pub fn fuse(&self, g: &mut Graph, bound: &BoundParams, alpha: Var, beta: Var) -> Result<Var> {
        let sa = g.shape(alpha).to_vec();
        let sb = g.shape(beta).to_vec();
        if sa != sb || sa.len() != 2 || sa[1] != self.c3 {
            return Err(Error::invalid(format!(
                "fusion expects matching [N, {}] inputs, got {sa:?} and {sb:?}",
                self.c3
            )));
        }
        match self.strategy {
            FusionStrategy::Gamma1 => Ok(self.gamma1(g, bound, alpha, beta)),
            FusionStrategy::Gamma2 => Ok(self.gamma2(g, bound, alpha, beta)),
            FusionStrategy::Gamma3 => Ok(self.gamma3(g, bound, alpha, beta)),
            FusionStrategy::Gamma4 => Ok(g.add(alpha, beta)),
        }
    }

    fn epsilon(&self, g: &mut Graph) -> Var {
        g.constant(params::full(&[self.c3], EPSILON_BIAS))
    }

    /// Υ = LayerNorm(Σᵢ (λᵢ⊙α + μᵢ⊙β)) + ε.
    fn gamma1(&self, g: &mut Graph, bound: &BoundParams, alpha: Var, beta: Var) -> Var {
        let mut acc: Option<Var> = None;
        for i in 0..self.kappa {
            let lam = bound.var(&format!("fusion.lambda{i}"));
            let mu = bound.var(&format!("fusion.mu{i}"));
            let a = g.mul(lam, alpha);
            let b = g.mul(mu, beta);
            let term = g.add(a, b);
            acc = Some(match acc {
                Some(s) => g.add(s, term),
                None => term,
            });
        }
        let sum = acc.expect("kappa >= 1");
        let gamma = bound.var("fusion.ln.gamma");
        let delta = bound.var("fusion.ln.beta");
        let normed = g.layer_norm(sum, gamma, delta, crate::backbone::LN_EPS);
        let eps = self.epsilon(g);
        g.add(normed, eps)
    }

    /// Per-head scalar scores α·ηᵢ and β·ξᵢ compete in a softmax across the
    /// κ heads (per sample); Υ = Swish(Σᵢ (wᵢᵅ⊙α + wᵢᵝ⊙β)) + ε.
    fn gamma2(&self, g: &mut Graph, bound: &BoundParams, alpha: Var, beta: Var) -> Var {
        let score = |g: &mut Graph, x: Var, vec: Var| {
            let prod = g.mul(x, vec);
            g.sum_axis(prod, 1, true) // [N, 1]
        };
        let mut sa = Vec::with_capacity(self.kappa);
        let mut sb = Vec::with_capacity(self.kappa);
        for i in 0..self.kappa {
            let eta = bound.var(&format!("fusion.eta{i}"));
            let xi = bound.var(&format!("fusion.xi{i}"));
            sa.push(score(g, alpha, eta));
            sb.push(score(g, beta, xi));
        }
        let wa = {
            let stacked = g.concat(&sa, 1); // [N, kappa]
            g.softmax(stacked, 1)
        };
        let wb = {
            let stacked = g.concat(&sb, 1);
            g.softmax(stacked, 1)
        };
        let mut acc: Option<Var> = None;
        for i in 0..self.kappa {
            let wai = g.select(wa, 1, &[i]); // [N, 1] broadcasts over C3
            let wbi = g.select(wb, 1, &[i]);
            let a = g.mul(wai, alpha);
            let b = g.mul(wbi, beta);
            let term = g.add(a, b);
            acc = Some(match acc {
                Some(s) => g.add(s, term),
                None => term,
            });
        }
        let sum = acc.expect("kappa >= 1");
        let sw = g.swish(sum);
        let eps = self.epsilon(g);
        g.add(sw, eps)
    }

    /// Gated variant: per-head feature-axis softmax reweighting, head
    /// concatenation, a two-layer map, and a sigmoid gate:
    /// Δᵢ = softmax(αφᵢ)⊙α + softmax(βφ'ᵢ)⊙β; Δ_m = ReLU(Δ_con·W1 + b1)·W2 + b2;
    /// Δ_g = Δ_m ⊙ σ(Δ_m·W3 + b3); Υ = ReLU(Δ_m ⊙ σ(Δ_g)) + ε.
    fn gamma3(&self, g: &mut Graph, bound: &BoundParams, alpha: Var, beta: Var) -> Var {
        let mut deltas = Vec::with_capacity(self.kappa);
        for i in 0..self.kappa {
            let phi = bound.var(&format!("fusion.phi{i}"));
            let phi_p = bound.var(&format!("fusion.phi_prime{i}"));
            let pa = g.matmul(alpha, phi);
            let wa = g.softmax(pa, 1);
            let ta = g.mul(wa, alpha);
            let pb = g.matmul(beta, phi_p);
            let wb = g.softmax(pb, 1);
            let tb = g.mul(wb, beta);
            deltas.push(g.add(ta, tb));
        }
        let con = g.concat(&deltas, 1); // [N, C3·kappa]
        let w1 = bound.var("fusion.w1");
        let b1 = bound.var("fusion.b1");
        let h = g.affine(con, w1, b1);
        let h = g.relu(h);
        let w2 = bound.var("fusion.w2");
        let b2 = bound.var("fusion.b2");
        let dm = g.affine(h, w2, b2);
        let w3 = bound.var("fusion.w3");
        let b3 = bound.var("fusion.b3");
        let gate_in = g.affine(dm, w3, b3);
        let gate = g.sigmoid(gate_in);
        let dg = g.mul(dm, gate);
        let sg = g.sigmoid(dg);
        let gated = g.mul(dm, sg);
        let r = g.relu(gated);
        let eps = self.epsilon(g);
        g.add(r, eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Array, Precision};
    use crate::rng;
    use ndarray::IxDyn;
    use rand::Rng;

    fn randn(n: usize, c: usize, seed: u64) -> Array {
        let mut r = rng::seeded(seed);
        Array::from_shape_simple_fn(IxDyn(&[n, c]), || r.gen_range(-1.0..1.0))
    }

    fn run(
        strategy: FusionStrategy,
        kappa: usize,
        a: &Array,
        b: &Array,
        tweak: impl FnOnce(&mut ParamStore),
    ) -> (Array, ParamStore) {
        let c3 = a.shape()[1];
        let f = Fusion::new(strategy, kappa, c3).unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::seeded(1234);
        f.init_params(&mut store, &mut r);
        tweak(&mut store);
        let mut g = Graph::new(Precision::Double);
        let bound = store.bind(&mut g);
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let y = f.fuse(&mut g, &bound, av, bv).unwrap();
        (g.value(y).to_owned(), store)
    }

    #[test]
    fn gamma1_reduces_to_layer_norm_of_alpha() {
        let a = randn(3, 8, 1);
        let b = randn(3, 8, 2);
        let (y, _) = run(FusionStrategy::Gamma1, 1, &a, &b, |store| {
            *store.get_mut("fusion.lambda0").unwrap() = params::ones(&[8]);
            *store.get_mut("fusion.mu0").unwrap() = params::zeros(&[8]);
        });
        for n in 0..3 {
            let row: Vec<f64> = (0..8).map(|j| a[[n, j]]).collect();
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for j in 0..8 {
                let expect = (row[j] - mean) / (var + crate::backbone::LN_EPS).sqrt();
                assert!(
                    (y[[n, j]] - EPSILON_BIAS - expect).abs() < 1e-12,
                    "sample {n} feature {j}"
                );
            }
        }
    }

    #[test]
    fn gamma1_pre_bias_rows_are_standardized() {
        let a = randn(5, 16, 3);
        let b = randn(5, 16, 4);
        let (y, _) = run(FusionStrategy::Gamma1, 4, &a, &b, |_| {});
        for n in 0..5 {
            let row: Vec<f64> = (0..16).map(|j| y[[n, j]] - EPSILON_BIAS).collect();
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn gamma1_matches_loop_oracle_at_kappa_two() {
        let a = randn(4, 6, 5);
        let b = randn(4, 6, 6);
        let (y, store) = run(FusionStrategy::Gamma1, 2, &a, &b, |store| {
            // break the symmetric init so the oracle is non-trivial
            let mut r = rng::seeded(50);
            *store.get_mut("fusion.lambda0").unwrap() = params::gaussian(&mut r, &[6], 0.5);
            *store.get_mut("fusion.mu1").unwrap() = params::gaussian(&mut r, &[6], 0.5);
            *store.get_mut("fusion.ln.gamma").unwrap() = params::gaussian(&mut r, &[6], 0.5);
            *store.get_mut("fusion.ln.beta").unwrap() = params::gaussian(&mut r, &[6], 0.5);
        });
        let p = |n: &str| store.get(n).unwrap();
        for n in 0..4 {
            let mut s = vec![0.0; 6];
            for i in 0..2 {
                let lam = p(&format!("fusion.lambda{i}"));
                let mu = p(&format!("fusion.mu{i}"));
                for j in 0..6 {
                    s[j] += lam[[j]] * a[[n, j]] + mu[[j]] * b[[n, j]];
                }
            }
            let mean = s.iter().sum::<f64>() / 6.0;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            let gamma = p("fusion.ln.gamma");
            let beta = p("fusion.ln.beta");
            for j in 0..6 {
                let expect = (s[j] - mean) / (var + crate::backbone::LN_EPS).sqrt() * gamma[[j]]
                    + beta[[j]]
                    + EPSILON_BIAS;
                assert!((y[[n, j]] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gamma2_single_head_is_swish_of_sum() {
        let a = randn(4, 8, 7);
        let b = randn(4, 8, 8);
        let (y, _) = run(FusionStrategy::Gamma2, 1, &a, &b, |_| {});
        for n in 0..4 {
            for j in 0..8 {
                let s = a[[n, j]] + b[[n, j]];
                let expect = s / (1.0 + (-s).exp()) + EPSILON_BIAS;
                assert!((y[[n, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gamma2_zero_inputs_give_epsilon() {
        let a = Array::zeros(IxDyn(&[2, 8]));
        let b = Array::zeros(IxDyn(&[2, 8]));
        let (y, _) = run(FusionStrategy::Gamma2, 3, &a, &b, |_| {});
        assert!(y.iter().all(|&v| (v - EPSILON_BIAS).abs() < 1e-15));
    }

    #[test]
    fn gamma2_matches_per_head_oracle_at_kappa_three() {
        let a = randn(4, 8, 9);
        let b = randn(4, 8, 10);
        let (y, store) = run(FusionStrategy::Gamma2, 3, &a, &b, |_| {});
        let p = |n: &str| store.get(n).unwrap();
        for n in 0..4 {
            let mut sa = [0.0; 3];
            let mut sb = [0.0; 3];
            for i in 0..3 {
                let eta = p(&format!("fusion.eta{i}"));
                let xi = p(&format!("fusion.xi{i}"));
                for j in 0..8 {
                    sa[i] += a[[n, j]] * eta[[j]];
                    sb[i] += b[[n, j]] * xi[[j]];
                }
            }
            let soft = |s: &[f64; 3]| {
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect::<Vec<f64>>()
            };
            let wa = soft(&sa);
            let wb = soft(&sb);
            assert!((wa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(wa.iter().all(|&w| w > 0.0 && w < 1.0));
            for j in 0..8 {
                let mut s = 0.0;
                for i in 0..3 {
                    s += wa[i] * a[[n, j]] + wb[i] * b[[n, j]];
                }
                let expect = s / (1.0 + (-s).exp()) + EPSILON_BIAS;
                assert!((y[[n, j]] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gamma3_output_stays_at_or_above_epsilon() {
        let a = randn(6, 8, 11);
        let b = randn(6, 8, 12);
        let (y, _) = run(FusionStrategy::Gamma3, 2, &a, &b, |_| {});
        assert!(y.iter().all(|&v| v >= EPSILON_BIAS - 1e-15));
    }

    #[test]
    fn gamma3_zero_parameters_give_epsilon() {
        let a = randn(3, 4, 13);
        let b = randn(3, 4, 14);
        let (y, _) = run(FusionStrategy::Gamma3, 2, &a, &b, |store| {
            for name in [
                "fusion.w1", "fusion.b1", "fusion.w2", "fusion.b2", "fusion.w3", "fusion.b3",
            ] {
                let shape = store.get(name).unwrap().shape().to_vec();
                *store.get_mut(name).unwrap() = params::zeros(&shape);
            }
        });
        assert!(y.iter().all(|&v| (v - EPSILON_BIAS).abs() < 1e-15));
    }

    #[test]
    fn gamma3_matches_staged_oracle() {
        let a = randn(3, 4, 15);
        let b = randn(3, 4, 16);
        let (y, store) = run(FusionStrategy::Gamma3, 2, &a, &b, |_| {});
        let p = |n: &str| store.get(n).unwrap();
        let softmax_row = |row: &[f64]| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect::<Vec<f64>>()
        };
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        for n in 0..3 {
            let mut con = Vec::new();
            for i in 0..2 {
                let phi = p(&format!("fusion.phi{i}"));
                let phi_p = p(&format!("fusion.phi_prime{i}"));
                let mut pa = vec![0.0; 4];
                let mut pb = vec![0.0; 4];
                for j in 0..4 {
                    for k in 0..4 {
                        pa[j] += a[[n, k]] * phi[[k, j]];
                        pb[j] += b[[n, k]] * phi_p[[k, j]];
                    }
                }
                let wa = softmax_row(&pa);
                let wb = softmax_row(&pb);
                for j in 0..4 {
                    con.push(wa[j] * a[[n, j]] + wb[j] * b[[n, j]]);
                }
            }
            let w1 = p("fusion.w1");
            let b1 = p("fusion.b1");
            let mut h = vec![0.0; 4];
            for j in 0..4 {
                for k in 0..8 {
                    h[j] += con[k] * w1[[k, j]];
                }
                h[j] = (h[j] + b1[[j]]).max(0.0);
            }
            let w2 = p("fusion.w2");
            let b2 = p("fusion.b2");
            let mut dm = vec![0.0; 4];
            for j in 0..4 {
                for k in 0..4 {
                    dm[j] += h[k] * w2[[k, j]];
                }
                dm[j] += b2[[j]];
            }
            let w3 = p("fusion.w3");
            let b3 = p("fusion.b3");
            for j in 0..4 {
                let mut gate_in = 0.0;
                for k in 0..4 {
                    gate_in += dm[k] * w3[[k, j]];
                }
                gate_in += b3[[j]];
                let dg = dm[j] * sigmoid(gate_in);
                let expect = (dm[j] * sigmoid(dg)).max(0.0) + EPSILON_BIAS;
                assert!((y[[n, j]] - expect).abs() < 1e-9, "sample {n} feature {j}");
            }
        }
    }

    #[test]
    fn gamma4_is_plain_commutative_addition() {
        let a = randn(4, 8, 17);
        let zero = Array::zeros(IxDyn(&[4, 8]));
        let (y, _) = run(FusionStrategy::Gamma4, 1, &a, &zero, |_| {});
        assert_eq!(y, a);
        let b = randn(4, 8, 18);
        let (ab, _) = run(FusionStrategy::Gamma4, 1, &a, &b, |_| {});
        let (ba, _) = run(FusionStrategy::Gamma4, 1, &b, &a, |_| {});
        assert_eq!(ab, ba);
        let neg = a.mapv(|v| -v);
        let (z, _) = run(FusionStrategy::Gamma4, 1, &a, &neg, |_| {});
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let f = Fusion::new(FusionStrategy::Gamma4, 1, 8).unwrap();
        let mut g = Graph::new(Precision::Double);
        let store = ParamStore::new();
        let bound = store.bind(&mut g);
        let a = g.constant(randn(2, 8, 19));
        let b = g.constant(randn(3, 8, 20));
        assert!(f.fuse(&mut g, &bound, a, b).is_err());
        let c = g.constant(randn(2, 4, 21));
        assert!(f.fuse(&mut g, &bound, a, c).is_err());
    }

    #[test]
    fn all_strategies_produce_finite_shape_preserving_outputs() {
        let a = randn(4, 8, 22);
        let b = randn(4, 8, 23);
        for strategy in [
            FusionStrategy::Gamma1,
            FusionStrategy::Gamma2,
            FusionStrategy::Gamma3,
            FusionStrategy::Gamma4,
        ] {
            let (y, _) = run(strategy, 3, &a, &b, |_| {});
            assert_eq!(y.shape(), &[4, 8]);
            assert!(y.iter().all(|v| v.is_finite()), "{strategy:?}");
        }
    }
}
