//! Teacher-guided semantic distillation.
//!
//! The student side (fused representation Υ) flows through differentiable
//! graph ops; the frozen teacher produces plain arrays that enter the graph
//! as constants, so no gradient can reach it by construction. Losses:
//! a similarity-based contrastive loss over sample-correlation matrices
//! (L2) and a per-sample cosine feature similarity loss (L3), both in
//! `[0, 2]`.

use crate::autograd::{Array, Graph, Var};
use crate::params;
use crate::rng;
use crate::{Error, Result};
use ndarray::IxDyn;

/// Row norms below this are reported as degenerate features.
pub const NORM_EPS: f64 = 1e-12;
/// Optional stabilizer added under the square root when the config enables
/// the floor: keeps training alive through dead features instead of erroring.
const NORM_FLOOR: f64 = 1e-24;

fn check_rows(values: &Array, what: &str) -> Result<()> {
    for (n, row) in values.rows().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_EPS {
            return Err(Error::invalid(format!("degenerate {what} row {n}")));
        }
    }
    Ok(())
}

/// Divide each row of `[N, C]` by its Euclidean norm (differentiable).
///
/// With `floor` false, a row norm under 1e-12 is an error naming the row;
/// with `floor` true a tiny constant under the square root keeps the op
/// defined everywhere.
pub fn row_normalize(g: &mut Graph, x: Var, floor: bool) -> Result<Var> {
    if g.shape(x).len() != 2 {
        return Err(Error::invalid(format!(
            "row_normalize expects [N, C], got {:?}",
            g.shape(x)
        )));
    }
    if !floor {
        check_rows(g.value(x), "feature")?;
    }
    let sq = g.square(x);
    let mut ss = g.sum_axis(sq, 1, true);
    if floor {
        ss = g.add_scalar(ss, NORM_FLOOR);
    }
    let norm = g.sqrt(ss);
    Ok(g.div(x, norm))
}

/// Plain-array version of [`row_normalize`] for teacher outputs.
pub fn row_normalize_array(x: &Array, floor: bool) -> Result<Array> {
    if x.ndim() != 2 {
        return Err(Error::invalid(format!(
            "row_normalize expects [N, C], got {:?}",
            x.shape()
        )));
    }
    if !floor {
        check_rows(x, "feature")?;
    }
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let mut ss = row.iter().map(|v| v * v).sum::<f64>();
        if floor {
            ss += NORM_FLOOR;
        }
        let norm = ss.sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Sample-correlation matrix of two row-normalized feature sets:
/// `M = U'·V'ᵀ`, then each row of `M` re-normalized to unit length.
pub fn correlation_matrix(g: &mut Graph, u_norm: Var, v_norm: Var, floor: bool) -> Result<Var> {
    let su = g.shape(u_norm).to_vec();
    let sv = g.shape(v_norm).to_vec();
    if su.len() != 2 || su != sv {
        return Err(Error::invalid(format!(
            "correlation_matrix expects matching [N, C] inputs, got {su:?} and {sv:?}"
        )));
    }
    let vt = g.permute(v_norm, &[1, 0]);
    let m = g.matmul(u_norm, vt);
    if !floor {
        check_rows(g.value(m), "correlation")?;
    }
    let sq = g.square(m);
    let mut ss = g.sum_axis(sq, 1, true);
    if floor {
        ss = g.add_scalar(ss, NORM_FLOOR);
    }
    let norm = g.sqrt(ss);
    Ok(g.div(m, norm))
}

/// Plain-array correlation matrix for the teacher-only side.
pub fn correlation_matrix_array(u_norm: &Array, v_norm: &Array, floor: bool) -> Result<Array> {
    let ud = u_norm
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::invalid("correlation_matrix expects [N, C]"))?;
    let vd = v_norm
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::invalid("correlation_matrix expects [N, C]"))?;
    let m = ud.dot(&vd.t()).into_dyn();
    row_normalize_array(&m, floor).map_err(|e| match e {
        Error::Invalid(msg) => Error::Invalid(msg.replace("feature", "correlation")),
        other => other,
    })
}

/// Mean row-cosine distance: `1 − (1/N) Σₙ cos(Xₙ, Yₙ)`. With unit rows the
/// cosine reduces to a dot product; the norms are kept in the expression so
/// the value is well-defined for any nonzero rows.
fn mean_cosine_distance(g: &mut Graph, x: Var, y: Var) -> Var {
    let n = g.shape(x)[0] as f64;
    let prod = g.mul(x, y);
    let dots = g.sum_axis(prod, 1, false); // [N]
    let xx = g.square(x);
    let xs = g.sum_axis(xx, 1, false);
    let xn = g.sqrt(xs);
    let yy = g.square(y);
    let ys = g.sum_axis(yy, 1, false);
    let yn = g.sqrt(ys);
    let norms = g.mul(xn, yn);
    let cos = g.div(dots, norms);
    let total = g.sum_all(cos);
    let mean = g.scale(total, 1.0 / n);
    let neg = g.neg(mean);
    g.add_scalar(neg, 1.0)
}

/// Similarity-based contrastive loss between the student and teacher
/// correlation matrices (both `[N, N]`, row-normalized).
pub fn similarity_contrastive_loss(g: &mut Graph, a: Var, c: Var) -> Result<Var> {
    let sa = g.shape(a).to_vec();
    let sc = g.shape(c).to_vec();
    if sa != sc || sa.len() != 2 {
        return Err(Error::invalid(format!(
            "contrastive loss expects matching [N, N] inputs, got {sa:?} and {sc:?}"
        )));
    }
    Ok(mean_cosine_distance(g, a, c))
}

/// Visual feature similarity loss between row-normalized student and
/// teacher image features (both `[N, C3]`).
pub fn feature_similarity_loss(g: &mut Graph, u: Var, w: Var) -> Result<Var> {
    let su = g.shape(u).to_vec();
    let sw = g.shape(w).to_vec();
    if su != sw || su.len() != 2 {
        return Err(Error::invalid(format!(
            "feature similarity loss expects matching [N, C] inputs, got {su:?} and {sw:?}"
        )));
    }
    Ok(mean_cosine_distance(g, u, w))
}

/// Frozen feature extractor pair. Outputs are deterministic for fixed
/// inputs and carry no gradient (they enter graphs as constants).
pub trait Teacher {
    /// Text features Λ: one unit-norm row of width C3 per caption.
    fn encode_text(&self, captions: &[String]) -> Result<Array>;
    /// Image features Ω: `[N, H, W, C1]` pixels → unit-norm `[N, C3]`.
    fn encode_image(&self, pixels: &Array) -> Result<Array>;
    /// Feature width C3.
    fn width(&self) -> usize;
}

/// Deterministic desk-scale teacher: hashed bag-of-tokens text features and
/// mean-pooled image features, each pushed through a seeded Gaussian
/// projection and row-normalized. Same seed → identical functions.
pub struct StubTeacher {
    seed: u64,
    c3: usize,
}

const TEXT_BUCKETS: usize = 256;
const POOL_SIDE: usize = 8;

impl StubTeacher {
    pub fn new(seed: u64, c3: usize) -> Result<Self> {
        if c3 == 0 {
            return Err(Error::invalid("teacher feature width must be >= 1"));
        }
        Ok(StubTeacher { seed, c3 })
    }

    fn projection(&self, purpose: &str, rows: usize) -> Array {
        let mut r = rng::derive(self.seed, purpose);
        params::gaussian(&mut r, &[rows, self.c3], 1.0 / (rows as f64).sqrt())
    }
}

fn fnv1a_bucket(token: &str) -> usize {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    (h % TEXT_BUCKETS as u64) as usize
}

impl Teacher for StubTeacher {
    fn encode_text(&self, captions: &[String]) -> Result<Array> {
        let mut bags = Array::zeros(IxDyn(&[captions.len(), TEXT_BUCKETS]));
        for (n, caption) in captions.iter().enumerate() {
            let mut any = false;
            for token in caption.split_whitespace() {
                bags[[n, fnv1a_bucket(&token.to_lowercase())]] += 1.0;
                any = true;
            }
            if !any {
                return Err(Error::invalid(format!("empty caption at row {n}")));
            }
        }
        let proj = self.projection("text", TEXT_BUCKETS);
        let bags2 = bags.into_dimensionality::<ndarray::Ix2>().unwrap();
        let proj2 = proj.into_dimensionality::<ndarray::Ix2>().unwrap();
        row_normalize_array(&bags2.dot(&proj2).into_dyn(), false)
    }

    fn encode_image(&self, pixels: &Array) -> Result<Array> {
        let sh = pixels.shape();
        if sh.len() != 4 {
            return Err(Error::invalid(format!(
                "teacher expects [N, H, W, C] pixels, got {sh:?}"
            )));
        }
        let (n, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        let mut pooled = Array::zeros(IxDyn(&[n, POOL_SIDE * POOL_SIDE * c]));
        for b in 0..n {
            let mut k = 0;
            for py in 0..POOL_SIDE {
                for px in 0..POOL_SIDE {
                    let y0 = py * h / POOL_SIDE;
                    let y1 = ((py + 1) * h / POOL_SIDE).max(y0 + 1).min(h.max(y0 + 1));
                    let x0 = px * w / POOL_SIDE;
                    let x1 = ((px + 1) * w / POOL_SIDE).max(x0 + 1).min(w.max(x0 + 1));
                    for ch in 0..c {
                        let mut sum = 0.0;
                        let mut count = 0.0;
                        for y in y0..y1.min(h) {
                            for x in x0..x1.min(w) {
                                sum += pixels[[b, y, x, ch]];
                                count += 1.0;
                            }
                        }
                        pooled[[b, k]] = if count > 0.0 { sum / count } else { 0.0 };
                        k += 1;
                    }
                }
            }
        }
        let proj = self.projection("image", POOL_SIDE * POOL_SIDE * c);
        let pooled2 = pooled.into_dimensionality::<ndarray::Ix2>().unwrap();
        let proj2 = proj.into_dimensionality::<ndarray::Ix2>().unwrap();
        // The floor keeps an all-black batch image from erroring; features
        // remain deterministic.
        row_normalize_array(&pooled2.dot(&proj2).into_dyn(), true)
    }

    fn width(&self) -> usize {
        self.c3
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Precision;
    use rand::Rng;

    fn randn(n: usize, c: usize, seed: u64) -> Array {
        let mut r = rng::seeded(seed);
        Array::from_shape_simple_fn(IxDyn(&[n, c]), || r.gen_range(-1.0..1.0))
    }

    #[test]
    fn three_four_five_row_normalizes() {
        let x = Array::from_shape_vec(IxDyn(&[1, 2]), vec![3.0, 4.0]).unwrap();
        let out = row_normalize_array(&x, false).unwrap();
        assert!((out[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((out[[0, 1]] - 0.8).abs() < 1e-15);
        let again = row_normalize_array(&out, false).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let x = randn(5, 7, 1);
        let mut g = Graph::new(Precision::Double);
        let xv = g.constant(x);
        let out = row_normalize(&mut g, xv, false).unwrap();
        for row in g.value(out).rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_row_error_names_the_row() {
        let mut x = randn(3, 4, 2);
        for j in 0..4 {
            x[[1, j]] = 0.0;
        }
        let err = row_normalize_array(&x, false).unwrap_err();
        assert!(err.to_string().contains("degenerate feature row 1"));
        let floored = row_normalize_array(&x, true).unwrap();
        assert!(floored.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn correlation_matches_hand_case() {
        let u = Array::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Array::from_shape_vec(IxDyn(&[2, 2]), vec![0.6, 0.8, 0.0, 1.0]).unwrap();
        let mut g = Graph::new(Precision::Double);
        let uv = g.constant(u.clone());
        let vv = g.constant(v.clone());
        let m = correlation_matrix(&mut g, uv, vv, false).unwrap();
        let got = g.value(m);
        // raw M = [[0.6, 0.0], [0.8, 1.0]]; second row / sqrt(1.64)
        let z = 1.64f64.sqrt();
        let expect = [[1.0, 0.0], [0.8 / z, 1.0 / z]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((got[[i, j]] - expect[i][j]).abs() < 1e-12);
            }
        }
        assert!((got[[1, 0]] - 0.625).abs() < 1e-3);
        assert!((got[[1, 1]] - 0.781).abs() < 1e-3);
        let arr = correlation_matrix_array(&u, &v, false).unwrap();
        assert_eq!(&arr, got);
    }

    #[test]
    fn self_correlation_diagonal_is_one_before_renorm() {
        let u = row_normalize_array(&randn(4, 6, 3), false).unwrap();
        let u2 = u.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let raw = u2.dot(&u2.t());
        for i in 0..4 {
            assert!((raw[[i, i]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_rows_are_unit_norm() {
        let u = row_normalize_array(&randn(5, 7, 4), false).unwrap();
        let v = row_normalize_array(&randn(5, 7, 5), false).unwrap();
        let m = correlation_matrix_array(&u, &v, false).unwrap();
        for row in m.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn contrastive_loss_hits_its_anchor_values() {
        let a = row_normalize_array(&randn(4, 4, 6), false).unwrap();
        let mut g = Graph::new(Precision::Double);
        let av = g.constant(a.clone());
        let same = similarity_contrastive_loss(&mut g, av, av).unwrap();
        assert!(g.scalar_value(same).abs() < 1e-12);
        let neg = g.constant(a.mapv(|v| -v));
        let opposite = similarity_contrastive_loss(&mut g, av, neg).unwrap();
        assert!((g.scalar_value(opposite) - 2.0).abs() < 1e-12);
        // orthogonal rows: unit axes against shifted unit axes
        let e1 = Array::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e2 = Array::from_shape_vec(IxDyn(&[2, 2]), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let v1 = g.constant(e1);
        let v2 = g.constant(e2);
        let orth = similarity_contrastive_loss(&mut g, v1, v2).unwrap();
        assert!((g.scalar_value(orth) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn feature_similarity_matches_row_cosine_oracle() {
        let u = randn(4, 8, 7);
        let w = randn(4, 8, 8);
        let un = row_normalize_array(&u, false).unwrap();
        let wn = row_normalize_array(&w, false).unwrap();
        let mut g = Graph::new(Precision::Double);
        let uv = g.constant(un.clone());
        let wv = g.constant(wn.clone());
        let loss = feature_similarity_loss(&mut g, uv, wv).unwrap();
        let mut expect = 0.0;
        for n in 0..4 {
            let mut dot = 0.0;
            let mut nu = 0.0;
            let mut nw = 0.0;
            for j in 0..8 {
                dot += un[[n, j]] * wn[[n, j]];
                nu += un[[n, j]] * un[[n, j]];
                nw += wn[[n, j]] * wn[[n, j]];
            }
            expect += dot / (nu.sqrt() * nw.sqrt());
        }
        let expect = 1.0 - expect / 4.0;
        assert!((g.scalar_value(loss) - expect).abs() < 1e-9);
        assert!((0.0..=2.0).contains(&g.scalar_value(loss)));
    }

    #[test]
    fn losses_stay_in_range_over_random_instances() {
        for seed in 0..200 {
            let u = row_normalize_array(&randn(4, 6, 100 + seed), false).unwrap();
            let w = row_normalize_array(&randn(4, 6, 300 + seed), false).unwrap();
            let mut g = Graph::new(Precision::Double);
            let uv = g.constant(u.clone());
            let wv = g.constant(w.clone());
            let a = correlation_matrix(&mut g, uv, wv, false).unwrap();
            let c = correlation_matrix(&mut g, wv, uv, false).unwrap();
            let l2 = similarity_contrastive_loss(&mut g, a, c).unwrap();
            let l3 = feature_similarity_loss(&mut g, uv, wv).unwrap();
            let l2v = g.scalar_value(l2);
            let l3v = g.scalar_value(l3);
            assert!((-1e-12..=2.0 + 1e-12).contains(&l2v), "L2 {l2v}");
            assert!((-1e-12..=2.0 + 1e-12).contains(&l3v), "L3 {l3v}");
        }
    }

    #[test]
    fn scaling_student_features_leaves_losses_unchanged() {
        let upsilon = randn(4, 8, 9);
        let omega = row_normalize_array(&randn(4, 8, 10), false).unwrap();
        let lambda = row_normalize_array(&randn(4, 8, 11), false).unwrap();
        let eval = |scale: f64| {
            let mut g = Graph::new(Precision::Double);
            let uv = g.constant(upsilon.mapv(|v| v * scale));
            let un = row_normalize(&mut g, uv, false).unwrap();
            let lam = g.constant(lambda.clone());
            let om = g.constant(omega.clone());
            let a = correlation_matrix(&mut g, un, lam, false).unwrap();
            let c = correlation_matrix(&mut g, om, lam, false).unwrap();
            let l2 = similarity_contrastive_loss(&mut g, a, c).unwrap();
            let l3 = feature_similarity_loss(&mut g, un, om).unwrap();
            (g.scalar_value(l2), g.scalar_value(l3))
        };
        let (l2_base, l3_base) = eval(1.0);
        for c in [0.1, 10.0] {
            let (l2, l3) = eval(c);
            assert!((l2 - l2_base).abs() < 1e-9, "L2 at scale {c}");
            assert!((l3 - l3_base).abs() < 1e-9, "L3 at scale {c}");
        }
    }

    #[test]
    fn stub_teacher_is_deterministic_and_unit_norm() {
        let t1 = StubTeacher::new(7, 16).unwrap();
        let t2 = StubTeacher::new(7, 16).unwrap();
        let captions = vec![
            "A photo evoking awe".to_string(),
            "A photo evoking fear, featuring spider".to_string(),
        ];
        let a = t1.encode_text(&captions).unwrap();
        let b = t2.encode_text(&captions).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 16]);
        for row in a.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        let mut r = rng::seeded(12);
        let px = Array::from_shape_simple_fn(IxDyn(&[2, 16, 16, 3]), || r.gen_range(0.0..1.0));
        let i1 = t1.encode_image(&px).unwrap();
        let i2 = t2.encode_image(&px).unwrap();
        assert_eq!(i1, i2);
        for row in i1.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn different_seeds_give_different_stubs() {
        let t1 = StubTeacher::new(1, 8).unwrap();
        let t2 = StubTeacher::new(2, 8).unwrap();
        let captions = vec!["A photo evoking contentment".to_string()];
        let a = t1.encode_text(&captions).unwrap();
        let b = t2.encode_text(&captions).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn identical_texts_map_to_identical_rows() {
        let t = StubTeacher::new(3, 8).unwrap();
        let captions = vec![
            "A photo evoking anger".to_string(),
            "A photo evoking anger".to_string(),
        ];
        let out = t.encode_text(&captions).unwrap();
        for j in 0..8 {
            assert_eq!(out[[0, j]], out[[1, j]]);
        }
    }
}
