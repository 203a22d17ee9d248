//! Vision backbone: patch embedding, fixed sinusoidal positions, random
//! masking, a pre-norm transformer encoder with CLS token, and the
//! reconstruction decoder.
//!
//! The same encoder weights serve both streams: the full-scene stream runs
//! on masked tokens (and feeds the decoder), the person stream on unmasked
//! tokens. Both produce a C3-dimensional CLS projection.

use crate::autograd::{Array, Graph, Var};
use crate::params::{self, BoundParams, ParamStore};
use crate::rng;
use crate::{Error, Result};
use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Architecture hyperparameters for encoder, decoder, and CLS projection.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub encoder_width: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_width: usize,
    pub decoder_depth: usize,
    pub cls_proj_dim: usize,
    pub mask_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 64,
            patch: 8,
            in_channels: 3,
            encoder_width: 128,
            encoder_depth: 4,
            encoder_heads: 4,
            decoder_width: 64,
            decoder_depth: 2,
            cls_proj_dim: 64,
            mask_ratio: 0.75,
        }
    }
}

impl BackboneConfig {
    /// Patch count δ1 = (H/patch)·(W/patch).
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    /// Patches per image side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    /// Raw patch vector length patch²·C1.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }

    /// Masked patch count: round-half-up of μ·δ1.
    pub fn mask_count(&self) -> usize {
        round_half_up(self.mask_ratio * self.num_patches() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::invalid(format!(
                "image size {} is not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.encoder_width % 2 != 0 || self.decoder_width % 2 != 0 {
            return Err(Error::invalid(
                "encoder and decoder widths must be even for sinusoidal positions",
            ));
        }
        if self.encoder_heads == 0 || self.encoder_width % self.encoder_heads != 0 {
            return Err(Error::invalid(format!(
                "encoder width {} is not divisible by {} heads",
                self.encoder_width, self.encoder_heads
            )));
        }
        if self.decoder_width % self.encoder_heads != 0 {
            return Err(Error::invalid(format!(
                "decoder width {} is not divisible by {} heads",
                self.decoder_width, self.encoder_heads
            )));
        }
        let d1 = self.num_patches();
        let m = self.mask_count();
        if m < 1 || m >= d1 {
            return Err(Error::invalid(format!(
                "mask ratio {} keeps {} of {} patches; need at least 1 masked and 1 kept",
                self.mask_ratio,
                d1 - m,
                d1
            )));
        }
        Ok(())
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Exact masked/kept index partition for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub kept_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    /// Draw a uniformly random partition of `0..delta1` masking
    /// round-half-up(μ·δ1) indices. Index lists are ascending, so kept
    /// tokens preserve their original relative order.
    pub fn from_seed(delta1: usize, mu: f64, seed: u64) -> Result<MaskPlan> {
        let m = round_half_up(mu * delta1 as f64);
        if m < 1 || m >= delta1 {
            return Err(Error::invalid(format!(
                "mask ratio {mu} at {delta1} patches masks {m}; need 1 <= masked < {delta1}"
            )));
        }
        let mut order: Vec<usize> = (0..delta1).collect();
        let mut r = rng::seeded(seed);
        order.shuffle(&mut r);
        let mut masked_idx: Vec<usize> = order[..m].to_vec();
        let mut kept_idx: Vec<usize> = order[m..].to_vec();
        masked_idx.sort_unstable();
        kept_idx.sort_unstable();
        Ok(MaskPlan {
            kept_idx,
            masked_idx,
            seed,
        })
    }

    pub fn delta1(&self) -> usize {
        self.kept_idx.len() + self.masked_idx.len()
    }
}

/// Cut pixels `[N, H, W, C1]` into row-major patch vectors `[N, δ1, patch²·C1]`.
/// Within one patch, values flatten pixel-row-major with channels innermost,
/// so [`unpatchify`] is an exact inverse.
pub fn patchify(pixels: &Array, patch: usize) -> Result<Array> {
    let sh = pixels.shape();
    if sh.len() != 4 {
        return Err(Error::invalid(format!(
            "patchify expects [N, H, W, C], got {sh:?}"
        )));
    }
    let (n, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let p = patch * patch * c;
    let mut out = Array::zeros(IxDyn(&[n, gh * gw, p]));
    for b in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let pidx = gy * gw + gx;
                let mut k = 0;
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..c {
                            out[[b, pidx, k]] =
                                pixels[[b, gy * patch + py, gx * patch + px, ch]];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`patchify`]: `[N, δ1, patch²·C1]` back to `[N, H, W, C1]`.
pub fn unpatchify(patches: &Array, patch: usize, channels: usize) -> Result<Array> {
    let sh = patches.shape();
    if sh.len() != 3 {
        return Err(Error::invalid(format!(
            "unpatchify expects [N, δ1, P], got {sh:?}"
        )));
    }
    let (n, d1, p) = (sh[0], sh[1], sh[2]);
    if p != patch * patch * channels {
        return Err(Error::invalid(format!(
            "patch vector length {p} does not match patch {patch} x {channels} channels"
        )));
    }
    let g = (d1 as f64).sqrt().round() as usize;
    if g * g != d1 {
        return Err(Error::invalid(format!("{d1} patches is not a square grid")));
    }
    let side = g * patch;
    let mut out = Array::zeros(IxDyn(&[n, side, side, channels]));
    for b in 0..n {
        for gy in 0..g {
            for gx in 0..g {
                let pidx = gy * g + gx;
                let mut k = 0;
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..channels {
                            out[[b, gy * patch + py, gx * patch + px, ch]] =
                                patches[[b, pidx, k]];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fixed sine/cosine position table `[L, width]`. Row 0 is `[0, 1, 0, 1, …]`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Result<Array> {
    if width % 2 != 0 {
        return Err(Error::invalid(format!(
            "positional encoding width {width} must be even"
        )));
    }
    let mut table = Array::zeros(IxDyn(&[len, width]));
    for pos in 0..len {
        for i in 0..width / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / width as f64);
            let angle = pos as f64 * freq;
            table[[pos, 2 * i]] = angle.sin();
            table[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(table)
}

/// Encoder outputs for one stream.
pub struct EncodedState {
    /// Block-stack output including the CLS row, `[N, 1+L, C2]`.
    /// The final norm applies only on the CLS-projection path, so a
    /// depth-0 encoder returns its input tokens unchanged here.
    pub tokens: Var,
    /// CLS row after the final norm, projected to C3: `[N, C3]`.
    pub cls_embedding: Var,
}

/// The shared encoder/decoder parameter family and its forward passes.
///
/// All learnable tensors are registered in a [`ParamStore`] under
/// hierarchical names (`encoder.block3.attn.qkv.weight`, …); forward passes
/// take the bound graph handles so one set of weights can serve several
/// streams inside a single tape.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Backbone { cfg })
    }

    /// Register encoder, CLS-projection, and decoder parameters.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = &self.cfg;
        let (c2, cd, p) = (c.encoder_width, c.decoder_width, c.patch_dim());
        const STD: f64 = 0.02;
        store.insert(
            "encoder.patch_embed.weight",
            params::gaussian(rng, &[p, c2], STD),
        );
        store.insert("encoder.patch_embed.bias", params::zeros(&[c2]));
        store.insert("encoder.cls_token", params::gaussian(rng, &[1, 1, c2], STD));
        for b in 0..c.encoder_depth {
            init_block_params(store, &format!("encoder.block{b}"), c2, rng, STD);
        }
        store.insert("encoder.norm.gamma", params::ones(&[c2]));
        store.insert("encoder.norm.beta", params::zeros(&[c2]));
        store.insert(
            "cls_proj.weight",
            params::gaussian(rng, &[c2, c.cls_proj_dim], STD),
        );
        store.insert("cls_proj.bias", params::zeros(&[c.cls_proj_dim]));
        store.insert("decoder.embed.weight", params::gaussian(rng, &[c2, cd], STD));
        store.insert("decoder.embed.bias", params::zeros(&[cd]));
        store.insert("decoder.mask_token", params::gaussian(rng, &[cd], STD));
        for b in 0..c.decoder_depth {
            init_block_params(store, &format!("decoder.block{b}"), cd, rng, STD);
        }
        store.insert("decoder.norm.gamma", params::ones(&[cd]));
        store.insert("decoder.norm.beta", params::zeros(&[cd]));
        store.insert("decoder.head.weight", params::gaussian(rng, &[cd, p], STD));
        store.insert("decoder.head.bias", params::zeros(&[p]));
    }

    /// Embed raw patch vectors and add the fixed position table:
    /// `[N, δ1, P] -> [N, δ1, C2]`.
    pub fn embed_patches(&self, g: &mut Graph, bound: &BoundParams, patches: Var) -> Result<Var> {
        let sh = g.shape(patches).to_vec();
        if sh.len() != 3 || sh[2] != self.cfg.patch_dim() {
            return Err(Error::invalid(format!(
                "embed_patches expects [N, δ1, {}], got {sh:?}",
                self.cfg.patch_dim()
            )));
        }
        let w = bound.var("encoder.patch_embed.weight");
        let b = bound.var("encoder.patch_embed.bias");
        let tokens = g.affine(patches, w, b);
        let pe = sinusoidal_positions(sh[1], self.cfg.encoder_width)?;
        let pe = g.constant(pe);
        Ok(g.add(tokens, pe))
    }

    /// Keep only the plan's kept tokens: `[N, δ1, C2] -> [N, |kept|, C2]`.
    pub fn apply_mask(&self, g: &mut Graph, tokens: Var, plan: &MaskPlan) -> Result<Var> {
        let l = g.shape(tokens)[1];
        if plan.delta1() != l {
            return Err(Error::invalid(format!(
                "mask plan covers {} patches but tokens have {l}",
                plan.delta1()
            )));
        }
        Ok(g.select(tokens, 1, &plan.kept_idx))
    }

    /// Run the pre-norm block stack, optionally prepending the CLS token.
    ///
    /// Returns the token sequence after the final block (no final norm and
    /// no summary projection), which is what downstream heads that pool
    /// patch tokens consume.
    pub fn encode_tokens(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        tokens: Var,
        prepend_cls: bool,
    ) -> Result<Var> {
        let sh = g.shape(tokens).to_vec();
        if sh.len() != 3 || sh[2] != self.cfg.encoder_width {
            return Err(Error::invalid(format!(
                "encode expects [N, L, {}], got {sh:?}",
                self.cfg.encoder_width
            )));
        }
        let mut x = tokens;
        if prepend_cls {
            let cls = bound.var("encoder.cls_token");
            let zeros = g.constant(params::zeros(&[sh[0], 1, sh[2]]));
            let cls_batch = g.add(zeros, cls);
            x = g.concat(&[cls_batch, tokens], 1);
        }
        for b in 0..self.cfg.encoder_depth {
            x = transformer_block(
                g,
                bound,
                &format!("encoder.block{b}"),
                x,
                self.cfg.encoder_heads,
            );
        }
        Ok(x)
    }

    /// Run the block stack and project the CLS row to the summary embedding.
    pub fn encode(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        tokens: Var,
        prepend_cls: bool,
    ) -> Result<EncodedState> {
        let x = self.encode_tokens(g, bound, tokens, prepend_cls)?;
        let cls_row = g.select(x, 1, &[0]);
        let gamma = bound.var("encoder.norm.gamma");
        let beta = bound.var("encoder.norm.beta");
        let normed = g.layer_norm(cls_row, gamma, beta, LN_EPS);
        let pw = bound.var("cls_proj.weight");
        let pb = bound.var("cls_proj.bias");
        let proj = g.affine(normed, pw, pb);
        let n = g.shape(proj)[0];
        let cls_embedding = g.reshape(proj, &[n, self.cfg.cls_proj_dim]);
        Ok(EncodedState {
            tokens: x,
            cls_embedding,
        })
    }

    /// Reconstruct every patch from the encoded kept tokens.
    ///
    /// Drops the CLS row, projects to decoder width, inserts the shared
    /// learnable mask token at each masked index, adds decoder positions
    /// over the full grid, runs the decoder stack, and maps to raw patch
    /// vectors `[N, δ1, patch²·C1]` in original patch order.
    pub fn decode(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        encoded: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let sh = g.shape(encoded).to_vec();
        let k = plan.kept_idx.len();
        if sh.len() != 3 || sh[1] != k + 1 {
            return Err(Error::invalid(format!(
                "decode expects [N, 1+{k}, C2] for this plan, got {sh:?}"
            )));
        }
        let n = sh[0];
        let d1 = plan.delta1();
        let cd = self.cfg.decoder_width;
        let keep_rows: Vec<usize> = (1..=k).collect();
        let kept = g.select(encoded, 1, &keep_rows);
        let ew = bound.var("decoder.embed.weight");
        let eb = bound.var("decoder.embed.bias");
        let kept = g.affine(kept, ew, eb);
        let mask_token = bound.var("decoder.mask_token");
        let zeros = g.constant(params::zeros(&[n, plan.masked_idx.len(), cd]));
        let masks = g.add(zeros, mask_token);
        let full = g.concat(&[kept, masks], 1);
        // full row j holds patch perm[j]; invert to restore original order.
        let mut inverse = vec![0usize; d1];
        for (j, &patch) in plan.kept_idx.iter().chain(&plan.masked_idx).enumerate() {
            inverse[patch] = j;
        }
        let ordered = g.select(full, 1, &inverse);
        let pe = g.constant(sinusoidal_positions(d1, cd)?);
        let mut x = g.add(ordered, pe);
        for b in 0..self.cfg.decoder_depth {
            x = transformer_block(
                g,
                bound,
                &format!("decoder.block{b}"),
                x,
                self.cfg.encoder_heads,
            );
        }
        let gamma = bound.var("decoder.norm.gamma");
        let beta = bound.var("decoder.norm.beta");
        let x = g.layer_norm(x, gamma, beta, LN_EPS);
        let hw = bound.var("decoder.head.weight");
        let hb = bound.var("decoder.head.bias");
        Ok(g.affine(x, hw, hb))
    }
}

pub(crate) const LN_EPS: f64 = 1e-6;

fn init_block_params(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    rng: &mut ChaCha8Rng,
    std: f64,
) {
    let hidden = 4 * width;
    store.insert(format!("{prefix}.ln1.gamma"), params::ones(&[width]));
    store.insert(format!("{prefix}.ln1.beta"), params::zeros(&[width]));
    store.insert(
        format!("{prefix}.attn.qkv.weight"),
        params::gaussian(rng, &[width, 3 * width], std),
    );
    store.insert(format!("{prefix}.attn.qkv.bias"), params::zeros(&[3 * width]));
    store.insert(
        format!("{prefix}.attn.proj.weight"),
        params::gaussian(rng, &[width, width], std),
    );
    store.insert(format!("{prefix}.attn.proj.bias"), params::zeros(&[width]));
    store.insert(format!("{prefix}.ln2.gamma"), params::ones(&[width]));
    store.insert(format!("{prefix}.ln2.beta"), params::zeros(&[width]));
    store.insert(
        format!("{prefix}.mlp.fc1.weight"),
        params::gaussian(rng, &[width, hidden], std),
    );
    store.insert(format!("{prefix}.mlp.fc1.bias"), params::zeros(&[hidden]));
    store.insert(
        format!("{prefix}.mlp.fc2.weight"),
        params::gaussian(rng, &[hidden, width], std),
    );
    store.insert(format!("{prefix}.mlp.fc2.bias"), params::zeros(&[width]));
}

/// Multi-head self-attention over `[N, L, C]`.
fn attention(g: &mut Graph, bound: &BoundParams, prefix: &str, x: Var, heads: usize) -> Var {
    let sh = g.shape(x).to_vec();
    let (n, l, c) = (sh[0], sh[1], sh[2]);
    let hd = c / heads;
    let qkv_w = bound.var(&format!("{prefix}.attn.qkv.weight"));
    let qkv_b = bound.var(&format!("{prefix}.attn.qkv.bias"));
    let qkv = g.affine(x, qkv_w, qkv_b);
    let qkv = g.reshape(qkv, &[n, l, 3, heads, hd]);
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]); // [3, N, heads, L, hd]
    let split = |g: &mut Graph, which: usize| {
        let s = g.select(qkv, 0, &[which]);
        g.reshape(s, &[n, heads, l, hd])
    };
    let q = split(g, 0);
    let k = split(g, 1);
    let v = split(g, 2);
    let q = g.scale(q, 1.0 / (hd as f64).sqrt());
    let kt = g.permute(k, &[0, 1, 3, 2]);
    let scores = g.bmm(q, kt);
    let weights = g.softmax(scores, 3);
    let ctx = g.bmm(weights, v);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(ctx, &[n, l, c]);
    let proj_w = bound.var(&format!("{prefix}.attn.proj.weight"));
    let proj_b = bound.var(&format!("{prefix}.attn.proj.bias"));
    g.affine(ctx, proj_w, proj_b)
}

/// One pre-norm transformer block: `x += attn(LN(x)); x += mlp(LN(x))`.
fn transformer_block(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Var {
    let g1 = bound.var(&format!("{prefix}.ln1.gamma"));
    let b1 = bound.var(&format!("{prefix}.ln1.beta"));
    let normed = g.layer_norm(x, g1, b1, LN_EPS);
    let att = attention(g, bound, prefix, normed, heads);
    let x = g.add(x, att);
    let g2 = bound.var(&format!("{prefix}.ln2.gamma"));
    let b2 = bound.var(&format!("{prefix}.ln2.beta"));
    let normed = g.layer_norm(x, g2, b2, LN_EPS);
    let w1 = bound.var(&format!("{prefix}.mlp.fc1.weight"));
    let c1 = bound.var(&format!("{prefix}.mlp.fc1.bias"));
    let h = g.affine(normed, w1, c1);
    let h = g.gelu(h);
    let w2 = bound.var(&format!("{prefix}.mlp.fc2.weight"));
    let c2 = bound.var(&format!("{prefix}.mlp.fc2.bias"));
    let m = g.affine(h, w2, c2);
    g.add(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Precision;
    use ndarray::IxDyn;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            patch: 8,
            in_channels: 3,
            encoder_width: 16,
            encoder_depth: 2,
            encoder_heads: 2,
            decoder_width: 8,
            decoder_depth: 1,
            cls_proj_dim: 8,
            mask_ratio: 0.5,
        }
    }

    fn rand_pixels(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Array {
        let mut r = rng::seeded(seed);
        use rand::Rng;
        Array::from_shape_simple_fn(IxDyn(&[n, h, w, c]), || r.gen_range(0.0..1.0))
    }

    #[test]
    fn patchify_round_trip_is_exact() {
        let px = rand_pixels(2, 16, 16, 3, 1);
        let patches = patchify(&px, 8).unwrap();
        assert_eq!(patches.shape(), &[2, 4, 192]);
        let back = unpatchify(&patches, 8, 3).unwrap();
        assert_eq!(px, back);
    }

    #[test]
    fn patchify_counts_match_grid_arithmetic() {
        let px = rand_pixels(1, 32, 32, 1, 2);
        assert_eq!(patchify(&px, 16).unwrap().shape()[1], 4);
        let err = patchify(&px, 5).unwrap_err();
        assert!(err.to_string().contains("not divisible"));
    }

    #[test]
    fn position_row_zero_alternates_zero_one() {
        let pe = sinusoidal_positions(5, 6).unwrap();
        for i in 0..3 {
            assert_eq!(pe[[0, 2 * i]], 0.0);
            assert_eq!(pe[[0, 2 * i + 1]], 1.0);
        }
        assert!(sinusoidal_positions(5, 7).is_err());
    }

    #[test]
    fn position_rows_are_distinct_and_bounded() {
        let pe = sinusoidal_positions(256, 32).unwrap();
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        for p in 0..256 {
            for q in (p + 1)..256 {
                let same = (0..32).all(|i| (pe[[p, i]] - pe[[q, i]]).abs() < 1e-12);
                assert!(!same, "rows {p} and {q} coincide");
            }
        }
    }

    #[test]
    fn mask_plan_partitions_for_many_seeds() {
        for seed in 0..1000u64 {
            let plan = MaskPlan::from_seed(49, 0.75, seed).unwrap();
            assert_eq!(plan.masked_idx.len(), 37); // round(36.75)
            let mut all: Vec<usize> = plan
                .kept_idx
                .iter()
                .chain(&plan.masked_idx)
                .cloned()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..49).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mask_plan_is_seed_deterministic_and_guarded() {
        let a = MaskPlan::from_seed(196, 0.75, 9).unwrap();
        let b = MaskPlan::from_seed(196, 0.75, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.masked_idx.len(), 147);
        assert!(MaskPlan::from_seed(4, 0.95, 0).is_err()); // rounds to all 4
        assert!(MaskPlan::from_seed(4, 0.05, 0).is_err()); // rounds to 0
    }

    #[test]
    fn depth_zero_encoder_returns_tokens_unchanged() {
        let mut cfg = tiny_cfg();
        cfg.encoder_depth = 0;
        let bb = Backbone::new(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::seeded(3);
        bb.init_params(&mut store, &mut r);
        let mut g = Graph::new(Precision::Double);
        let bound = store.bind(&mut g);
        let px = rand_pixels(2, 16, 16, 3, 4);
        let patches = g.constant(patchify(&px, 8).unwrap());
        let tokens = bb.embed_patches(&mut g, &bound, patches).unwrap();
        let enc = bb.encode(&mut g, &bound, tokens, true).unwrap();
        let out = g.value(enc.tokens);
        assert_eq!(out.shape(), &[2, 5, 16]);
        let body = out.slice(ndarray::s![.., 1.., ..]);
        assert_eq!(body.into_dyn().to_owned(), g.value(tokens).to_owned());
        assert_eq!(g.shape(enc.cls_embedding), &[2, 8]);
    }

    #[test]
    fn single_token_single_head_matches_hand_attention() {
        // With one token, softmax over the single key is exactly 1, so the
        // block output is x + proj(v(LN(x))), then the MLP residual. We
        // recompute that chain with plain ndarray arithmetic.
        let cfg = BackboneConfig {
            image_size: 8,
            patch: 8,
            in_channels: 1,
            encoder_width: 4,
            encoder_depth: 1,
            encoder_heads: 1,
            decoder_width: 4,
            decoder_depth: 1,
            cls_proj_dim: 2,
            mask_ratio: 0.5,
        };
        // mask_ratio invalid for δ1=1, but we bypass masking here.
        let bb = Backbone { cfg };
        let mut store = ParamStore::new();
        let mut r = rng::seeded(5);
        bb.init_params(&mut store, &mut r);
        let mut g = Graph::new(Precision::Double);
        let bound = store.bind(&mut g);
        let x0 = Array::from_shape_vec(IxDyn(&[1, 1, 4]), vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let tokens = g.constant(x0.clone());
        let enc = bb.encode(&mut g, &bound, tokens, false).unwrap();
        let got = g.value(enc.tokens).to_owned();

        let v2 = |name: &str| {
            store
                .get(name)
                .unwrap()
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        };
        let v1 = |name: &str| store.get(name).unwrap().iter().cloned().collect::<Vec<f64>>();
        let ln = |x: &[f64], gamma: &[f64], beta: &[f64]| {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * gamma[i] + beta[i])
                .collect::<Vec<f64>>()
        };
        let matvec = |m: &ndarray::Array2<f64>, x: &[f64], b: &[f64]| {
            (0..m.shape()[1])
                .map(|j| (0..m.shape()[0]).map(|i| x[i] * m[[i, j]]).sum::<f64>() + b[j])
                .collect::<Vec<f64>>()
        };
        let x: Vec<f64> = x0.iter().cloned().collect();
        let n1 = ln(
            &x,
            &v1("encoder.block0.ln1.gamma"),
            &v1("encoder.block0.ln1.beta"),
        );
        let qkv = matvec(
            &v2("encoder.block0.attn.qkv.weight"),
            &n1,
            &v1("encoder.block0.attn.qkv.bias"),
        );
        let v = &qkv[8..12]; // single head: attention weight 1 → context = v
        let proj = matvec(
            &v2("encoder.block0.attn.proj.weight"),
            v,
            &v1("encoder.block0.attn.proj.bias"),
        );
        let x1: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
        let n2 = ln(
            &x1,
            &v1("encoder.block0.ln2.gamma"),
            &v1("encoder.block0.ln2.beta"),
        );
        let h = matvec(
            &v2("encoder.block0.mlp.fc1.weight"),
            &n2,
            &v1("encoder.block0.mlp.fc1.bias"),
        );
        let gelu = |v: f64| {
            0.5 * v
                * (1.0
                    + (0.7978845608028654 * (v + 0.044715 * v * v * v)).tanh())
        };
        let h: Vec<f64> = h.into_iter().map(gelu).collect();
        let m = matvec(
            &v2("encoder.block0.mlp.fc2.weight"),
            &h,
            &v1("encoder.block0.mlp.fc2.bias"),
        );
        let expect: Vec<f64> = x1.iter().zip(&m).map(|(a, b)| a + b).collect();
        for (i, e) in expect.iter().enumerate() {
            assert!(
                (got[[0, 0, i]] - e).abs() < 1e-12,
                "channel {i}: {} vs {e}",
                got[[0, 0, i]]
            );
        }
    }

    #[test]
    fn permuting_tokens_and_positions_leaves_cls_unchanged() {
        let bb = Backbone::new(tiny_cfg()).unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::seeded(8);
        bb.init_params(&mut store, &mut r);
        let px = rand_pixels(1, 16, 16, 3, 9);
        let patches = patchify(&px, 8).unwrap();
        let pe = sinusoidal_positions(4, 16).unwrap();

        let run = |order: &[usize]| {
            let mut g = Graph::new(Precision::Double);
            let bound = store.bind(&mut g);
            let pv = g.constant(patches.clone());
            let w = bound.var("encoder.patch_embed.weight");
            let b = bound.var("encoder.patch_embed.bias");
            let tok = g.affine(pv, w, b);
            let pev = g.constant(pe.clone());
            let tok = g.add(tok, pev);
            let tok = g.select(tok, 1, order); // permute tokens + their PE together
            let enc = bb.encode(&mut g, &bound, tok, true).unwrap();
            g.value(enc.cls_embedding).to_owned()
        };
        let base = run(&[0, 1, 2, 3]);
        let swapped = run(&[0, 3, 2, 1]);
        for (a, b) in base.iter().zip(swapped.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn encoder_outputs_are_finite_under_default_init() {
        let bb = Backbone::new(tiny_cfg()).unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::seeded(11);
        bb.init_params(&mut store, &mut r);
        let mut g = Graph::new(Precision::Double);
        let bound = store.bind(&mut g);
        let extreme = Array::from_shape_simple_fn(IxDyn(&[2, 4, 192]), {
            let mut r = rng::seeded(12);
            move || {
                use rand::Rng;
                r.gen_range(-10.0..10.0)
            }
        });
        let pv = g.constant(extreme);
        let tok = bb.embed_patches(&mut g, &bound, pv).unwrap();
        let enc = bb.encode(&mut g, &bound, tok, true).unwrap();
        assert!(g.value(enc.tokens).iter().all(|v| v.is_finite()));
        assert!(g.value(enc.cls_embedding).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let bb = Backbone::new(tiny_cfg()).unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::seeded(21);
        bb.init_params(&mut store, &mut r);
        let px = rand_pixels(2, 16, 16, 3, 22);
        let run = || {
            let mut g = Graph::new(Precision::Double);
            let bound = store.bind(&mut g);
            let pv = g.constant(patchify(&px, 8).unwrap());
            let tok = bb.embed_patches(&mut g, &bound, pv).unwrap();
            let plan = MaskPlan::from_seed(4, 0.5, 77).unwrap();
            let kept = bb.apply_mask(&mut g, tok, &plan).unwrap();
            let enc = bb.encode(&mut g, &bound, kept, true).unwrap();
            let recon = bb.decode(&mut g, &bound, enc.tokens, &plan).unwrap();
            (
                g.value(enc.cls_embedding).to_owned(),
                g.value(recon).to_owned(),
            )
        };
        let (a1, r1) = run();
        let (a2, r2) = run();
        assert_eq!(a1, a2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn decode_inserts_mask_token_at_masked_rows() {
        // Depth-0 decoder, head forced to identity: a masked row equals
        // mask_token + its decoder position row, normalized — so after
        // subtracting the position table, all masked rows coincide.
        let mut cfg = tiny_cfg();
        cfg.decoder_depth = 0;
        cfg.decoder_width = 8;
        let bb = Backbone::new(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::seeded(31);
        bb.init_params(&mut store, &mut r);
        // Identity head and identity final norm require matching widths:
        // patch_dim(192) != decoder_width(8), so head here maps 8 -> 8 by
        // swapping in identity-shaped arrays for the check.
        *store.get_mut("decoder.head.weight").unwrap() = {
            let mut eye = params::zeros(&[8, 8]);
            for i in 0..8 {
                eye[[i, i]] = 1.0;
            }
            eye
        };
        *store.get_mut("decoder.head.bias").unwrap() = params::zeros(&[8]);

        let mut g = Graph::new(Precision::Double);
        let bound = store.bind(&mut g);
        let px = rand_pixels(1, 16, 16, 3, 32);
        let pv = g.constant(patchify(&px, 8).unwrap());
        let tok = bb.embed_patches(&mut g, &bound, pv).unwrap();
        let plan = MaskPlan::from_seed(4, 0.5, 5).unwrap();
        let kept = bb.apply_mask(&mut g, tok, &plan).unwrap();
        let enc = bb.encode(&mut g, &bound, kept, true).unwrap();
        let out = bb.decode(&mut g, &bound, enc.tokens, &plan).unwrap();
        let val = g.value(out);
        let pe = sinusoidal_positions(4, 8).unwrap();
        let gamma = store.get("decoder.norm.gamma").unwrap();
        let beta = store.get("decoder.norm.beta").unwrap();
        let mask_token = store.get("decoder.mask_token").unwrap();
        // Expected masked row: LN(mask_token + pe[idx]) with stored affine.
        for &mi in &plan.masked_idx {
            let row: Vec<f64> = (0..8).map(|j| mask_token[[j]] + pe[[mi, j]]).collect();
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for j in 0..8 {
                let expect =
                    (row[j] - mean) / (var + LN_EPS).sqrt() * gamma[[j]] + beta[[j]];
                assert!(
                    (val[[0, mi, j]] - expect).abs() < 1e-12,
                    "masked row {mi} channel {j}"
                );
            }
        }
    }

    #[test]
    fn decode_rejects_mismatched_plan() {
        let bb = Backbone::new(tiny_cfg()).unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::seeded(41);
        bb.init_params(&mut store, &mut r);
        let mut g = Graph::new(Precision::Double);
        let bound = store.bind(&mut g);
        let px = rand_pixels(1, 16, 16, 3, 42);
        let pv = g.constant(patchify(&px, 8).unwrap());
        let tok = bb.embed_patches(&mut g, &bound, pv).unwrap();
        let plan = MaskPlan::from_seed(4, 0.5, 5).unwrap();
        let kept = bb.apply_mask(&mut g, tok, &plan).unwrap();
        let enc = bb.encode(&mut g, &bound, kept, true).unwrap();
        let bogus = MaskPlan::from_seed(4, 0.25, 5).unwrap(); // keeps 3, not 2
        assert!(bb.decode(&mut g, &bound, enc.tokens, &bogus).is_err());
    }

    #[test]
    fn gradients_flow_to_mask_token_and_encoder() {
        let bb = Backbone::new(tiny_cfg()).unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::seeded(51);
        bb.init_params(&mut store, &mut r);
        let mut g = Graph::new(Precision::Double);
        let bound = store.bind(&mut g);
        let px = rand_pixels(2, 16, 16, 3, 52);
        let pv = g.constant(patchify(&px, 8).unwrap());
        let tok = bb.embed_patches(&mut g, &bound, pv).unwrap();
        let plan = MaskPlan::from_seed(4, 0.5, 6).unwrap();
        let kept = bb.apply_mask(&mut g, tok, &plan).unwrap();
        let enc = bb.encode(&mut g, &bound, kept, true).unwrap();
        let recon = bb.decode(&mut g, &bound, enc.tokens, &plan).unwrap();
        let sq = g.square(recon);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        let gm = grads.get(bound.var("decoder.mask_token")).unwrap();
        assert!(gm.iter().any(|v| v.abs() > 0.0));
        let ge = grads.get(bound.var("encoder.patch_embed.weight")).unwrap();
        assert!(ge.iter().any(|v| v.abs() > 0.0));
        let gc = grads.get(bound.var("encoder.cls_token")).unwrap();
        assert!(gc.iter().all(|v| v.is_finite()));
    }
}
