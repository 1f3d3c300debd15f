//! Forward pass: patch embedding, pre-norm encoder blocks with token
//! aggregation between attention and FFN, and whole-model tracing.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{
    gelu, layernorm, linear, GeluCache, LayerNormCache, LinearCache, Shared,
};
use crate::tensor::Tensor;
use crate::tokenagg::{
    apply_merge, bipartite_soft_matching, similarity_scores, MergeCache, MergePlan, TokenBatch,
};
use crate::vit::{effective_block_ln, effective_final_ln, TunableParams, ViTParams};

/// Per-forward aggregation setting: merge `r` token pairs at every layer
/// where that is feasible. `r = 0` disables aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MergeConfig {
    pub r: usize,
}

// ── patch embedding ─────────────────────────────────────────────────────────

/// Opaque cache from `patch_embed`, consumed by the backward pass.
#[derive(Debug)]
pub struct PatchEmbedCache {
    pub(crate) proj: LinearCache,
}

/// Cuts images into non-overlapping patches, projects them to the hidden
/// dimension, and prepends the [CLS] token. Row 0 of each sequence is
/// `cls_embed + delta + pos[0]` (delta is zero without an adaptation state);
/// image rows get their positional embedding. All token sizes start at 1.
pub fn patch_embed(
    images: &Tensor,
    params: &ViTParams,
    state: Option<&TunableParams>,
) -> Result<(TokenBatch, PatchEmbedCache)> {
    let cfg = &params.config;
    let expected = [cfg.channels, cfg.image_size, cfg.image_size];
    if images.rank() != 4 || images.shape()[1..] != expected {
        return Err(Error::Config(format!(
            "images shaped {:?} do not match config [B, {}, {}, {}]",
            images.shape(),
            expected[0],
            expected[1],
            expected[2]
        )));
    }
    let b = images.shape()[0];
    if b == 0 {
        return Err(Error::Config("empty image batch".into()));
    }
    let (ps, side) = (cfg.patch_size, cfg.image_size / cfg.patch_size);
    let (np, pd, d) = (cfg.num_patches(), cfg.patch_dim(), cfg.hidden_dim);
    let (h, w) = (cfg.image_size, cfg.image_size);

    // Patch rows ordered (batch, grid-row, grid-col); values channel-major.
    let mut patches = vec![0.0f32; b * np * pd];
    let img = images.data();
    for bi in 0..b {
        for py in 0..side {
            for px in 0..side {
                let row = &mut patches[(bi * np + py * side + px) * pd..][..pd];
                for c in 0..cfg.channels {
                    for yy in 0..ps {
                        for xx in 0..ps {
                            let y = py * ps + yy;
                            let x = px * ps + xx;
                            row[c * ps * ps + yy * ps + xx] =
                                img[((bi * cfg.channels + c) * h + y) * w + x];
                        }
                    }
                }
            }
        }
    }
    let patches: Shared = Arc::new(Tensor::from_raw(vec![b * np, pd], patches));
    let (proj_out, proj) = linear(&patches, &params.patch_w, Some(&params.patch_b))?;

    let seq = np + 1;
    let mut tokens = vec![0.0f32; b * seq * d];
    let pos = params.pos.data();
    let cls = params.cls.data();
    let delta = state.map(|s| s.delta.data());
    for bi in 0..b {
        let row0 = &mut tokens[bi * seq * d..][..d];
        for j in 0..d {
            row0[j] = cls[j] + delta.map_or(0.0, |dl| dl[j]) + pos[j];
        }
        for p in 0..np {
            let dst = &mut tokens[(bi * seq + p + 1) * d..][..d];
            let src = proj_out.row(bi * np + p);
            let pr = &pos[(p + 1) * d..(p + 2) * d];
            for j in 0..d {
                dst[j] = src[j] + pr[j];
            }
        }
    }
    let batch = TokenBatch::new(
        Tensor::from_raw(vec![b, seq, d], tokens),
        Tensor::full(&[b, seq], 1.0),
    )?;
    Ok((batch, PatchEmbedCache { proj }))
}

// ── attention ───────────────────────────────────────────────────────────────

#[derive(Debug)]
pub(crate) struct AttnTensors {
    pub(crate) q: Tensor,
    pub(crate) k: Tensor,
    pub(crate) v: Tensor,
    /// Attention probabilities, `[B, H, N, N]`.
    pub(crate) probs: Tensor,
}

fn gather_head(src: &Tensor, bi: usize, head: usize, dh: usize, out: &mut [f32]) {
    let (n, d) = (src.shape()[1], src.shape()[2]);
    let data = src.data();
    for i in 0..n {
        let row = &data[((bi * n + i) * d + head * dh)..][..dh];
        out[i * dh..(i + 1) * dh].copy_from_slice(row);
    }
}

fn scatter_head_add(dst: &mut Tensor, bi: usize, head: usize, dh: usize, src: &[f32]) {
    let (n, d) = (dst.shape()[1], dst.shape()[2]);
    let data = dst.data_mut();
    for i in 0..n {
        let row = &mut data[((bi * n + i) * d + head * dh)..][..dh];
        for (o, &v) in row.iter_mut().zip(&src[i * dh..(i + 1) * dh]) {
            *o += v;
        }
    }
}

/// Multi-head scaled dot-product attention with proportional attention:
/// every key's logit carries an additive `ln(size)` so a merged token
/// attends like the group it stands for.
fn attention(q: Tensor, k: Tensor, v: Tensor, sizes: &Tensor, heads: usize) -> Result<(Tensor, AttnTensors)> {
    let (b, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = Tensor::zeros(&[b, heads, n, n]);
    let mut out = Tensor::zeros(&[b, n, d]);
    let mut qs = vec![0.0f32; n * dh];
    let mut ks = vec![0.0f32; n * dh];
    let mut vs = vec![0.0f32; n * dh];
    let mut os = vec![0.0f32; n * dh];
    let mut log_sizes = vec![0.0f32; n];
    for bi in 0..b {
        for (ls, &s) in log_sizes.iter_mut().zip(sizes.row(bi)) {
            *ls = s.ln();
        }
        for hd in 0..heads {
            gather_head(&q, bi, hd, dh, &mut qs);
            gather_head(&k, bi, hd, dh, &mut ks);
            gather_head(&v, bi, hd, dh, &mut vs);
            let pr = &mut probs.data_mut()[(bi * heads + hd) * n * n..][..n * n];
            crate::numerics::gemm_nt(&qs, &ks, pr, n, dh, n);
            for i in 0..n {
                let row = &mut pr[i * n..(i + 1) * n];
                for (l, &ls) in row.iter_mut().zip(&log_sizes) {
                    *l = *l * scale + ls;
                }
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                for l in row.iter_mut() {
                    *l = crate::numerics::fast_exp(*l - max);
                }
                let inv = 1.0 / crate::numerics::sum16(row);
                for l in row.iter_mut() {
                    *l *= inv;
                }
            }
            os.fill(0.0);
            crate::numerics::gemm_nn(pr, &vs, &mut os, n, n, dh);
            scatter_head_add(&mut out, bi, hd, dh, &os);
        }
    }
    out.check_finite("attention")?;
    Ok((out, AttnTensors { q, k, v, probs }))
}

// ── encoder block ───────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct BlockCache {
    pub(crate) layer_idx: usize,
    pub(crate) had_delta: bool,
    pub(crate) in_seq: usize,
    pub(crate) ln1: LayerNormCache,
    pub(crate) q_lin: LinearCache,
    pub(crate) k_lin: LinearCache,
    pub(crate) v_lin: LinearCache,
    pub(crate) attn: AttnTensors,
    pub(crate) proj: LinearCache,
    pub(crate) merge: Option<MergeCache>,
    pub(crate) ln2: LayerNormCache,
    pub(crate) fc1: LinearCache,
    pub(crate) gelu: GeluCache,
    pub(crate) fc2: LinearCache,
}

enum PlanChoice<'a> {
    /// Compute a fresh plan for `r` merges (`0` = no merge).
    Auto(usize),
    /// Reuse a previously computed plan (replay / frozen-structure paths).
    Fixed(Option<&'a MergePlan>),
}

fn block_forward_impl(
    batch: &TokenBatch,
    layer_idx: usize,
    params: &ViTParams,
    state: Option<&TunableParams>,
    choice: PlanChoice,
) -> Result<(TokenBatch, Option<MergePlan>, BlockCache)> {
    let cfg = &params.config;
    let (b, n, d) = (batch.batch(), batch.seq_len(), batch.dim());
    if d != cfg.hidden_dim {
        return Err(Error::shape(format!(
            "block {layer_idx}: token dim {d} vs hidden_dim {}",
            cfg.hidden_dim
        )));
    }
    if layer_idx >= cfg.num_layers {
        return Err(Error::Config(format!(
            "layer index {layer_idx} out of range for {} layers",
            cfg.num_layers
        )));
    }
    let bp = &params.blocks[layer_idx];
    let (ln1p, ln2p) = effective_block_ln(params, state, layer_idx);

    // Shallow-layer [CLS] bias enters at the block input.
    let delta_l = state.and_then(|s| s.delta_layers.get(&layer_idx));
    let mut x0 = batch.tokens.clone();
    if let Some(dl) = delta_l {
        if dl.len() != d {
            return Err(Error::shape("delta_l dimension mismatch"));
        }
        for bi in 0..b {
            let row = &mut x0.data_mut()[bi * n * d..][..d];
            for (o, &v) in row.iter_mut().zip(dl.data()) {
                *o += v;
            }
        }
    }
    let x0: Shared = Arc::new(x0);

    let (x_norm, ln1) = layernorm(&x0, &ln1p.gamma, &ln1p.beta, cfg.ln_eps)?;
    let x_norm: Shared = Arc::new(x_norm);
    let (q, q_lin) = linear(&x_norm, &bp.wq, Some(&bp.bq))?;
    let (k, k_lin) = linear(&x_norm, &bp.wk, Some(&bp.bk))?;
    let (v, v_lin) = linear(&x_norm, &bp.wv, Some(&bp.bv))?;
    let (attn_out, attn) = attention(q, k, v, &batch.sizes, cfg.num_heads)?;
    let attn_out: Shared = Arc::new(attn_out);
    let (proj_out, proj) = linear(&attn_out, &bp.wo, Some(&bp.bo))?;
    let mut x1 = (*x0).clone();
    x1.add_assign(&proj_out)?;

    // Aggregation sits between attention and FFN so the FFN sees the
    // shortened sequence.
    let n_img = n - 1;
    let plan = match choice {
        PlanChoice::Auto(0) => None,
        PlanChoice::Auto(r) => {
            if r > n_img / 2 {
                return Err(Error::Schedule(format!(
                    "layer {layer_idx}: r={r} exceeds floor(({n} - 1)/2) candidates"
                )));
            }
            // Merge decisions read the attention keys, averaged over heads.
            let keys = head_mean(&attn.k, cfg.num_heads);
            let scores = similarity_scores(&keys)?;
            Some(bipartite_soft_matching(&scores, r, layer_idx)?)
        }
        PlanChoice::Fixed(p) => {
            if let Some(plan) = p {
                plan.validate(n_img)?;
            }
            p.cloned()
        }
    };
    let merged = TokenBatch::new(x1, batch.sizes.clone())?;
    let (after_merge, merge_cache) = match &plan {
        Some(p) => {
            let (tb, mc) = apply_merge(&merged, p)?;
            (tb, Some(mc))
        }
        None => (merged, None),
    };

    let x2: Shared = Arc::new(after_merge.tokens);
    let (x2_norm, ln2) = layernorm(&x2, &ln2p.gamma, &ln2p.beta, cfg.ln_eps)?;
    let x2_norm: Shared = Arc::new(x2_norm);
    let (h1, fc1) = linear(&x2_norm, &bp.w1, Some(&bp.b1))?;
    let (h1a, gelu_cache) = gelu(&h1)?;
    let h1a: Shared = Arc::new(h1a);
    let (ffn_out, fc2) = linear(&h1a, &bp.w2, Some(&bp.b2))?;
    let mut x3 = (*x2).clone();
    x3.add_assign(&ffn_out)?;

    let out = TokenBatch::new(x3, after_merge.sizes)?;
    let cache = BlockCache {
        layer_idx,
        had_delta: delta_l.is_some(),
        in_seq: n,
        ln1,
        q_lin,
        k_lin,
        v_lin,
        attn,
        proj,
        merge: merge_cache,
        ln2,
        fc1,
        gelu: gelu_cache,
        fc2,
    };
    Ok((out, plan, cache))
}

/// One pre-norm encoder block: `x += MHSA(LN1(x))`, optional token merge,
/// `x += FFN(LN2(x))`. Requesting more merges than `floor((N - 1)/2)` is a
/// schedule error.
pub fn block_forward(
    batch: &TokenBatch,
    layer_idx: usize,
    params: &ViTParams,
    state: Option<&TunableParams>,
    merge: MergeConfig,
) -> Result<(TokenBatch, Option<MergePlan>, BlockCache)> {
    block_forward_impl(batch, layer_idx, params, state, PlanChoice::Auto(merge.r))
}

/// Same block, but replaying a fixed merge plan instead of recomputing one.
/// Finite-difference checks rely on this to keep the discrete structure
/// constant under parameter perturbations.
pub fn block_forward_with_plan(
    batch: &TokenBatch,
    layer_idx: usize,
    params: &ViTParams,
    state: Option<&TunableParams>,
    plan: Option<&MergePlan>,
) -> Result<(TokenBatch, Option<MergePlan>, BlockCache)> {
    block_forward_impl(batch, layer_idx, params, state, PlanChoice::Fixed(plan))
}

/// Mean over heads of a `[B, N, d]` tensor, giving `[B, N, d/heads]`.
fn head_mean(t: &Tensor, heads: usize) -> Tensor {
    let (b, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let dh = d / heads;
    let mut out = vec![0.0f32; b * n * dh];
    let data = t.data();
    let inv = 1.0 / heads as f32;
    for row in 0..b * n {
        let src = &data[row * d..(row + 1) * d];
        let dst = &mut out[row * dh..(row + 1) * dh];
        for hd in 0..heads {
            for j in 0..dh {
                dst[j] += src[hd * dh + j];
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::from_raw(vec![b, n, dh], out)
}

// ── whole model ─────────────────────────────────────────────────────────────

/// Everything the backward pass and the adaptation loss need from one
/// forward traversal.
#[derive(Debug)]
pub struct ForwardTrace {
    /// Token count at the *input* of each layer (layer 0 sees N+1).
    pub token_counts: Vec<usize>,
    /// Post-block [CLS] features, `[B, hidden_dim]` per layer.
    pub layer_cls: Vec<Tensor>,
    /// Merge plan actually applied at each layer (`None` = no merge).
    pub plans: Vec<Option<MergePlan>>,
    /// Classification logits, `[B, num_classes]`.
    pub logits: Tensor,
    pub(crate) embed: PatchEmbedCache,
    pub(crate) blocks: Vec<BlockCache>,
    pub(crate) final_ln: LayerNormCache,
    pub(crate) head: LinearCache,
    pub(crate) batch_size: usize,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }
}

fn cls_rows(tokens: &Tensor) -> Tensor {
    let (b, n, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let mut out = vec![0.0f32; b * d];
    for bi in 0..b {
        out[bi * d..(bi + 1) * d].copy_from_slice(&tokens.data()[bi * n * d..][..d]);
    }
    Tensor::from_raw(vec![b, d], out)
}

fn model_forward_impl(
    images: &Tensor,
    params: &ViTParams,
    state: Option<&TunableParams>,
    mut plan_for_layer: impl FnMut(usize, usize) -> Result<PlanOrAuto>,
    counter: Option<&mut u64>,
) -> Result<ForwardTrace> {
    params.config.validate()?;
    if let Some(c) = counter {
        *c += 1;
    }
    let cfg = &params.config;
    let (mut batch, embed) = patch_embed(images, params, state)?;
    let b = batch.batch();
    let mut token_counts = Vec::with_capacity(cfg.num_layers);
    let mut layer_cls = Vec::with_capacity(cfg.num_layers);
    let mut plans = Vec::with_capacity(cfg.num_layers);
    let mut blocks = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        token_counts.push(batch.seq_len());
        let choice = plan_for_layer(l, batch.seq_len())?;
        let (next, plan, cache) = match &choice {
            PlanOrAuto::Auto(r) => {
                block_forward_impl(&batch, l, params, state, PlanChoice::Auto(*r))?
            }
            PlanOrAuto::Fixed(p) => {
                block_forward_impl(&batch, l, params, state, PlanChoice::Fixed(p.as_ref()))?
            }
        };
        layer_cls.push(cls_rows(&next.tokens));
        plans.push(plan);
        blocks.push(cache);
        batch = next;
    }
    let final_cls: Shared = Arc::new(cls_rows(&batch.tokens));
    let flp = effective_final_ln(params, state);
    let (cls_norm, final_ln) = layernorm(&final_cls, &flp.gamma, &flp.beta, cfg.ln_eps)?;
    let cls_norm: Shared = Arc::new(cls_norm);
    let (logits, head) = linear(&cls_norm, &params.head_w, Some(&params.head_b))?;
    Ok(ForwardTrace {
        token_counts,
        layer_cls,
        plans,
        logits,
        embed,
        blocks,
        final_ln,
        head,
        batch_size: b,
    })
}

enum PlanOrAuto {
    Auto(usize),
    Fixed(Option<MergePlan>),
}

/// Full instrumented forward pass. Each call bumps `counter` by exactly one,
/// so protocol tests can assert how many traversals an adaptation step ran.
/// A layer where `merge.r` exceeds the candidate count simply does not merge.
pub fn model_forward(
    images: &Tensor,
    params: &ViTParams,
    state: Option<&TunableParams>,
    merge: MergeConfig,
    counter: Option<&mut u64>,
) -> Result<ForwardTrace> {
    model_forward_impl(
        images,
        params,
        state,
        |_l, seq| {
            let n_img = seq - 1;
            let r = if merge.r > 0 && merge.r <= n_img / 2 {
                merge.r
            } else {
                0
            };
            Ok(PlanOrAuto::Auto(r))
        },
        counter,
    )
}

/// Forward pass that replays a fixed per-layer plan list (from a previous
/// trace) instead of recomputing merge decisions.
pub fn model_forward_with_plans(
    images: &Tensor,
    params: &ViTParams,
    state: Option<&TunableParams>,
    plans: &[Option<MergePlan>],
    counter: Option<&mut u64>,
) -> Result<ForwardTrace> {
    if plans.len() != params.config.num_layers {
        return Err(Error::State(format!(
            "plan list covers {} layers, model has {}",
            plans.len(),
            params.config.num_layers
        )));
    }
    model_forward_impl(
        images,
        params,
        state,
        |l, _seq| Ok(PlanOrAuto::Fixed(plans[l].clone())),
        counter,
    )
}
