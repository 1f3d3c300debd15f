//! Backward passes. `model_backward` produces gradients for exactly the
//! test-time tunable set (LayerNorm affines, delta, per-layer delta_l);
//! `model_backward_train` produces the full parameter gradient for
//! pretraining. Frozen weights get no gradient storage on the tunable path.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{gelu_backward, layernorm_backward, linear_backward};
use crate::tensor::Tensor;
use crate::tokenagg::apply_merge_backward;
use crate::vit::forward::{AttnTensors, BlockCache, ForwardTrace};
use crate::vit::{
    effective_block_ln, effective_final_ln, LnPair, LnSet, TunableParams, ViTParams,
};

// ── loss-side inputs ────────────────────────────────────────────────────────

/// Upstream gradients flowing into the model: always a logits gradient, and
/// optionally a gradient on each layer's recorded [CLS] feature (used by the
/// feature-statistics alignment term).
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub logits: Tensor,
    /// Either empty (no feature-level loss) or one entry per layer.
    pub layer_cls: Vec<Option<Tensor>>,
}

impl LossGrads {
    pub fn from_logits(logits: Tensor) -> Self {
        LossGrads {
            logits,
            layer_cls: Vec::new(),
        }
    }
}

/// Gradients for the tunable set. LayerNorm gradients reuse the parameter
/// layout; `delta_layers` holds exactly the layers that carried a delta_l in
/// the adaptation state (absent key = zero gradient).
#[derive(Debug, Clone)]
pub struct GradSet {
    pub ln: LnSet,
    pub delta: Tensor,
    pub delta_layers: BTreeMap<usize, Tensor>,
}

// ── attention backward ──────────────────────────────────────────────────────

fn attention_backward(
    grad_out: &Tensor,
    attn: &AttnTensors,
    heads: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, n, d) = (attn.q.shape()[0], attn.q.shape()[1], attn.q.shape()[2]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = Tensor::zeros(&[b, n, d]);
    let mut dk = Tensor::zeros(&[b, n, d]);
    let mut dv = Tensor::zeros(&[b, n, d]);
    let mut qs = vec![0.0f32; n * dh];
    let mut ks = vec![0.0f32; n * dh];
    let mut vs = vec![0.0f32; n * dh];
    let mut gout = vec![0.0f32; n * dh];
    let mut dqs = vec![0.0f32; n * dh];
    let mut dks = vec![0.0f32; n * dh];
    let mut dvs = vec![0.0f32; n * dh];
    let mut dlog = vec![0.0f32; n * n];
    for bi in 0..b {
        for hd in 0..heads {
            gather(&attn.q, bi, hd, dh, &mut qs);
            gather(&attn.k, bi, hd, dh, &mut ks);
            gather(&attn.v, bi, hd, dh, &mut vs);
            gather(grad_out, bi, hd, dh, &mut gout);
            let pr = &attn.probs.data()[(bi * heads + hd) * n * n..][..n * n];

            // dprobs = gout . vs^T, then softmax backward row by row.
            dlog.fill(0.0);
            crate::numerics::gemm_nt(&gout, &vs, &mut dlog, n, dh, n);
            for i in 0..n {
                let p = &pr[i * n..(i + 1) * n];
                let dl = &mut dlog[i * n..(i + 1) * n];
                let mut dot = 0.0f32;
                for j in 0..n {
                    dot += dl[j] * p[j];
                }
                for j in 0..n {
                    // Fold in the logit scale here; the ln(size) term is
                    // constant with respect to the tokens.
                    dl[j] = (dl[j] - dot) * p[j] * scale;
                }
            }
            dvs.fill(0.0);
            crate::numerics::gemm_tn(pr, &gout, &mut dvs, n, n, dh);
            dqs.fill(0.0);
            crate::numerics::gemm_nn(&dlog, &ks, &mut dqs, n, n, dh);
            dks.fill(0.0);
            crate::numerics::gemm_tn(&dlog, &qs, &mut dks, n, n, dh);
            scatter_add(&mut dq, bi, hd, dh, &dqs);
            scatter_add(&mut dk, bi, hd, dh, &dks);
            scatter_add(&mut dv, bi, hd, dh, &dvs);
        }
    }
    dq.check_finite("attention_backward dq")?;
    Ok((dq, dk, dv))
}

fn gather(src: &Tensor, bi: usize, head: usize, dh: usize, out: &mut [f32]) {
    let (n, d) = (src.shape()[1], src.shape()[2]);
    let data = src.data();
    for i in 0..n {
        out[i * dh..(i + 1) * dh]
            .copy_from_slice(&data[((bi * n + i) * d + head * dh)..][..dh]);
    }
}

fn scatter_add(dst: &mut Tensor, bi: usize, head: usize, dh: usize, src: &[f32]) {
    let (n, d) = (dst.shape()[1], dst.shape()[2]);
    let data = dst.data_mut();
    for i in 0..n {
        let row = &mut data[((bi * n + i) * d + head * dh)..][..dh];
        for (o, &v) in row.iter_mut().zip(&src[i * dh..(i + 1) * dh]) {
            *o += v;
        }
    }
}

// ── block backward ──────────────────────────────────────────────────────────

pub struct BlockWeightGrads {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Gradients leaving one block: upstream token gradient, LayerNorm affine
/// gradients, the delta_l gradient when the block carried one, and weight
/// gradients when requested.
pub struct BlockBwd {
    pub dx: Tensor,
    pub ln1: LnPair,
    pub ln2: LnPair,
    pub delta_l: Option<Tensor>,
    pub weights: Option<Box<BlockWeightGrads>>,
}

pub fn block_backward(
    grad_out: &Tensor,
    cache: &BlockCache,
    params: &ViTParams,
    state: Option<&TunableParams>,
    need_weight_grads: bool,
) -> Result<BlockBwd> {
    let cfg = &params.config;
    let bp = &params.blocks[cache.layer_idx];
    let (ln1p, ln2p) = effective_block_ln(params, state, cache.layer_idx);

    // FFN branch of x3 = x2 + FFN(LN2(x2)).
    let fc2 = linear_backward(grad_out, &cache.fc2, &bp.w2, need_weight_grads)?;
    let dh1 = gelu_backward(&fc2.x, &cache.gelu)?;
    let fc1 = linear_backward(&dh1, &cache.fc1, &bp.w1, need_weight_grads)?;
    let (dx2_ffn, dg2, db2) = layernorm_backward(&fc1.x, &cache.ln2, &ln2p.gamma)?;
    let mut dx2 = grad_out.clone();
    dx2.add_assign(&dx2_ffn)?;

    // Undo the merge: gradient flows back to sources and destinations with
    // the same size weights the forward mean used.
    let dx1 = match &cache.merge {
        Some(mc) => apply_merge_backward(&dx2, mc)?,
        None => dx2,
    };

    // Attention branch of x1 = x0 + proj(attn(LN1(x0))).
    let proj = linear_backward(&dx1, &cache.proj, &bp.wo, need_weight_grads)?;
    let (dq, dk, dv) = attention_backward(&proj.x, &cache.attn, cfg.num_heads)?;
    let crate::numerics::LinearGrads {
        x: mut dxn,
        w: qw,
        b: qb,
    } = linear_backward(&dq, &cache.q_lin, &bp.wq, need_weight_grads)?;
    let kg = linear_backward(&dk, &cache.k_lin, &bp.wk, need_weight_grads)?;
    let vg = linear_backward(&dv, &cache.v_lin, &bp.wv, need_weight_grads)?;
    dxn.add_assign(&kg.x)?;
    dxn.add_assign(&vg.x)?;
    let (dx0_attn, dg1, db1) = layernorm_backward(&dxn, &cache.ln1, &ln1p.gamma)?;
    let mut dx0 = dx1;
    dx0.add_assign(&dx0_attn)?;

    let delta_l = if cache.had_delta {
        Some(sum_cls_rows(&dx0))
    } else {
        None
    };
    let weights = if need_weight_grads {
        let take = |g: crate::numerics::LinearGrads| (g.w.unwrap(), g.b.unwrap());
        let (wk, bk) = take(kg);
        let (wv, bv) = take(vg);
        let (wo, bo) = take(proj);
        let (w1, b1) = take(fc1);
        let (w2, b2) = take(fc2);
        Some(Box::new(BlockWeightGrads {
            wq: qw.unwrap(),
            bq: qb.unwrap(),
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            w1,
            b1,
            w2,
            b2,
        }))
    } else {
        None
    };
    Ok(BlockBwd {
        dx: dx0,
        ln1: LnPair {
            gamma: dg1,
            beta: db1,
        },
        ln2: LnPair {
            gamma: dg2,
            beta: db2,
        },
        delta_l,
        weights,
    })
}

/// Sum of the [CLS]-row gradients over the batch, `[d]`.
fn sum_cls_rows(d_tokens: &Tensor) -> Tensor {
    let (b, n, d) = (
        d_tokens.shape()[0],
        d_tokens.shape()[1],
        d_tokens.shape()[2],
    );
    let mut out = vec![0.0f32; d];
    for bi in 0..b {
        let row = &d_tokens.data()[bi * n * d..][..d];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_raw(vec![d], out)
}

fn add_to_cls_rows(d_tokens: &mut Tensor, grad: &Tensor) -> Result<()> {
    let (b, n, d) = (
        d_tokens.shape()[0],
        d_tokens.shape()[1],
        d_tokens.shape()[2],
    );
    if grad.shape() != [b, d] {
        return Err(Error::State(format!(
            "layer [CLS] gradient shaped {:?}, trace expects [{b}, {d}]",
            grad.shape()
        )));
    }
    for bi in 0..b {
        let row = &mut d_tokens.data_mut()[bi * n * d..][..d];
        for (o, &v) in row.iter_mut().zip(grad.row(bi)) {
            *o += v;
        }
    }
    Ok(())
}

// ── spine shared by both backward entry points ──────────────────────────────

struct SpineOut {
    per_layer_ln: Vec<(LnPair, LnPair)>,
    final_ln: LnPair,
    delta_layers: BTreeMap<usize, Tensor>,
    /// Gradient on the embedding-output tokens, `[B, N+1, d]`.
    d_embed_tokens: Tensor,
    blocks: Vec<Option<Box<BlockWeightGrads>>>,
    d_head_w: Option<Tensor>,
    d_head_b: Option<Tensor>,
}

fn backward_spine(
    trace: &ForwardTrace,
    loss: &LossGrads,
    params: &ViTParams,
    state: Option<&TunableParams>,
    need_weight_grads: bool,
) -> Result<SpineOut> {
    let cfg = &params.config;
    let el = cfg.num_layers;
    if trace.blocks.len() != el {
        return Err(Error::State(format!(
            "trace has {} blocks, params describe {el} layers",
            trace.blocks.len()
        )));
    }
    if loss.logits.shape() != trace.logits.shape() {
        return Err(Error::State(format!(
            "logits gradient shaped {:?}, trace logits {:?}",
            loss.logits.shape(),
            trace.logits.shape()
        )));
    }
    if !loss.layer_cls.is_empty() && loss.layer_cls.len() != el {
        return Err(Error::State(format!(
            "layer [CLS] gradients cover {} layers, model has {el}",
            loss.layer_cls.len()
        )));
    }

    let head = linear_backward(&loss.logits, &trace.head, &params.head_w, need_weight_grads)?;
    let flp = effective_final_ln(params, state);
    let (d_final_cls, dgf, dbf) = layernorm_backward(&head.x, &trace.final_ln, &flp.gamma)?;

    let b = trace.batch_size;
    let d = cfg.hidden_dim;
    let last_n = trace.blocks[el - 1].in_seq
        - trace.plans[el - 1].as_ref().map_or(0, |p| p.r());
    let mut d_tokens = Tensor::zeros(&[b, last_n, d]);
    add_to_cls_rows(&mut d_tokens, &d_final_cls)?;

    let mut per_layer_ln: Vec<(LnPair, LnPair)> = Vec::with_capacity(el);
    let mut delta_layers = BTreeMap::new();
    let mut blocks: Vec<Option<Box<BlockWeightGrads>>> = Vec::with_capacity(el);
    for l in (0..el).rev() {
        if let Some(Some(g)) = loss.layer_cls.get(l) {
            add_to_cls_rows(&mut d_tokens, g)?;
        }
        let bwd = block_backward(&d_tokens, &trace.blocks[l], params, state, need_weight_grads)?;
        per_layer_ln.push((bwd.ln1, bwd.ln2));
        if let Some(g) = bwd.delta_l {
            delta_layers.insert(l, g);
        }
        blocks.push(bwd.weights);
        d_tokens = bwd.dx;
    }
    per_layer_ln.reverse();
    blocks.reverse();

    Ok(SpineOut {
        per_layer_ln,
        final_ln: LnPair {
            gamma: dgf,
            beta: dbf,
        },
        delta_layers,
        d_embed_tokens: d_tokens,
        blocks,
        d_head_w: head.w,
        d_head_b: head.b,
    })
}

// ── public entry points ─────────────────────────────────────────────────────

/// Backward pass over the tunable set only: all LayerNorm affines, delta,
/// and each delta_l present in the adaptation state. Frozen weights are not
/// differentiated and get no gradient storage.
pub fn model_backward(
    trace: &ForwardTrace,
    loss: &LossGrads,
    params: &ViTParams,
    state: &TunableParams,
) -> Result<GradSet> {
    let spine = backward_spine(trace, loss, params, Some(state), false)?;
    let delta = sum_cls_rows(&spine.d_embed_tokens);
    Ok(GradSet {
        ln: LnSet {
            per_layer: spine.per_layer_ln,
            final_ln: spine.final_ln,
        },
        delta,
        delta_layers: spine.delta_layers,
    })
}

/// Full-parameter backward pass for pretraining (no adaptation state).
/// Returns gradients in a `ViTParams`-shaped holder.
pub fn model_backward_train(
    trace: &ForwardTrace,
    d_logits: &Tensor,
    params: &ViTParams,
) -> Result<ViTParams> {
    let loss = LossGrads::from_logits(d_logits.clone());
    let spine = backward_spine(trace, &loss, params, None, true)?;
    let cfg = &params.config;
    let mut grads = ViTParams::zeros(cfg)?;

    // Embedding-side gradients.
    let dt = &spine.d_embed_tokens;
    let (b, seq, d) = (dt.shape()[0], dt.shape()[1], dt.shape()[2]);
    let np = cfg.num_patches();
    grads.cls = sum_cls_rows(dt);
    for bi in 0..b {
        for i in 0..seq {
            let src = &dt.data()[(bi * seq + i) * d..][..d];
            let dst = &mut grads.pos.data_mut()[i * d..(i + 1) * d];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    let mut d_proj = vec![0.0f32; b * np * d];
    for bi in 0..b {
        for p in 0..np {
            d_proj[(bi * np + p) * d..][..d]
                .copy_from_slice(&dt.data()[(bi * seq + p + 1) * d..][..d]);
        }
    }
    let d_proj = Tensor::from_raw(vec![b * np, d], d_proj);
    let pe = linear_backward(&d_proj, &trace.embed.proj, &params.patch_w, true)?;
    grads.patch_w = pe.w.expect("weight gradients requested");
    grads.patch_b = pe.b.expect("bias gradients requested");

    for (l, wg) in spine.blocks.into_iter().enumerate() {
        let wg = wg.expect("weight gradients requested");
        let gb = &mut grads.blocks[l];
        gb.wq = wg.wq;
        gb.bq = wg.bq;
        gb.wk = wg.wk;
        gb.bk = wg.bk;
        gb.wv = wg.wv;
        gb.bv = wg.bv;
        gb.wo = wg.wo;
        gb.bo = wg.bo;
        gb.w1 = wg.w1;
        gb.b1 = wg.b1;
        gb.w2 = wg.w2;
        gb.b2 = wg.b2;
    }
    for (l, (ln1, ln2)) in spine.per_layer_ln.into_iter().enumerate() {
        grads.blocks[l].ln1 = ln1;
        grads.blocks[l].ln2 = ln2;
    }
    grads.final_ln = spine.final_ln;
    grads.head_w = spine.d_head_w.expect("weight gradients requested");
    grads.head_b = spine.d_head_b.expect("bias gradients requested");
    Ok(grads)
}
