//! Independent f64 reference forward pass used as a test oracle. Plain
//! nested loops, no code shared with the library kernels, so agreement is
//! meaningful. Finite differences taken through this reference are free of
//! f32 evaluation noise.

#![allow(dead_code)]

use std::collections::BTreeMap;

use etta::tensor::Tensor;
use etta::tokenagg::MergePlan;
use etta::vit::{TunableParams, ViTConfig, ViTParams};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

// ── f64 copies of parameters and tunables ───────────────────────────────────

pub struct RefModel {
    pub cfg: ViTConfig,
    tensors: BTreeMap<String, Vec<f64>>,
}

impl RefModel {
    pub fn from_params(p: &ViTParams) -> Self {
        let tensors = p
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.data().iter().map(|&v| v as f64).collect()))
            .collect();
        RefModel {
            cfg: p.config.clone(),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        self.tensors.get(name).unwrap_or_else(|| panic!("no tensor {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("no tensor {name}"))
    }
}

#[derive(Clone)]
pub struct RefState {
    pub delta: Vec<f64>,
    pub delta_layers: BTreeMap<usize, Vec<f64>>,
    /// Per layer: (ln1 gamma, ln1 beta, ln2 gamma, ln2 beta).
    pub ln: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>,
    pub final_gamma: Vec<f64>,
    pub final_beta: Vec<f64>,
}

impl RefState {
    pub fn from_tunables(s: &TunableParams) -> Self {
        let up = |t: &Tensor| -> Vec<f64> { t.data().iter().map(|&v| v as f64).collect() };
        RefState {
            delta: up(&s.delta),
            delta_layers: s.delta_layers.iter().map(|(&l, t)| (l, up(t))).collect(),
            ln: s
                .ln
                .per_layer
                .iter()
                .map(|(a, b)| (up(&a.gamma), up(&a.beta), up(&b.gamma), up(&b.beta)))
                .collect(),
            final_gamma: up(&s.ln.final_ln.gamma),
            final_beta: up(&s.ln.final_ln.beta),
        }
    }
}

// ── primitive ops ───────────────────────────────────────────────────────────

fn ref_linear(x: &[f64], rows: usize, w: &[f64], din: usize, dout: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * dout];
    for r in 0..rows {
        for j in 0..dout {
            let mut acc = b.map_or(0.0, |bb| bb[j]);
            for i in 0..din {
                acc += x[r * din + i] * w[i * dout + j];
            }
            out[r * dout + j] = acc;
        }
    }
    out
}

fn ref_layernorm(x: &[f64], rows: usize, d: usize, g: &[f64], bt: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let m: f64 = xr.iter().sum::<f64>() / d as f64;
        let var: f64 = xr.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = (xr[j] - m) * rs * g[j] + bt[j];
        }
    }
    out
}

fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// Size-weighted merge with the library's semantics: destinations absorb
/// their sources, order is preserved, [CLS] is untouched.
fn ref_merge(
    tokens: &[f64],
    sizes: &[f64],
    b: usize,
    n: usize,
    d: usize,
    plan: &MergePlan,
) -> (Vec<f64>, Vec<f64>, usize) {
    let n_img = n - 1;
    let n_out = n - plan.r();
    let mut is_src = vec![false; n_img];
    let mut srcs_of: Vec<Vec<usize>> = vec![Vec::new(); n_img];
    for &(s, dst) in &plan.pairs {
        is_src[s] = true;
        srcs_of[dst].push(s);
    }
    let mut out = vec![0.0f64; b * n_out * d];
    let mut out_sizes = vec![0.0f64; b * n_out];
    for bi in 0..b {
        out[bi * n_out * d..bi * n_out * d + d]
            .copy_from_slice(&tokens[bi * n * d..bi * n * d + d]);
        out_sizes[bi * n_out] = sizes[bi * n];
        let mut row = 1usize;
        for img in 0..n_img {
            if is_src[img] {
                continue;
            }
            let seq = img + 1;
            let dst_row = bi * n_out + row;
            if srcs_of[img].is_empty() {
                out[dst_row * d..(dst_row + 1) * d]
                    .copy_from_slice(&tokens[(bi * n + seq) * d..(bi * n + seq + 1) * d]);
                out_sizes[dst_row] = sizes[bi * n + seq];
            } else {
                let mut total = sizes[bi * n + seq];
                for &s in &srcs_of[img] {
                    total += sizes[bi * n + s + 1];
                }
                for j in 0..d {
                    let mut acc = sizes[bi * n + seq] * tokens[(bi * n + seq) * d + j];
                    for &s in &srcs_of[img] {
                        acc += sizes[bi * n + s + 1] * tokens[(bi * n + s + 1) * d + j];
                    }
                    out[dst_row * d + j] = acc / total;
                }
                out_sizes[dst_row] = total;
            }
            row += 1;
        }
    }
    (out, out_sizes, n_out)
}

// ── block and model ─────────────────────────────────────────────────────────

/// One reference encoder block. Returns the new tokens, sizes, and length.
pub fn ref_block(
    tokens: &[f64],
    sizes: &[f64],
    b: usize,
    n: usize,
    model: &RefModel,
    layer: usize,
    state: Option<&RefState>,
    plan: Option<&MergePlan>,
) -> (Vec<f64>, Vec<f64>, usize) {
    let cfg = &model.cfg;
    let (d, heads) = (cfg.hidden_dim, cfg.num_heads);
    let dh = d / heads;
    let eps = cfg.ln_eps as f64;
    let pfx = format!("blocks.{layer}");
    let default_ln1g = model.get(&format!("{pfx}.ln1.gamma"));
    let default_ln1b = model.get(&format!("{pfx}.ln1.beta"));
    let default_ln2g = model.get(&format!("{pfx}.ln2.gamma"));
    let default_ln2b = model.get(&format!("{pfx}.ln2.beta"));
    let (ln1g, ln1b, ln2g, ln2b) = match state {
        Some(s) => {
            let (a, bb, c, dd) = &s.ln[layer];
            (a.as_slice(), bb.as_slice(), c.as_slice(), dd.as_slice())
        }
        None => (default_ln1g, default_ln1b, default_ln2g, default_ln2b),
    };

    let mut x0 = tokens.to_vec();
    if let Some(dl) = state.and_then(|s| s.delta_layers.get(&layer)) {
        for bi in 0..b {
            for j in 0..d {
                x0[bi * n * d + j] += dl[j];
            }
        }
    }

    let xn = ref_layernorm(&x0, b * n, d, ln1g, ln1b, eps);
    let q = ref_linear(&xn, b * n, model.get(&format!("{pfx}.attn.wq")), d, d, Some(model.get(&format!("{pfx}.attn.bq"))));
    let k = ref_linear(&xn, b * n, model.get(&format!("{pfx}.attn.wk")), d, d, Some(model.get(&format!("{pfx}.attn.bk"))));
    let v = ref_linear(&xn, b * n, model.get(&format!("{pfx}.attn.wv")), d, d, Some(model.get(&format!("{pfx}.attn.bv"))));

    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn = vec![0.0f64; b * n * d];
    for bi in 0..b {
        for hd in 0..heads {
            for i in 0..n {
                let mut logits = vec![0.0f64; n];
                for j in 0..n {
                    let mut dot = 0.0f64;
                    for t in 0..dh {
                        dot += q[(bi * n + i) * d + hd * dh + t] * k[(bi * n + j) * d + hd * dh + t];
                    }
                    logits[j] = dot * scale + sizes[bi * n + j].ln();
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0f64;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    z += *l;
                }
                for j in 0..n {
                    let p = logits[j] / z;
                    for t in 0..dh {
                        attn[(bi * n + i) * d + hd * dh + t] += p * v[(bi * n + j) * d + hd * dh + t];
                    }
                }
            }
        }
    }
    let proj = ref_linear(&attn, b * n, model.get(&format!("{pfx}.attn.wo")), d, d, Some(model.get(&format!("{pfx}.attn.bo"))));
    let mut x1 = x0;
    for (o, p) in x1.iter_mut().zip(&proj) {
        *o += p;
    }

    let (x2, sizes2, n2) = match plan {
        Some(p) => ref_merge(&x1, sizes, b, n, d, p),
        None => (x1, sizes.to_vec(), n),
    };

    let mlp = cfg.mlp_dim();
    let x2n = ref_layernorm(&x2, b * n2, d, ln2g, ln2b, eps);
    let h1 = ref_linear(&x2n, b * n2, model.get(&format!("{pfx}.mlp.w1")), d, mlp, Some(model.get(&format!("{pfx}.mlp.b1"))));
    let h1a: Vec<f64> = h1.iter().map(|&v| ref_gelu(v)).collect();
    let ffn = ref_linear(&h1a, b * n2, model.get(&format!("{pfx}.mlp.w2")), mlp, d, Some(model.get(&format!("{pfx}.mlp.b2"))));
    let mut x3 = x2;
    for (o, f) in x3.iter_mut().zip(&ffn) {
        *o += f;
    }
    (x3, sizes2, n2)
}

pub struct RefTrace {
    /// `[B * num_classes]`.
    pub logits: Vec<f64>,
    /// Per layer, `[B * hidden_dim]` post-block [CLS] features.
    pub layer_cls: Vec<Vec<f64>>,
    pub token_counts: Vec<usize>,
}

/// Full reference forward. `plans` fixes the aggregation structure; pass all
/// `None` for a vanilla transformer.
pub fn ref_forward(
    model: &RefModel,
    state: Option<&RefState>,
    images: &Tensor,
    plans: &[Option<MergePlan>],
) -> RefTrace {
    let cfg = &model.cfg;
    let (d, ps) = (cfg.hidden_dim, cfg.patch_size);
    let side = cfg.image_size / ps;
    let (np, pd) = (cfg.num_patches(), cfg.patch_dim());
    let b = images.shape()[0];
    let (hh, ww) = (cfg.image_size, cfg.image_size);
    assert_eq!(plans.len(), cfg.num_layers);

    // Patch extraction and projection.
    let img = images.data();
    let mut patches = vec![0.0f64; b * np * pd];
    for bi in 0..b {
        for py in 0..side {
            for px in 0..side {
                let row = &mut patches[(bi * np + py * side + px) * pd..][..pd];
                for c in 0..cfg.channels {
                    for yy in 0..ps {
                        for xx in 0..ps {
                            row[c * ps * ps + yy * ps + xx] =
                                img[((bi * cfg.channels + c) * hh + py * ps + yy) * ww + px * ps + xx] as f64;
                        }
                    }
                }
            }
        }
    }
    let proj = ref_linear(
        &patches,
        b * np,
        model.get("patch_proj.weight"),
        pd,
        d,
        Some(model.get("patch_proj.bias")),
    );

    let mut n = np + 1;
    let pos = model.get("pos_embed");
    let cls = model.get("cls_embed");
    let mut tokens = vec![0.0f64; b * n * d];
    for bi in 0..b {
        for j in 0..d {
            tokens[bi * n * d + j] =
                cls[j] + state.map_or(0.0, |s| s.delta[j]) + pos[j];
        }
        for p in 0..np {
            for j in 0..d {
                tokens[(bi * n + p + 1) * d + j] = proj[(bi * np + p) * d + j] + pos[(p + 1) * d + j];
            }
        }
    }
    let mut sizes = vec![1.0f64; b * n];

    let mut layer_cls = Vec::with_capacity(cfg.num_layers);
    let mut token_counts = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        token_counts.push(n);
        let (t2, s2, n2) = ref_block(&tokens, &sizes, b, n, model, l, state, plans[l].as_ref());
        tokens = t2;
        sizes = s2;
        n = n2;
        let mut clsf = vec![0.0f64; b * d];
        for bi in 0..b {
            clsf[bi * d..(bi + 1) * d].copy_from_slice(&tokens[bi * n * d..bi * n * d + d]);
        }
        layer_cls.push(clsf);
    }

    let mut final_cls = vec![0.0f64; b * d];
    for bi in 0..b {
        final_cls[bi * d..(bi + 1) * d].copy_from_slice(&tokens[bi * n * d..bi * n * d + d]);
    }
    let (fg, fb) = match state {
        Some(s) => (s.final_gamma.as_slice(), s.final_beta.as_slice()),
        None => (model.get("final_ln.gamma"), model.get("final_ln.beta")),
    };
    let normed = ref_layernorm(&final_cls, b, d, fg, fb, cfg.ln_eps as f64);
    let logits = ref_linear(
        &normed,
        b,
        model.get("head.weight"),
        d,
        cfg.num_classes,
        Some(model.get("head.bias")),
    );
    RefTrace {
        logits,
        layer_cls,
        token_counts,
    }
}
