//! Pre-norm Vision Transformer: patch embedding, encoder blocks with
//! in-block token aggregation, classification head, forward tracing, and
//! backward passes for both full training and the test-time tunable set.

mod backward;
mod checkpoint;
mod forward;

pub use backward::{
    block_backward, model_backward, model_backward_train, BlockBwd, BlockWeightGrads, GradSet,
    LossGrads,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    block_forward, block_forward_with_plan, model_forward, model_forward_with_plans, patch_embed,
    BlockCache, ForwardTrace, MergeConfig,
};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ── configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub ln_eps: f32,
}

impl Default for ViTConfig {
    /// Desk-scale default: 32px images, 4px patches, 64 image tokens + [CLS].
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            hidden_dim: 64,
            num_layers: 8,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
            ln_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.patch_size,
            self.channels,
            self.hidden_dim,
            self.num_layers,
            self.num_heads,
            self.mlp_ratio,
            self.num_classes,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("all ViT dimensions must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Image tokens per image.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length including [CLS].
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_ratio * self.hidden_dim
    }
}

// ── parameters ──────────────────────────────────────────────────────────────

/// An affine LayerNorm parameter pair; also reused as gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct LnPair {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LnPair {
    pub fn identity(d: usize) -> Self {
        LnPair {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn zeros(d: usize) -> Self {
        LnPair {
            gamma: Tensor::zeros(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LnPair,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2: LnPair,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Full model parameters; the config travels with the weights so shapes are
/// always interpretable.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub config: ViTConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos: Tensor,
    pub cls: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_ln: LnPair,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ViTParams {
    /// All-zero parameters of the right shapes (gradient/optimizer storage).
    pub fn zeros(config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let (d, pd, seq, mlp, c) = (
            config.hidden_dim,
            config.patch_dim(),
            config.seq_len(),
            config.mlp_dim(),
            config.num_classes,
        );
        let block = || BlockParams {
            ln1: LnPair::zeros(d),
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln2: LnPair::zeros(d),
            w1: Tensor::zeros(&[d, mlp]),
            b1: Tensor::zeros(&[mlp]),
            w2: Tensor::zeros(&[mlp, d]),
            b2: Tensor::zeros(&[d]),
        };
        Ok(ViTParams {
            config: config.clone(),
            patch_w: Tensor::zeros(&[pd, d]),
            patch_b: Tensor::zeros(&[d]),
            pos: Tensor::zeros(&[seq, d]),
            cls: Tensor::zeros(&[d]),
            blocks: (0..config.num_layers).map(|_| block()).collect(),
            final_ln: LnPair::zeros(d),
            head_w: Tensor::zeros(&[d, c]),
            head_b: Tensor::zeros(&[c]),
        })
    }

    /// Random initialization: normal(0, 0.02) projections, identity norms.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |t: &mut Tensor, std: f32| {
            for v in t.data_mut() {
                // Box-Muller from two uniforms keeps the dependency surface small.
                let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
                let u2: f32 = rng.gen();
                *v = std
                    * (-2.0 * u1.ln()).sqrt()
                    * (2.0 * std::f32::consts::PI * u2).cos();
            }
        };
        fill(&mut p.patch_w, 0.02);
        fill(&mut p.pos, 0.02);
        fill(&mut p.cls, 0.02);
        for b in &mut p.blocks {
            fill(&mut b.wq, 0.02);
            fill(&mut b.wk, 0.02);
            fill(&mut b.wv, 0.02);
            fill(&mut b.wo, 0.02);
            fill(&mut b.w1, 0.02);
            fill(&mut b.w2, 0.02);
            b.ln1 = LnPair::identity(config.hidden_dim);
            b.ln2 = LnPair::identity(config.hidden_dim);
        }
        p.final_ln = LnPair::identity(config.hidden_dim);
        fill(&mut p.head_w, 0.02);
        Ok(p)
    }

    /// Canonical (name, tensor) enumeration; fixes checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_proj.weight".into(), &self.patch_w),
            ("patch_proj.bias".into(), &self.patch_b),
            ("pos_embed".into(), &self.pos),
            ("cls_embed".into(), &self.cls),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let mut push = |suffix: &str, t| out.push((format!("blocks.{i}.{suffix}"), t));
            push("ln1.gamma", &b.ln1.gamma);
            push("ln1.beta", &b.ln1.beta);
            push("attn.wq", &b.wq);
            push("attn.bq", &b.bq);
            push("attn.wk", &b.wk);
            push("attn.bk", &b.bk);
            push("attn.wv", &b.wv);
            push("attn.bv", &b.bv);
            push("attn.wo", &b.wo);
            push("attn.bo", &b.bo);
            push("ln2.gamma", &b.ln2.gamma);
            push("ln2.beta", &b.ln2.beta);
            push("mlp.w1", &b.w1);
            push("mlp.b1", &b.b1);
            push("mlp.w2", &b.w2);
            push("mlp.b2", &b.b2);
        }
        out.push(("final_ln.gamma".into(), &self.final_ln.gamma));
        out.push(("final_ln.beta".into(), &self.final_ln.beta));
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    /// Mutable counterpart of `named_tensors`, in the same canonical order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_proj.weight".into(), &mut self.patch_w),
            ("patch_proj.bias".into(), &mut self.patch_b),
            ("pos_embed".into(), &mut self.pos),
            ("cls_embed".into(), &mut self.cls),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.ln1.gamma"), &mut b.ln1.gamma));
            out.push((format!("blocks.{i}.ln1.beta"), &mut b.ln1.beta));
            out.push((format!("blocks.{i}.attn.wq"), &mut b.wq));
            out.push((format!("blocks.{i}.attn.bq"), &mut b.bq));
            out.push((format!("blocks.{i}.attn.wk"), &mut b.wk));
            out.push((format!("blocks.{i}.attn.bk"), &mut b.bk));
            out.push((format!("blocks.{i}.attn.wv"), &mut b.wv));
            out.push((format!("blocks.{i}.attn.bv"), &mut b.bv));
            out.push((format!("blocks.{i}.attn.wo"), &mut b.wo));
            out.push((format!("blocks.{i}.attn.bo"), &mut b.bo));
            out.push((format!("blocks.{i}.ln2.gamma"), &mut b.ln2.gamma));
            out.push((format!("blocks.{i}.ln2.beta"), &mut b.ln2.beta));
            out.push((format!("blocks.{i}.mlp.w1"), &mut b.w1));
            out.push((format!("blocks.{i}.mlp.b1"), &mut b.b1));
            out.push((format!("blocks.{i}.mlp.w2"), &mut b.w2));
            out.push((format!("blocks.{i}.mlp.b2"), &mut b.b2));
        }
        out.push(("final_ln.gamma".into(), &mut self.final_ln.gamma));
        out.push(("final_ln.beta".into(), &mut self.final_ln.beta));
        out.push(("head.weight".into(), &mut self.head_w));
        out.push(("head.bias".into(), &mut self.head_b));
        out
    }

    /// Applies `f` to every (parameter, companion) tensor pair. Used to walk
    /// parameters together with a structurally identical gradient or
    /// optimizer-state holder.
    pub fn zip_apply(&mut self, other: &ViTParams, mut f: impl FnMut(&mut Tensor, &Tensor)) {
        f(&mut self.patch_w, &other.patch_w);
        f(&mut self.patch_b, &other.patch_b);
        f(&mut self.pos, &other.pos);
        f(&mut self.cls, &other.cls);
        for (b, g) in self.blocks.iter_mut().zip(&other.blocks) {
            f(&mut b.ln1.gamma, &g.ln1.gamma);
            f(&mut b.ln1.beta, &g.ln1.beta);
            f(&mut b.wq, &g.wq);
            f(&mut b.bq, &g.bq);
            f(&mut b.wk, &g.wk);
            f(&mut b.bk, &g.bk);
            f(&mut b.wv, &g.wv);
            f(&mut b.bv, &g.bv);
            f(&mut b.wo, &g.wo);
            f(&mut b.bo, &g.bo);
            f(&mut b.ln2.gamma, &g.ln2.gamma);
            f(&mut b.ln2.beta, &g.ln2.beta);
            f(&mut b.w1, &g.w1);
            f(&mut b.b1, &g.b1);
            f(&mut b.w2, &g.w2);
            f(&mut b.b2, &g.b2);
        }
        f(&mut self.final_ln.gamma, &other.final_ln.gamma);
        f(&mut self.final_ln.beta, &other.final_ln.beta);
        f(&mut self.head_w, &other.head_w);
        f(&mut self.head_b, &other.head_b);
    }
}

// ── test-time tunables ──────────────────────────────────────────────────────

/// Live LayerNorm affines for every norm site in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct LnSet {
    pub per_layer: Vec<(LnPair, LnPair)>,
    pub final_ln: LnPair,
}

impl LnSet {
    pub fn from_params(params: &ViTParams) -> Self {
        LnSet {
            per_layer: params
                .blocks
                .iter()
                .map(|b| (b.ln1.clone(), b.ln2.clone()))
                .collect(),
            final_ln: params.final_ln.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.final_ln.gamma.len();
        LnSet {
            per_layer: self.per_layer.iter().map(|_| (LnPair::zeros(d), LnPair::zeros(d))).collect(),
            final_ln: LnPair::zeros(d),
        }
    }
}

/// The test-time tunable set: [CLS]-embedding augmentation δ, per-layer
/// [CLS]-bias augmentations δ_l for the selected shallow layers, and live
/// LayerNorm affines that shadow the frozen checkpoint values.
#[derive(Debug, Clone, PartialEq)]
pub struct TunableParams {
    pub delta: Tensor,
    pub delta_layers: BTreeMap<usize, Tensor>,
    pub ln: LnSet,
}

impl TunableParams {
    /// Fresh tunables: zero augmentations, LN affines copied from the frozen
    /// parameters, δ_l allocated for each layer in `aug_layers`.
    pub fn new(params: &ViTParams, aug_layers: &[usize]) -> Result<Self> {
        let d = params.config.hidden_dim;
        let mut delta_layers = BTreeMap::new();
        for &l in aug_layers {
            if l >= params.config.num_layers {
                return Err(Error::Config(format!(
                    "augmentation layer {l} out of range for {} layers",
                    params.config.num_layers
                )));
            }
            delta_layers.insert(l, Tensor::zeros(&[d]));
        }
        Ok(TunableParams {
            delta: Tensor::zeros(&[d]),
            delta_layers,
            ln: LnSet::from_params(params),
        })
    }
}

/// LayerNorm affines for a block: live tunables when present, otherwise the
/// frozen checkpoint values.
pub(crate) fn effective_block_ln<'a>(
    params: &'a ViTParams,
    state: Option<&'a TunableParams>,
    layer: usize,
) -> (&'a LnPair, &'a LnPair) {
    match state {
        Some(s) => {
            let (ln1, ln2) = &s.ln.per_layer[layer];
            (ln1, ln2)
        }
        None => (&params.blocks[layer].ln1, &params.blocks[layer].ln2),
    }
}

pub(crate) fn effective_final_ln<'a>(
    params: &'a ViTParams,
    state: Option<&'a TunableParams>,
) -> &'a LnPair {
    match state {
        Some(s) => &s.ln.final_ln,
        None => &params.final_ln,
    }
}
