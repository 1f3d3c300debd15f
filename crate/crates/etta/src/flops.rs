//! Analytic cost model for the merged-token encoder.
//!
//! Counts multiply-accumulates for every matrix product in a forward pass of
//! one image: patch embedding, per-layer attention projections, score and
//! weighted-sum products, output projection, FFN, and the classifier head.
//! Attention at layer `l` runs on the sequence entering that layer; the merge
//! sits between attention and FFN, so the FFN sees `r` fewer tokens.
//! Normalizations, softmaxes, activations, and residual adds are excluded:
//! they are linear in tokens-times-width and vanish against the matmuls.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::vit::ViTConfig;

/// MAC counts for the matrix products of one encoder layer, per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerMacs {
    /// Sequence length entering the layer, [CLS] included.
    pub tokens_in: usize,
    /// Sequence length after the in-block merge, as seen by the FFN.
    pub tokens_out: usize,
    /// Q, K, V projections.
    pub qkv: u64,
    /// Attention score product QK^T.
    pub scores: u64,
    /// Attention-weighted value sum.
    pub weighted_sum: u64,
    /// Attention output projection.
    pub out_proj: u64,
    /// Two-layer feed-forward block.
    pub ffn: u64,
}

impl LayerMacs {
    pub fn total(&self) -> u64 {
        self.qkv + self.scores + self.weighted_sum + self.out_proj + self.ffn
    }
}

/// Cost breakdown for one forward pass of one image at a fixed merge rate.
#[derive(Debug, Clone, Serialize)]
pub struct FlopsReport {
    pub r: usize,
    pub patch_embed: u64,
    pub head: u64,
    pub layers: Vec<LayerMacs>,
    /// Exact sum of patch embed, all layer totals, and the head.
    pub total_macs: u64,
    /// The same model evaluated with merging disabled.
    pub baseline_macs: u64,
    /// `total_macs / baseline_macs`; exactly 1.0 when r = 0.
    pub ratio: f64,
}

impl FlopsReport {
    /// FLOPs under the multiply-plus-add convention.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs
    }

    pub fn baseline_flops(&self) -> u64 {
        2 * self.baseline_macs
    }

    pub fn total_gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn baseline_gmacs(&self) -> f64 {
        self.baseline_macs as f64 / 1e9
    }
}

fn layer_costs(config: &ViTConfig, r: usize) -> Result<Vec<LayerMacs>> {
    let d = config.hidden_dim as u64;
    let hidden = (config.mlp_ratio * config.hidden_dim) as u64;
    let mut layers = Vec::with_capacity(config.num_layers);
    let mut seq = config.seq_len();
    for l in 0..config.num_layers {
        let img = seq - 1;
        if r > img / 2 {
            return Err(Error::Schedule(format!(
                "layer {l}: r={r} exceeds floor({img}/2) mergeable pairs"
            )));
        }
        let n = seq as u64;
        let out = seq - r;
        layers.push(LayerMacs {
            tokens_in: seq,
            tokens_out: out,
            qkv: 3 * n * d * d,
            scores: n * n * d,
            weighted_sum: n * n * d,
            out_proj: n * d * d,
            ffn: 2 * (out as u64) * d * hidden,
        });
        seq = out;
    }
    Ok(layers)
}

/// Builds the analytic cost report for `config` at merge rate `r`,
/// alongside the unmerged baseline of the same model. Fails with a schedule
/// error if any layer would be asked to merge more pairs than it has.
pub fn flops_report(config: &ViTConfig, r: usize) -> Result<FlopsReport> {
    config.validate()?;
    let layers = layer_costs(config, r)?;
    let baseline = layer_costs(config, 0)?;
    let patch_embed = (config.num_patches() * config.patch_dim() * config.hidden_dim) as u64;
    let head = (config.hidden_dim * config.num_classes) as u64;
    let fixed = patch_embed + head;
    let total_macs = fixed + layers.iter().map(LayerMacs::total).sum::<u64>();
    let baseline_macs = fixed + baseline.iter().map(LayerMacs::total).sum::<u64>();
    Ok(FlopsReport {
        r,
        patch_embed,
        head,
        layers,
        total_macs,
        baseline_macs,
        ratio: total_macs as f64 / baseline_macs as f64,
    })
}

/// The 224px/patch-16 base transformer whose published cost table anchors
/// this model: 196 image tokens, width 768, 12 layers, 1000 classes.
pub fn vit_b16_config() -> ViTConfig {
    ViTConfig {
        image_size: 224,
        patch_size: 16,
        channels: 3,
        hidden_dim: 768,
        num_layers: 12,
        num_heads: 12,
        mlp_ratio: 4,
        num_classes: 1000,
        ln_eps: 1e-6,
    }
}
