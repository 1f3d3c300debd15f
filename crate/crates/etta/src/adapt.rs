//! Online test-time adaptation.
//!
//! The adapted parameter set is deliberately small: every LayerNorm affine,
//! one additive [CLS]-embedding augmentation δ, and one [CLS] input bias δ_l
//! for each of the first `l_bgt` blocks. Each test batch is predicted from a
//! single forward pass before its own update is applied, then the combined
//! objective (mean prediction entropy plus a weighted feature-alignment term)
//! is backpropagated through that same trace.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::NamedArrays;
use crate::error::{Error, Result};
use crate::numerics::optim::sgd_step;
use crate::numerics::softmax;
use crate::tensor::Tensor;
use crate::vit::{
    model_backward, model_forward, ForwardTrace, GradSet, LnSet, LossGrads, MergeConfig,
    TunableParams, ViTParams,
};

// ── source statistics ───────────────────────────────────────────────────────

/// Per-layer mean and population variance of the [CLS] feature over a small
/// unlabeled source sample; the alignment targets of the adaptation objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceStats {
    /// One `[hidden_dim]` mean per layer.
    pub mean: Vec<Tensor>,
    /// One `[hidden_dim]` elementwise variance per layer; never negative.
    pub var: Vec<Tensor>,
    /// Number of source images behind the statistics.
    pub sample_count: usize,
}

impl SourceStats {
    pub fn num_layers(&self) -> usize {
        self.mean.len()
    }

    /// Writes the statistics in the named-array container format, one
    /// mean/variance pair per layer.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = NamedArrays::new(json!({
            "kind": "source_stats",
            "num_layers": self.mean.len(),
            "sample_count": self.sample_count,
        }));
        for (l, (m, v)) in self.mean.iter().zip(&self.var).enumerate() {
            arrays.push_tensor(format!("layer.{l}.mean"), m)?;
            arrays.push_tensor(format!("layer.{l}.var"), v)?;
        }
        arrays.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arrays = NamedArrays::load(path)?;
        if arrays.meta.get("kind").and_then(|v| v.as_str()) != Some("source_stats") {
            return Err(Error::Format(
                "container does not hold source statistics".into(),
            ));
        }
        let layers = arrays
            .meta
            .get("num_layers")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("source statistics missing num_layers".into()))?
            as usize;
        let sample_count = arrays
            .meta
            .get("sample_count")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("source statistics missing sample_count".into()))?
            as usize;
        let mut mean: Vec<Tensor> = Vec::with_capacity(layers);
        let mut var: Vec<Tensor> = Vec::with_capacity(layers);
        for l in 0..layers {
            let m = arrays.tensor(&format!("layer.{l}.mean"), None)?;
            let v = arrays.tensor(&format!("layer.{l}.var"), None)?;
            if m.rank() != 1 || v.shape() != m.shape() {
                return Err(Error::Format(format!(
                    "layer {l} statistics must be equal-length vectors"
                )));
            }
            if l > 0 && m.len() != mean[0].len() {
                return Err(Error::Format(format!(
                    "layer {l} feature width differs from layer 0"
                )));
            }
            if v.data().iter().any(|&x| x < 0.0) {
                return Err(Error::Format(format!("layer {l} variance has negative entries")));
            }
            mean.push(m);
            var.push(v);
        }
        Ok(SourceStats {
            mean,
            var,
            sample_count,
        })
    }
}

/// Batch mean and population variance of a `[B, d]` feature block. Fixed
/// f64 accumulation order, so results are independent of thread count.
fn cls_mean_var(cls: &Tensor) -> (Tensor, Tensor) {
    let (b, d) = (cls.rows(), cls.cols());
    let mut mean = vec![0.0f64; d];
    for bi in 0..b {
        for (m, &x) in mean.iter_mut().zip(cls.row(bi)) {
            *m += x as f64;
        }
    }
    for m in &mut mean {
        *m /= b as f64;
    }
    let mut var = vec![0.0f64; d];
    for bi in 0..b {
        for (j, &x) in cls.row(bi).iter().enumerate() {
            let c = x as f64 - mean[j];
            var[j] += c * c;
        }
    }
    for v in &mut var {
        *v /= b as f64;
    }
    (
        Tensor::from_raw(vec![d], mean.into_iter().map(|x| x as f32).collect()),
        Tensor::from_raw(vec![d], var.into_iter().map(|x| x as f32).collect()),
    )
}

/// Runs one frozen forward over the source sample and records, per layer, the
/// batch mean and population variance of the [CLS] feature. The merge
/// schedule must match the one used at test time so the statistics describe
/// the features the adapted model will actually see.
pub fn compute_source_stats(
    params: &ViTParams,
    source_images: &Tensor,
    merge: MergeConfig,
) -> Result<SourceStats> {
    if source_images.rank() != 4 {
        return Err(Error::Data(format!(
            "source images must be [B, C, H, W], got {:?}",
            source_images.shape()
        )));
    }
    let b = source_images.shape()[0];
    if b < 2 {
        return Err(Error::Data(format!(
            "source statistics need at least 2 images, got {b}"
        )));
    }
    let mut counter = 0u64;
    let trace = model_forward(source_images, params, None, merge, Some(&mut counter))?;
    let mut mean = Vec::with_capacity(trace.layer_cls.len());
    let mut var = Vec::with_capacity(trace.layer_cls.len());
    for cls in &trace.layer_cls {
        let (m, v) = cls_mean_var(cls);
        mean.push(m);
        var.push(v);
    }
    Ok(SourceStats {
        mean,
        var,
        sample_count: b,
    })
}

// ── configuration ───────────────────────────────────────────────────────────

/// Hyperparameters of one adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TTAConfig {
    /// Learning rate for the LayerNorm affines.
    pub lr_norm: f32,
    /// Learning rate for the [CLS]-embedding augmentation δ.
    pub lr_delta: f32,
    /// Learning rate shared by the per-layer [CLS] biases δ_l.
    pub lr_delta_l: f32,
    /// SGD momentum, shared by every tunable group. The default is plain
    /// SGD: momentum keeps pushing past the entropy basin when a batch is
    /// revisited, which breaks the per-step descent guarantee.
    pub momentum: f32,
    /// Weight of the feature-alignment term in the objective.
    pub lambda: f32,
    /// Test batch size the driver should stream with.
    pub batch_size: usize,
    /// Tokens merged away per layer.
    pub r: usize,
    /// Number of blocks receiving a [CLS]-bias augmentation.
    pub l_bgt: usize,
    /// Seed for the driver's stream ordering; the step itself is
    /// deterministic.
    pub seed: u64,
}

impl Default for TTAConfig {
    fn default() -> Self {
        TTAConfig {
            lr_norm: 5e-3,
            lr_delta: 1e-3,
            lr_delta_l: 1e-2,
            momentum: 0.0,
            lambda: 30.0,
            batch_size: 64,
            r: 0,
            l_bgt: 0,
            seed: 0,
        }
    }
}

impl TTAConfig {
    /// Range checks plus the layer budget against the model depth. Zero
    /// learning rates are allowed: they freeze the corresponding group,
    /// which the frozen and aggregation-only baselines rely on.
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        for (name, lr) in [
            ("lr_norm", self.lr_norm),
            ("lr_delta", self.lr_delta),
            ("lr_delta_l", self.lr_delta_l),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {lr}"
                )));
            }
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.l_bgt > num_layers {
            return Err(Error::Config(format!(
                "l_bgt {} exceeds model depth {num_layers}",
                self.l_bgt
            )));
        }
        Ok(())
    }
}

/// Per-batch record emitted by `tta_step`.
///
/// Wall-clock is measured but never serialized: metric streams must be
/// byte-identical across machines and thread counts, and time is not.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Position of the batch in the stream since the last reset.
    pub batch_index: u64,
    /// Pre-update accuracy; `None` until labels are scored in.
    pub accuracy: Option<f32>,
    /// Mean prediction entropy (nats) under the pre-update parameters.
    pub mean_entropy: f32,
    /// Feature-alignment term of the objective, before weighting.
    pub discrepancy: f32,
    /// Objective value: entropy + lambda * discrepancy.
    pub loss: f32,
    /// Model traversals this step; the protocol fixes this at exactly 1.
    pub forward_passes: u64,
    #[serde(skip)]
    pub wall_ms: f64,
}

// ── adaptation state ────────────────────────────────────────────────────────

/// Everything `tta_step` mutates: the tunables, their momentum buffers, the
/// pristine LayerNorm affines `reset_state` restores, and protocol counters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    /// Live tunables consumed by the forward pass.
    pub tunables: TunableParams,
    /// Blocks whose input [CLS] row receives a bias; sorted, deduplicated.
    pub aug_layers: Vec<usize>,
    /// Completed update steps since the last reset.
    pub step: u64,
    /// Model traversals since the last reset.
    pub forwards: u64,
    velocity: TunableParams,
    pristine_ln: LnSet,
}

impl AdaptState {
    /// Fresh state for `config`: the first `l_bgt` blocks carry a [CLS]
    /// bias, all augmentations and momenta start at zero, and the live
    /// LayerNorm affines are copies of the frozen ones.
    pub fn new(params: &ViTParams, config: &TTAConfig) -> Result<Self> {
        config.validate(params.config.num_layers)?;
        let aug = select_augmentation_layers(params.config.num_layers, config.l_bgt)?;
        Self::with_aug_layers(params, &aug)
    }

    /// Fresh state with an explicit augmentation layer set, for layer
    /// placement ablations. `new` is the canonical constructor and applies
    /// the shallow-first rule.
    pub fn with_aug_layers(params: &ViTParams, aug_layers: &[usize]) -> Result<Self> {
        let mut layers = aug_layers.to_vec();
        layers.sort_unstable();
        layers.dedup();
        let d = params.config.hidden_dim;
        let tunables = TunableParams::new(params, &layers)?;
        let velocity = TunableParams {
            delta: Tensor::zeros(&[d]),
            delta_layers: layers
                .iter()
                .map(|&l| (l, Tensor::zeros(&[d])))
                .collect::<BTreeMap<_, _>>(),
            ln: tunables.ln.zeros_like(),
        };
        let pristine_ln = tunables.ln.clone();
        Ok(AdaptState {
            tunables,
            aug_layers: layers,
            step: 0,
            forwards: 0,
            velocity,
            pristine_ln,
        })
    }
}

/// Returns `state` to its construction-time condition: zero augmentations
/// and momenta, original LayerNorm affines, counters cleared. The
/// augmentation layer set is kept.
pub fn reset_state(state: &mut AdaptState) {
    state.tunables.delta.data_mut().fill(0.0);
    for t in state.tunables.delta_layers.values_mut() {
        t.data_mut().fill(0.0);
    }
    state.tunables.ln = state.pristine_ln.clone();
    state.velocity.delta.data_mut().fill(0.0);
    for t in state.velocity.delta_layers.values_mut() {
        t.data_mut().fill(0.0);
    }
    state.velocity.ln = state.velocity.ln.zeros_like();
    state.step = 0;
    state.forwards = 0;
}

// ── layer selection ─────────────────────────────────────────────────────────

/// The blocks that receive a [CLS]-bias augmentation under a budget of
/// `l_bgt` layers: always the shallowest ones, `{0, 1, …, l_bgt − 1}`.
pub fn select_augmentation_layers(num_layers: usize, l_bgt: usize) -> Result<Vec<usize>> {
    if l_bgt > num_layers {
        return Err(Error::Config(format!(
            "layer budget {l_bgt} exceeds model depth {num_layers}"
        )));
    }
    Ok((0..l_bgt).collect())
}

// ── objective terms ─────────────────────────────────────────────────────────

/// Shannon entropy (nats) of every probability row, with the row-sum
/// contract enforced. `0 * ln 0` counts as zero.
fn row_entropies(probs: &Tensor) -> Result<Vec<f64>> {
    if probs.rank() != 2 {
        return Err(Error::shape(format!(
            "probabilities must be [B, C], got {:?}",
            probs.shape()
        )));
    }
    let b = probs.rows();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let row = probs.row(bi);
        let sum: f64 = row.iter().map(|&p| p as f64).sum();
        // NaN must fail the check, hence the negated `<=` form.
        if !((sum - 1.0).abs() <= 1e-4) {
            return Err(Error::Contract(format!(
                "probability row {bi} sums to {sum}, expected 1"
            )));
        }
        let mut h = 0.0f64;
        for &p in row {
            if p < 0.0 {
                return Err(Error::Contract(format!(
                    "probability row {bi} has negative entry {p}"
                )));
            }
            if p > 0.0 {
                h -= (p as f64) * (p as f64).ln();
            }
        }
        out.push(h);
    }
    Ok(out)
}

/// Mean Shannon entropy (nats) over a batch of probability rows.
pub fn entropy_term(probs: &Tensor) -> Result<f32> {
    let rows = row_entropies(probs)?;
    if rows.is_empty() {
        return Err(Error::Data("entropy of an empty batch".into()));
    }
    Ok((rows.iter().sum::<f64>() / rows.len() as f64) as f32)
}

/// Gradient of the batch-mean entropy with respect to the logits that
/// produced `probs`, with the softmax folded in analytically:
/// `d/dz_k = -p_k (ln p_k + H_row) / B`.
pub fn entropy_logit_grads(probs: &Tensor) -> Result<Tensor> {
    let rows = row_entropies(probs)?;
    let (b, c) = (probs.rows(), probs.cols());
    let mut out = vec![0.0f32; b * c];
    for bi in 0..b {
        let h = rows[bi];
        for (j, &p) in probs.row(bi).iter().enumerate() {
            if p > 0.0 {
                out[bi * c + j] = (-(p as f64) * ((p as f64).ln() + h) / b as f64) as f32;
            }
        }
    }
    Ok(Tensor::from_raw(vec![b, c], out))
}

fn check_layer_match(layer_cls: &[Tensor], stats: &SourceStats) -> Result<()> {
    if layer_cls.len() != stats.num_layers() {
        return Err(Error::State(format!(
            "trace covers {} layers but statistics cover {}",
            layer_cls.len(),
            stats.num_layers()
        )));
    }
    Ok(())
}

/// Squared L2 distance between per-layer batch [CLS] statistics and the
/// source statistics, summed over layers.
fn stats_distance(layer_cls: &[Tensor], stats: &SourceStats) -> Result<f64> {
    check_layer_match(layer_cls, stats)?;
    let mut acc = 0.0f64;
    for (l, cls) in layer_cls.iter().enumerate() {
        let (mu, var) = cls_mean_var(cls);
        if mu.shape() != stats.mean[l].shape() {
            return Err(Error::State(format!(
                "layer {l}: feature width {:?} does not match statistics width {:?}",
                mu.shape(),
                stats.mean[l].shape()
            )));
        }
        for (((&m, &ms), &v), &vs) in mu
            .data()
            .iter()
            .zip(stats.mean[l].data())
            .zip(var.data())
            .zip(stats.var[l].data())
        {
            acc += (m as f64 - ms as f64).powi(2) + (v as f64 - vs as f64).powi(2);
        }
    }
    Ok(acc)
}

/// Feature-alignment term of the objective, computed on the per-layer [CLS]
/// features recorded in `trace`.
pub fn discrepancy_term(trace: &ForwardTrace, stats: &SourceStats) -> Result<f32> {
    Ok(stats_distance(&trace.layer_cls, stats)? as f32)
}

/// Gradient of `discrepancy_term` with respect to each layer's [CLS]
/// features. For rows `t_b` with batch mean μ and population variance σ:
/// `∂D/∂t_b = 2(μ − μ^S)/B + 4(σ − σ^S) ⊙ (t_b − μ)/B`.
pub fn discrepancy_grads(trace: &ForwardTrace, stats: &SourceStats) -> Result<Vec<Tensor>> {
    check_layer_match(&trace.layer_cls, stats)?;
    let mut out = Vec::with_capacity(trace.layer_cls.len());
    for (l, cls) in trace.layer_cls.iter().enumerate() {
        let (b, d) = (cls.rows(), cls.cols());
        let (mu, var) = cls_mean_var(cls);
        if mu.shape() != stats.mean[l].shape() {
            return Err(Error::State(format!(
                "layer {l}: feature width {:?} does not match statistics width {:?}",
                mu.shape(),
                stats.mean[l].shape()
            )));
        }
        let bf = b as f32;
        let mut g = vec![0.0f32; b * d];
        for bi in 0..b {
            let row = cls.row(bi);
            for j in 0..d {
                let dm = mu.data()[j] - stats.mean[l].data()[j];
                let dv = var.data()[j] - stats.var[l].data()[j];
                g[bi * d + j] = 2.0 * dm / bf + 4.0 * dv * (row[j] - mu.data()[j]) / bf;
            }
        }
        out.push(Tensor::from_raw(vec![b, d], g));
    }
    Ok(out)
}

// ── the adaptation step ─────────────────────────────────────────────────────

/// Column index of the row maximum for every row; ties go to the lower index.
pub fn argmax_rows(logits: &Tensor) -> Vec<u32> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

fn grads_all_finite(grads: &GradSet) -> bool {
    grads
        .ln
        .per_layer
        .iter()
        .all(|(a, b)| {
            a.gamma.all_finite()
                && a.beta.all_finite()
                && b.gamma.all_finite()
                && b.beta.all_finite()
        })
        && grads.ln.final_ln.gamma.all_finite()
        && grads.ln.final_ln.beta.all_finite()
        && grads.delta.all_finite()
        && grads.delta_layers.values().all(|t| t.all_finite())
}

fn apply_updates(state: &mut AdaptState, grads: &GradSet, config: &TTAConfig) -> Result<()> {
    let AdaptState {
        tunables, velocity, ..
    } = state;
    let m = config.momentum;
    for (l, (ln1, ln2)) in tunables.ln.per_layer.iter_mut().enumerate() {
        let (g1, g2) = &grads.ln.per_layer[l];
        let (v1, v2) = &mut velocity.ln.per_layer[l];
        sgd_step(ln1.gamma.data_mut(), g1.gamma.data(), v1.gamma.data_mut(), config.lr_norm, m)?;
        sgd_step(ln1.beta.data_mut(), g1.beta.data(), v1.beta.data_mut(), config.lr_norm, m)?;
        sgd_step(ln2.gamma.data_mut(), g2.gamma.data(), v2.gamma.data_mut(), config.lr_norm, m)?;
        sgd_step(ln2.beta.data_mut(), g2.beta.data(), v2.beta.data_mut(), config.lr_norm, m)?;
    }
    sgd_step(
        tunables.ln.final_ln.gamma.data_mut(),
        grads.ln.final_ln.gamma.data(),
        velocity.ln.final_ln.gamma.data_mut(),
        config.lr_norm,
        m,
    )?;
    sgd_step(
        tunables.ln.final_ln.beta.data_mut(),
        grads.ln.final_ln.beta.data(),
        velocity.ln.final_ln.beta.data_mut(),
        config.lr_norm,
        m,
    )?;
    sgd_step(
        tunables.delta.data_mut(),
        grads.delta.data(),
        velocity.delta.data_mut(),
        config.lr_delta,
        m,
    )?;
    for (l, dl) in tunables.delta_layers.iter_mut() {
        let vel = velocity
            .delta_layers
            .get_mut(l)
            .expect("velocity tracks the tunable layer set");
        // An absent gradient entry means zero gradient for that layer.
        match grads.delta_layers.get(l) {
            Some(g) => sgd_step(dl.data_mut(), g.data(), vel.data_mut(), config.lr_delta_l, m)?,
            None => {
                let zeros = vec![0.0f32; dl.len()];
                sgd_step(dl.data_mut(), &zeros, vel.data_mut(), config.lr_delta_l, m)?;
            }
        }
    }
    Ok(())
}

/// One online adaptation step.
///
/// Protocol: exactly one forward pass; predictions are the argmax of that
/// pass's logits, i.e. taken before any update from this batch; the
/// objective `entropy + lambda * discrepancy` is differentiated on the same
/// trace; one backward pass; SGD-with-momentum updates for the LayerNorm
/// affines, δ, and each δ_l. A non-finite objective or gradient aborts the
/// step before any parameter is touched, so the caller observes the
/// pre-step state.
pub fn tta_step(
    batch_images: &Tensor,
    params: &ViTParams,
    state: &mut AdaptState,
    stats: &SourceStats,
    config: &TTAConfig,
) -> Result<(Vec<u32>, MetricsRecord)> {
    if state.aug_layers.len() != config.l_bgt {
        return Err(Error::State(format!(
            "state carries {} augmentation layers but config budgets {}",
            state.aug_layers.len(),
            config.l_bgt
        )));
    }
    let t0 = Instant::now();
    let forwards_before = state.forwards;
    let trace = model_forward(
        batch_images,
        params,
        Some(&state.tunables),
        MergeConfig { r: config.r },
        Some(&mut state.forwards),
    )?;
    let predictions = argmax_rows(&trace.logits);
    let (probs, _) = softmax(&trace.logits, 1)?;
    let entropy = entropy_term(&probs)?;
    let disc = discrepancy_term(&trace, stats)?;
    let loss = entropy + config.lambda * disc;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "step {}: objective {loss} (entropy {entropy}, discrepancy {disc}); state kept at pre-step values",
            state.step
        )));
    }

    let mut loss_grads = LossGrads::from_logits(entropy_logit_grads(&probs)?);
    if config.lambda != 0.0 {
        loss_grads.layer_cls = discrepancy_grads(&trace, stats)?
            .into_iter()
            .map(|mut g| {
                g.scale(config.lambda);
                Some(g)
            })
            .collect();
    }
    let grads = model_backward(&trace, &loss_grads, params, &state.tunables)?;
    if !grads_all_finite(&grads) {
        return Err(Error::NonFinite(format!(
            "step {}: non-finite gradient; state kept at pre-step values",
            state.step
        )));
    }
    apply_updates(state, &grads, config)?;

    let record = MetricsRecord {
        batch_index: state.step,
        accuracy: None,
        mean_entropy: entropy,
        discrepancy: disc,
        loss,
        forward_passes: state.forwards - forwards_before,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    };
    state.step += 1;
    Ok((predictions, record))
}

// ── streaming evaluation ────────────────────────────────────────────────────

/// One batch of the test stream.
#[derive(Debug, Clone)]
pub struct StreamBatch {
    /// `[B, C, H, W]` images.
    pub images: Tensor,
    /// Ground-truth classes, used only to score pre-update predictions.
    pub labels: Vec<u32>,
}

/// Aggregate result of adapting over one stream.
#[derive(Debug, Clone, Serialize)]
pub struct StreamSummary {
    /// Per-batch records in stream order, accuracy filled in.
    pub records: Vec<MetricsRecord>,
    /// Micro-averaged pre-update accuracy over all samples.
    pub accuracy: f32,
    pub samples: usize,
    pub correct: usize,
}

/// Runs the online protocol: one `tta_step` per batch in order, state
/// carried across batches, every batch scored with the predictions made
/// before its own update.
pub fn evaluate_stream(
    stream: &[StreamBatch],
    params: &ViTParams,
    state: &mut AdaptState,
    stats: &SourceStats,
    config: &TTAConfig,
) -> Result<StreamSummary> {
    if stream.is_empty() {
        return Err(Error::Data("test stream is empty".into()));
    }
    let mut records = Vec::with_capacity(stream.len());
    let (mut correct, mut samples) = (0usize, 0usize);
    for (i, batch) in stream.iter().enumerate() {
        if batch.images.rank() != 4 || batch.images.shape()[0] != batch.labels.len() {
            return Err(Error::Data(format!(
                "batch {i}: {} labels for image shape {:?}",
                batch.labels.len(),
                batch.images.shape()
            )));
        }
        let (preds, mut rec) = tta_step(&batch.images, params, state, stats, config)?;
        let hits = preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        rec.batch_index = i as u64;
        rec.accuracy = Some(hits as f32 / batch.labels.len() as f32);
        correct += hits;
        samples += batch.labels.len();
        records.push(rec);
    }
    Ok(StreamSummary {
        accuracy: correct as f32 / samples as f32,
        records,
        samples,
        correct,
    })
}

/// Min-max normalized accuracy: `(a_act − a_min) / (a_max − a_min)`.
pub fn relative_accuracy(a_act: f64, a_min: f64, a_max: f64) -> Result<f64> {
    if !(a_max > a_min) {
        return Err(Error::DegenerateRange(format!(
            "a_max {a_max} does not exceed a_min {a_min}"
        )));
    }
    Ok((a_act - a_min) / (a_max - a_min))
}

// ── hyperparameter selection ────────────────────────────────────────────────

/// Candidate grid for the adaptation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperGrid {
    pub lr_delta: Vec<f32>,
    pub lr_delta_l: Vec<f32>,
    pub l_bgt: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            lr_delta: vec![8e-4, 1e-3, 3e-3],
            lr_delta_l: vec![1e-2, 5e-2],
            l_bgt: vec![4, 5, 6],
        }
    }
}

/// Grid search over (lr_delta, lr_delta_l, l_bgt). Every candidate adapts a
/// fresh state over the held-out batches and is scored by its mean objective
/// value; the lowest mean wins, ties going to the earliest candidate in grid
/// order. Returns the winning config and its score.
pub fn select_hyperparams(
    params: &ViTParams,
    stats: &SourceStats,
    held_out: &[StreamBatch],
    base: &TTAConfig,
    grid: &HyperGrid,
) -> Result<(TTAConfig, f32)> {
    if grid.lr_delta.is_empty() || grid.lr_delta_l.is_empty() || grid.l_bgt.is_empty() {
        return Err(Error::Config("hyperparameter grid has an empty axis".into()));
    }
    let mut best: Option<(TTAConfig, f32)> = None;
    for &l_bgt in &grid.l_bgt {
        for &lr_delta in &grid.lr_delta {
            for &lr_delta_l in &grid.lr_delta_l {
                let cfg = TTAConfig {
                    lr_delta,
                    lr_delta_l,
                    l_bgt,
                    ..base.clone()
                };
                let mut state = AdaptState::new(params, &cfg)?;
                let summary = evaluate_stream(held_out, params, &mut state, stats, &cfg)?;
                let mean_loss = (summary.records.iter().map(|r| r.loss as f64).sum::<f64>()
                    / summary.records.len() as f64) as f32;
                if best.as_ref().is_none_or(|(_, b)| mean_loss < *b) {
                    best = Some((cfg, mean_loss));
                }
            }
        }
    }
    Ok(best.expect("grid is non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_params() -> ViTParams {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            ln_eps: 1e-5,
        };
        ViTParams::init(&cfg, 7).unwrap()
    }

    fn random_images(b: usize, cfg: &ViTConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * cfg.channels * cfg.image_size * cfg.image_size;
        Tensor::from_raw(
            vec![b, cfg.channels, cfg.image_size, cfg.image_size],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn augmentation_layers_are_the_shallowest() {
        assert_eq!(select_augmentation_layers(12, 6).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(select_augmentation_layers(8, 0).unwrap(), Vec::<usize>::new());
        assert_eq!(
            select_augmentation_layers(8, 8).unwrap(),
            (0..8).collect::<Vec<_>>()
        );
        assert!(matches!(
            select_augmentation_layers(4, 5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn entropy_of_reference_distributions() {
        let uniform = Tensor::full(&[1, 10], 0.1);
        assert!((entropy_term(&uniform).unwrap() - 10.0f32.ln()).abs() < 1e-6);

        let mut onehot = vec![0.0f32; 10];
        onehot[3] = 1.0;
        let onehot = Tensor::from_raw(vec![1, 10], onehot);
        assert_eq!(entropy_term(&onehot).unwrap(), 0.0);

        let mut half = vec![0.0f32; 10];
        half[0] = 0.5;
        half[1] = 0.5;
        let half = Tensor::from_raw(vec![1, 10], half);
        assert!((entropy_term(&half).unwrap() - 2.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn entropy_enforces_the_row_sum_contract() {
        let bad = Tensor::full(&[2, 4], 0.2);
        assert!(matches!(entropy_term(&bad), Err(Error::Contract(_))));
        let nan = Tensor::from_raw(vec![1, 2], vec![f32::NAN, 1.0]);
        assert!(matches!(entropy_term(&nan), Err(Error::Contract(_))));
        let negative = Tensor::from_raw(vec![1, 3], vec![-0.5, 0.75, 0.75]);
        assert!(matches!(entropy_term(&negative), Err(Error::Contract(_))));
    }

    #[test]
    fn relative_accuracy_endpoints_and_midpoint() {
        assert_eq!(relative_accuracy(60.0, 50.0, 60.0).unwrap(), 1.0);
        assert_eq!(relative_accuracy(50.0, 50.0, 60.0).unwrap(), 0.0);
        assert_eq!(relative_accuracy(55.0, 50.0, 60.0).unwrap(), 0.5);
        assert!(matches!(
            relative_accuracy(50.0, 50.0, 50.0),
            Err(Error::DegenerateRange(_))
        ));
    }

    #[test]
    fn config_validation_catches_bad_ranges() {
        let ok = TTAConfig::default();
        ok.validate(8).unwrap();

        let zero_lrs = TTAConfig {
            lr_norm: 0.0,
            lr_delta: 0.0,
            lr_delta_l: 0.0,
            ..TTAConfig::default()
        };
        zero_lrs.validate(8).unwrap();

        let bad_lambda = TTAConfig {
            lambda: -1.0,
            ..TTAConfig::default()
        };
        assert!(matches!(bad_lambda.validate(8), Err(Error::Config(_))));

        let bad_momentum = TTAConfig {
            momentum: 1.0,
            ..TTAConfig::default()
        };
        assert!(matches!(bad_momentum.validate(8), Err(Error::Config(_))));

        let deep_budget = TTAConfig {
            l_bgt: 9,
            ..TTAConfig::default()
        };
        assert!(matches!(deep_budget.validate(8), Err(Error::Config(_))));

        let no_batch = TTAConfig {
            batch_size: 0,
            ..TTAConfig::default()
        };
        assert!(matches!(no_batch.validate(8), Err(Error::Config(_))));
    }

    #[test]
    fn single_layer_distance_arithmetic() {
        // Batch rows identical: mu = (0, 0), var = (0, 0).
        let cls = Tensor::zeros(&[2, 2]);
        let stats = SourceStats {
            mean: vec![Tensor::from_raw(vec![2], vec![-1.0, 0.0])],
            var: vec![Tensor::zeros(&[2])],
            sample_count: 2,
        };
        assert_eq!(stats_distance(&[cls], &stats).unwrap(), 1.0);
    }

    #[test]
    fn distance_is_zero_when_batch_matches_source() {
        let cls = Tensor::from_raw(vec![3, 2], vec![0.3, -1.0, 0.5, 2.0, -0.25, 0.125]);
        let (m, v) = cls_mean_var(&cls);
        let stats = SourceStats {
            mean: vec![m],
            var: vec![v],
            sample_count: 3,
        };
        assert_eq!(stats_distance(&[cls], &stats).unwrap(), 0.0);
    }

    #[test]
    fn layer_count_mismatch_is_a_state_error() {
        let stats = SourceStats {
            mean: vec![Tensor::zeros(&[2]); 2],
            var: vec![Tensor::zeros(&[2]); 2],
            sample_count: 4,
        };
        let cls = vec![Tensor::zeros(&[2, 2])];
        assert!(matches!(
            stats_distance(&cls, &stats),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn source_stats_round_trip_and_rejection() {
        let dir = std::env::temp_dir().join("etta-adapt-tests");
        std::fs::create_dir_all(&dir).unwrap();

        let stats = SourceStats {
            mean: vec![Tensor::from_raw(vec![3], vec![0.1, -0.2, 0.3]); 2],
            var: vec![Tensor::from_raw(vec![3], vec![0.5, 0.0, 1.25]); 2],
            sample_count: 64,
        };
        let path = dir.join("stats_roundtrip.etta");
        stats.save(&path).unwrap();
        assert_eq!(SourceStats::load(&path).unwrap(), stats);

        let wrong_kind = dir.join("stats_wrong_kind.etta");
        let mut arrays = NamedArrays::new(json!({"kind": "checkpoint"}));
        arrays.push("layer.0.mean", vec![1], vec![0.0]).unwrap();
        arrays.save(&wrong_kind).unwrap();
        assert!(matches!(
            SourceStats::load(&wrong_kind),
            Err(Error::Format(_))
        ));

        let negative_var = SourceStats {
            mean: vec![Tensor::zeros(&[2])],
            var: vec![Tensor::from_raw(vec![2], vec![0.5, -0.5])],
            sample_count: 8,
        };
        let bad = dir.join("stats_negative_var.etta");
        negative_var.save(&bad).unwrap();
        assert!(matches!(SourceStats::load(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn source_stats_require_at_least_two_images() {
        let params = tiny_params();
        let one = random_images(1, &params.config, 3);
        assert!(matches!(
            compute_source_stats(&params, &one, MergeConfig { r: 0 }),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn identical_images_give_zero_variance() {
        let params = tiny_params();
        let single = random_images(1, &params.config, 11);
        let mut doubled = single.data().to_vec();
        doubled.extend_from_slice(single.data());
        let pair = Tensor::from_raw(
            vec![2, params.config.channels, params.config.image_size, params.config.image_size],
            doubled,
        );
        let stats = compute_source_stats(&params, &pair, MergeConfig { r: 0 }).unwrap();
        for v in &stats.var {
            assert!(v.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn duplicating_the_sample_leaves_stats_unchanged() {
        let params = tiny_params();
        let base = random_images(4, &params.config, 23);
        let mut doubled = base.data().to_vec();
        doubled.extend_from_slice(base.data());
        let twice = Tensor::from_raw(
            vec![8, params.config.channels, params.config.image_size, params.config.image_size],
            doubled,
        );
        let a = compute_source_stats(&params, &base, MergeConfig { r: 0 }).unwrap();
        let b = compute_source_stats(&params, &twice, MergeConfig { r: 0 }).unwrap();
        for l in 0..a.num_layers() {
            for (x, y) in a.mean[l].data().iter().zip(b.mean[l].data()) {
                assert!((x - y).abs() < 1e-6);
            }
            for (x, y) in a.var[l].data().iter().zip(b.var[l].data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reset_returns_the_state_to_fresh() {
        let params = tiny_params();
        let config = TTAConfig {
            l_bgt: 2,
            batch_size: 2,
            ..TTAConfig::default()
        };
        let mut state = AdaptState::new(&params, &config).unwrap();
        let fresh = state.clone();

        state.tunables.delta.data_mut().fill(0.5);
        for t in state.tunables.delta_layers.values_mut() {
            t.data_mut().fill(-0.25);
        }
        state.tunables.ln.final_ln.gamma.data_mut().fill(2.0);
        state.velocity.delta.data_mut().fill(1.0);
        state.step = 9;
        state.forwards = 9;
        assert_ne!(state, fresh);

        reset_state(&mut state);
        assert_eq!(state, fresh);
    }

    #[test]
    fn default_grid_matches_the_method_settings() {
        let grid = HyperGrid::default();
        assert_eq!(grid.lr_delta, vec![8e-4, 1e-3, 3e-3]);
        assert_eq!(grid.lr_delta_l, vec![1e-2, 5e-2]);
        assert_eq!(grid.l_bgt, vec![4, 5, 6]);
        assert_eq!(TTAConfig::default().lr_norm, 5e-3);
        assert_eq!(TTAConfig::default().lambda, 30.0);
        assert_eq!(TTAConfig::default().batch_size, 64);
    }
}
