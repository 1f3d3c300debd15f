//! Token aggregation: similarity scoring over an alternating even/odd
//! partition of image tokens, bipartite soft matching, size-weighted merge
//! application, and a dense materializer of the merge operator.
//!
//! Index conventions: a "token batch" holds the [CLS] token at sequence
//! index 0 and image tokens at sequence indices 1..N. Merge plans address
//! image tokens by image index (sequence index minus one). Destinations are
//! even image indices, merge candidates (sources) are odd image indices, so
//! the [CLS] token can never be merged.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ── types ───────────────────────────────────────────────────────────────────

/// Tokens plus per-token multiplicities. Sizes start at 1 and add under
/// merging, so their total is conserved across layers.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Tensor,
    pub sizes: Tensor,
}

impl TokenBatch {
    pub fn new(tokens: Tensor, sizes: Tensor) -> Result<Self> {
        if tokens.rank() != 3 {
            return Err(Error::shape("TokenBatch tokens must be [B, N, d]"));
        }
        let (b, n) = (tokens.shape()[0], tokens.shape()[1]);
        if sizes.shape() != [b, n] {
            return Err(Error::shape(format!(
                "TokenBatch sizes shape {:?}, expected [{b}, {n}]",
                sizes.shape()
            )));
        }
        if sizes.data().iter().any(|&s| !(s >= 1.0)) {
            return Err(Error::Contract("token sizes must all be >= 1".into()));
        }
        Ok(TokenBatch { tokens, sizes })
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    /// Sequence length including the [CLS] token.
    pub fn seq_len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }
}

/// One layer's aggregation decision: `r` source image tokens, each merged
/// into one destination image token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergePlan {
    pub layer_idx: usize,
    /// (src image index, dst image index) pairs, ascending in src index.
    pub pairs: Vec<(usize, usize)>,
}

impl MergePlan {
    pub fn r(&self) -> usize {
        self.pairs.len()
    }

    /// Checks the structural invariants against a sequence of `n_img` image
    /// tokens: indices in range, sources distinct, sources disjoint from
    /// destinations.
    pub fn validate(&self, n_img: usize) -> Result<()> {
        let mut seen_src = vec![false; n_img];
        for &(s, d) in &self.pairs {
            if s >= n_img || d >= n_img {
                return Err(Error::Plan(format!(
                    "pair ({s}, {d}) out of range for {n_img} image tokens"
                )));
            }
            if s == d {
                return Err(Error::Plan(format!("token {s} merged into itself")));
            }
            if seen_src[s] {
                return Err(Error::Plan(format!("duplicate src index {s}")));
            }
            seen_src[s] = true;
        }
        for &(_, d) in &self.pairs {
            if seen_src[d] {
                return Err(Error::Plan(format!("index {d} is both src and dst")));
            }
        }
        Ok(())
    }
}

/// Batch-aggregated cosine similarities between merge candidates (odd image
/// positions) and destinations (even image positions).
#[derive(Debug, Clone)]
pub struct ScoreTable {
    n_img: usize,
    /// [n_src x n_dst], row-major.
    scores: Vec<f32>,
}

impl ScoreTable {
    /// Builds a table from explicit scores; used by tests and oracles.
    pub fn from_scores(n_img: usize, scores: Vec<f32>) -> Result<Self> {
        let (ns, nd) = (n_src(n_img), n_dst(n_img));
        if scores.len() != ns * nd {
            return Err(Error::shape(format!(
                "score table for {n_img} image tokens needs {ns}x{nd} entries"
            )));
        }
        Ok(ScoreTable { n_img, scores })
    }

    pub fn n_img(&self) -> usize {
        self.n_img
    }

    pub fn n_src(&self) -> usize {
        n_src(self.n_img)
    }

    pub fn n_dst(&self) -> usize {
        n_dst(self.n_img)
    }

    pub fn score(&self, src: usize, dst: usize) -> f32 {
        self.scores[src * self.n_dst() + dst]
    }

    /// Image index of source candidate `i`.
    pub fn src_image_index(&self, i: usize) -> usize {
        2 * i + 1
    }

    /// Image index of destination `j`.
    pub fn dst_image_index(&self, j: usize) -> usize {
        2 * j
    }
}

pub fn n_src(n_img: usize) -> usize {
    n_img / 2
}

pub fn n_dst(n_img: usize) -> usize {
    n_img - n_img / 2
}

// ── similarity ──────────────────────────────────────────────────────────────

/// Cosine similarity between candidate and destination keys, averaged over
/// the batch so one plan serves the whole batch. Zero-norm keys score -1
/// against everything and are therefore merged last.
pub fn similarity_scores(keys: &Tensor) -> Result<ScoreTable> {
    if keys.rank() != 3 {
        return Err(Error::shape("similarity_scores expects keys [B, N, d]"));
    }
    let (b, n, d) = (keys.shape()[0], keys.shape()[1], keys.shape()[2]);
    if n < 1 {
        return Err(Error::shape("similarity_scores: empty sequence"));
    }
    let n_img = n - 1;
    let (ns, nd) = (n_src(n_img), n_dst(n_img));
    let mut scores = vec![0.0f32; ns * nd];
    let data = keys.data();
    let norm = |bi: usize, seq: usize| -> f32 {
        let row = &data[(bi * n + seq) * d..(bi * n + seq + 1) * d];
        row.iter().map(|&v| v * v).sum::<f32>().sqrt()
    };
    for bi in 0..b {
        for i in 0..ns {
            let s_seq = 2 * i + 2; // odd image position 2i+1
            let s_row = &data[(bi * n + s_seq) * d..(bi * n + s_seq + 1) * d];
            let s_norm = norm(bi, s_seq);
            for j in 0..nd {
                let d_seq = 2 * j + 1; // even image position 2j
                let d_norm = norm(bi, d_seq);
                let cos = if s_norm <= f32::MIN_POSITIVE || d_norm <= f32::MIN_POSITIVE {
                    -1.0
                } else {
                    let d_row = &data[(bi * n + d_seq) * d..(bi * n + d_seq + 1) * d];
                    crate::numerics::gemm_dot(s_row, d_row) / (s_norm * d_norm)
                };
                scores[i * nd + j] += cos;
            }
        }
    }
    let inv = 1.0 / b as f32;
    for s in &mut scores {
        *s *= inv;
    }
    ScoreTable::from_scores(n_img, scores)
}

// ── matching ────────────────────────────────────────────────────────────────

/// Greedy bipartite soft matching: every candidate is scored by its best
/// destination edge; the `r` best candidates are merged. Ties break toward
/// the lower token index, making the plan deterministic.
pub fn bipartite_soft_matching(
    scores: &ScoreTable,
    r: usize,
    layer_idx: usize,
) -> Result<MergePlan> {
    let ns = scores.n_src();
    if r > ns {
        return Err(Error::Schedule(format!(
            "cannot merge r={r} tokens with only {ns} candidates"
        )));
    }
    let nd = scores.n_dst();
    if r > 0 && nd == 0 {
        return Err(Error::Schedule("no destination tokens available".into()));
    }
    // Best destination per candidate; ties toward the lower dst index.
    let mut best: Vec<(f32, usize)> = Vec::with_capacity(ns);
    for i in 0..ns {
        let mut bj = 0usize;
        let mut bs = f32::NEG_INFINITY;
        for j in 0..nd {
            let s = scores.score(i, j);
            if s > bs {
                bs = s;
                bj = j;
            }
        }
        best.push((bs, bj));
    }
    // Candidates ranked by best-edge score; ties toward the lower src index.
    let mut order: Vec<usize> = (0..ns).collect();
    order.sort_by(|&a, &b| {
        best[b].0
            .partial_cmp(&best[a].0)
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut pairs: Vec<(usize, usize)> = order[..r]
        .iter()
        .map(|&i| (scores.src_image_index(i), scores.dst_image_index(best[i].1)))
        .collect();
    pairs.sort_by_key(|&(s, _)| s);
    let plan = MergePlan { layer_idx, pairs };
    plan.validate(scores.n_img())?;
    Ok(plan)
}

// ── merge application ───────────────────────────────────────────────────────

/// Saved state for the backward pass of `apply_merge`.
#[derive(Debug, Clone)]
pub struct MergeCache {
    plan: MergePlan,
    in_sizes: Tensor,
    in_seq: usize,
}

/// Applies a merge plan: each destination becomes the size-weighted mean of
/// itself and its sources, sizes add, source rows disappear, and remaining
/// tokens keep their original order. The [CLS] row is copied bit-identically.
pub fn apply_merge(batch: &TokenBatch, plan: &MergePlan) -> Result<(TokenBatch, MergeCache)> {
    let (b, n, d) = (batch.batch(), batch.seq_len(), batch.dim());
    let n_img = n - 1;
    plan.validate(n_img)?;
    let r = plan.r();
    let n_out = n - r;

    let mut is_src = vec![false; n_img];
    for &(s, _) in &plan.pairs {
        is_src[s] = true;
    }
    // Sources per destination, in src order (weighting is order-independent).
    let mut srcs_of: Vec<Vec<usize>> = vec![Vec::new(); n_img];
    for &(s, dst) in &plan.pairs {
        srcs_of[dst].push(s);
    }

    let mut out_tokens = vec![0.0f32; b * n_out * d];
    let mut out_sizes = vec![0.0f32; b * n_out];
    for bi in 0..b {
        let tok = |seq: usize| -> &[f32] {
            &batch.tokens.data()[(bi * n + seq) * d..(bi * n + seq + 1) * d]
        };
        let size = |seq: usize| -> f32 { batch.sizes.data()[bi * n + seq] };
        // [CLS]
        out_tokens[(bi * n_out) * d..(bi * n_out + 1) * d].copy_from_slice(tok(0));
        out_sizes[bi * n_out] = size(0);
        let mut row = 1usize;
        for img in 0..n_img {
            if is_src[img] {
                continue;
            }
            let seq = img + 1;
            let out_row = &mut out_tokens[(bi * n_out + row) * d..(bi * n_out + row + 1) * d];
            if srcs_of[img].is_empty() {
                out_row.copy_from_slice(tok(seq));
                out_sizes[bi * n_out + row] = size(seq);
            } else {
                let mut total = size(seq);
                for &s in &srcs_of[img] {
                    total += size(s + 1);
                }
                let inv = 1.0 / total;
                let w_dst = size(seq) * inv;
                for (o, &t) in out_row.iter_mut().zip(tok(seq)) {
                    *o = w_dst * t;
                }
                for &s in &srcs_of[img] {
                    let w = size(s + 1) * inv;
                    for (o, &t) in out_row.iter_mut().zip(tok(s + 1)) {
                        *o += w * t;
                    }
                }
                out_sizes[bi * n_out + row] = total;
            }
            row += 1;
        }
        debug_assert_eq!(row, n_out);
    }
    let out = TokenBatch::new(
        Tensor::from_raw(vec![b, n_out, d], out_tokens),
        Tensor::from_raw(vec![b, n_out], out_sizes),
    )?;
    out.tokens.check_finite("apply_merge")?;
    Ok((
        out,
        MergeCache {
            plan: plan.clone(),
            in_sizes: batch.sizes.clone(),
            in_seq: n,
        },
    ))
}

/// Backward of `apply_merge`: routes each output-row gradient to its
/// contributing input rows with the same size weights used forward.
pub fn apply_merge_backward(grad_out: &Tensor, cache: &MergeCache) -> Result<Tensor> {
    let n = cache.in_seq;
    let n_img = n - 1;
    let r = cache.plan.r();
    let n_out = n - r;
    if grad_out.rank() != 3 || grad_out.shape()[1] != n_out {
        return Err(Error::shape(format!(
            "apply_merge_backward: grad shape {:?}, expected [B, {n_out}, d]",
            grad_out.shape()
        )));
    }
    let (b, d) = (grad_out.shape()[0], grad_out.shape()[2]);
    let mut is_src = vec![false; n_img];
    for &(s, _) in &cache.plan.pairs {
        is_src[s] = true;
    }
    let mut srcs_of: Vec<Vec<usize>> = vec![Vec::new(); n_img];
    for &(s, dst) in &cache.plan.pairs {
        srcs_of[dst].push(s);
    }
    let mut dx = vec![0.0f32; b * n * d];
    for bi in 0..b {
        let size = |seq: usize| -> f32 { cache.in_sizes.data()[bi * n + seq] };
        let g = |row: usize| -> &[f32] {
            &grad_out.data()[(bi * n_out + row) * d..(bi * n_out + row + 1) * d]
        };
        dx[(bi * n) * d..(bi * n + 1) * d].copy_from_slice(g(0));
        let mut row = 1usize;
        for img in 0..n_img {
            if is_src[img] {
                continue;
            }
            let seq = img + 1;
            let grad = g(row);
            if srcs_of[img].is_empty() {
                dx[(bi * n + seq) * d..(bi * n + seq + 1) * d].copy_from_slice(grad);
            } else {
                let mut total = size(seq);
                for &s in &srcs_of[img] {
                    total += size(s + 1);
                }
                let inv = 1.0 / total;
                let w_dst = size(seq) * inv;
                let dst_slice = &mut dx[(bi * n + seq) * d..(bi * n + seq + 1) * d];
                for (o, &gv) in dst_slice.iter_mut().zip(grad) {
                    *o = w_dst * gv;
                }
                for &s in &srcs_of[img] {
                    let w = size(s + 1) * inv;
                    let src_slice = &mut dx[(bi * n + s + 1) * d..(bi * n + s + 2) * d];
                    for (o, &gv) in src_slice.iter_mut().zip(grad) {
                        *o = w * gv;
                    }
                }
            }
            row += 1;
        }
    }
    Ok(Tensor::from_raw(vec![b, n, d], dx))
}

// ── dense materialization ───────────────────────────────────────────────────

/// Dense `[N_out x N_in]` matrix over the full sequence (row 0 is the [CLS]
/// unit row) such that left-multiplying tokens reproduces `apply_merge` for
/// tokens with the given per-token sizes.
pub fn materialize_p(plan: &MergePlan, n_tokens: usize, sizes: &[f32]) -> Result<Tensor> {
    if n_tokens < 1 {
        return Err(Error::shape("materialize_p: empty sequence"));
    }
    if sizes.len() != n_tokens {
        return Err(Error::shape(format!(
            "materialize_p: {} sizes for {n_tokens} tokens",
            sizes.len()
        )));
    }
    let n_img = n_tokens - 1;
    plan.validate(n_img)?;
    let n_out = n_tokens - plan.r();
    let mut is_src = vec![false; n_img];
    for &(s, _) in &plan.pairs {
        is_src[s] = true;
    }
    let mut srcs_of: Vec<Vec<usize>> = vec![Vec::new(); n_img];
    for &(s, dst) in &plan.pairs {
        srcs_of[dst].push(s);
    }
    let mut p = vec![0.0f32; n_out * n_tokens];
    p[0] = 1.0; // [CLS] unit row
    let mut row = 1usize;
    for img in 0..n_img {
        if is_src[img] {
            continue;
        }
        let seq = img + 1;
        let pr = &mut p[row * n_tokens..(row + 1) * n_tokens];
        if srcs_of[img].is_empty() {
            pr[seq] = 1.0;
        } else {
            let mut total = sizes[seq];
            for &s in &srcs_of[img] {
                total += sizes[s + 1];
            }
            pr[seq] = sizes[seq] / total;
            for &s in &srcs_of[img] {
                pr[s + 1] = sizes[s + 1] / total;
            }
        }
        row += 1;
    }
    Ok(Tensor::from_raw(vec![n_out, n_tokens], p))
}
