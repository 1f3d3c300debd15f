//! Hand-written forward/backward kernel pairs.
//!
//! Each forward returns its output together with a typed cache holding the
//! saved inputs and intermediates its matching backward needs; a backward
//! consumes exactly that cache type, so "forward and backward of the same
//! kind" is enforced at compile time. All math is f32.

mod gemm;
mod math;
pub mod optim;

pub(crate) use gemm::{dot as gemm_dot, gemm_nn, gemm_nt, gemm_tn};
pub(crate) use math::{fast_exp, fast_tanh, sum16};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Shared = Arc<Tensor>;

// ── matmul ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MatmulCache {
    a: Tensor,
    b: Tensor,
}

/// 2-D matrix product `a[m x k] * b[k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<(Tensor, MatmulCache)> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("matmul requires 2-D tensors"));
    }
    if a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {:?} * {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    let out = Tensor::from_raw(vec![m, n], out);
    out.check_finite("matmul")?;
    Ok((
        out,
        MatmulCache {
            a: a.clone(),
            b: b.clone(),
        },
    ))
}

/// Gradients of `matmul`: `grad_a = grad_out * b^T`, `grad_b = a^T * grad_out`.
pub fn matmul_backward(grad_out: &Tensor, cache: &MatmulCache) -> Result<(Tensor, Tensor)> {
    let (m, k, n) = (cache.a.rows(), cache.a.cols(), cache.b.cols());
    if grad_out.shape() != [m, n] {
        return Err(Error::shape(format!(
            "matmul_backward: grad shape {:?}, expected [{m}, {n}]",
            grad_out.shape()
        )));
    }
    let mut da = vec![0.0; m * k];
    gemm_nt(grad_out.data(), cache.b.data(), &mut da, m, n, k);
    let mut db = vec![0.0; k * n];
    gemm_tn(cache.a.data(), grad_out.data(), &mut db, k, m, n);
    let da = Tensor::from_raw(vec![m, k], da);
    let db = Tensor::from_raw(vec![k, n], db);
    da.check_finite("matmul_backward grad_a")?;
    db.check_finite("matmul_backward grad_b")?;
    Ok((da, db))
}

// ── linear (affine map over the last axis) ──────────────────────────────────

#[derive(Debug, Clone)]
pub struct LinearCache {
    x: Shared,
}

#[derive(Debug)]
pub struct LinearGrads {
    pub x: Tensor,
    /// Present only when requested; frozen weights get no gradient storage.
    pub w: Option<Tensor>,
    pub b: Option<Tensor>,
}

/// `y = x * w + b` where `x` is `[rows x in]` (any leading shape flattened),
/// `w` is `[in x out]`.
pub fn linear(x: &Shared, w: &Tensor, b: Option<&Tensor>) -> Result<(Tensor, LinearCache)> {
    if w.rank() != 2 {
        return Err(Error::shape("linear weight must be 2-D"));
    }
    let d_in = w.rows();
    let d_out = w.cols();
    let last = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("linear input must have a last axis"))?;
    if last != d_in {
        return Err(Error::shape(format!(
            "linear: input last dim {last} vs weight in-dim {d_in}"
        )));
    }
    let rows = x.len() / d_in;
    let mut out = vec![0.0; rows * d_out];
    if let Some(bias) = b {
        if bias.len() != d_out {
            return Err(Error::shape("linear bias length must equal out-dim"));
        }
        for r in 0..rows {
            out[r * d_out..(r + 1) * d_out].copy_from_slice(bias.data());
        }
    }
    gemm_nn(x.data(), w.data(), &mut out, rows, d_in, d_out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    let out = Tensor::from_raw(shape, out);
    out.check_finite("linear")?;
    Ok((out, LinearCache { x: x.clone() }))
}

/// Backward of `linear`. The weight is passed in rather than cached; weight
/// and bias gradients are computed only when `need_param_grads` is set.
pub fn linear_backward(
    grad_out: &Tensor,
    cache: &LinearCache,
    w: &Tensor,
    need_param_grads: bool,
) -> Result<LinearGrads> {
    let d_in = w.rows();
    let d_out = w.cols();
    let rows = cache.x.len() / d_in;
    if grad_out.len() != rows * d_out {
        return Err(Error::shape("linear_backward: grad shape mismatch"));
    }
    let mut dx = vec![0.0; rows * d_in];
    gemm_nt(grad_out.data(), w.data(), &mut dx, rows, d_out, d_in);
    let dx = Tensor::from_raw(cache.x.shape().to_vec(), dx);
    dx.check_finite("linear_backward grad_x")?;
    let (mut dw, mut db) = (None, None);
    if need_param_grads {
        let mut dwv = vec![0.0; d_in * d_out];
        gemm_tn(cache.x.data(), grad_out.data(), &mut dwv, d_in, rows, d_out);
        let mut dbv = vec![0.0; d_out];
        for r in 0..rows {
            let g = &grad_out.data()[r * d_out..(r + 1) * d_out];
            for (acc, &gv) in dbv.iter_mut().zip(g) {
                *acc += gv;
            }
        }
        let dwt = Tensor::from_raw(vec![d_in, d_out], dwv);
        let dbt = Tensor::from_raw(vec![d_out], dbv);
        dwt.check_finite("linear_backward grad_w")?;
        dbt.check_finite("linear_backward grad_b")?;
        dw = Some(dwt);
        db = Some(dbt);
    }
    Ok(LinearGrads { x: dx, w: dw, b: db })
}

// ── layernorm ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    x: Shared,
    mean: Vec<f32>,
    rstd: Vec<f32>,
}

/// Layer normalization over the last axis with affine parameters.
pub fn layernorm(
    x: &Shared,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, LayerNormCache)> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("layernorm input must have a last axis"))?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(format!(
            "layernorm: feature dim {d} vs gamma {} / beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Config("layernorm eps must be positive".into()));
    }
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut mean = vec![0.0; rows];
    let mut rstd = vec![0.0; rows];
    let g = gamma.data();
    let be = beta.data();
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mut m = 0.0f32;
        for &v in xr {
            m += v;
        }
        m /= d as f32;
        let mut var = 0.0f32;
        for &v in xr {
            let c = v - m;
            var += c * c;
        }
        var /= d as f32;
        let rs = 1.0 / (var + eps).sqrt();
        mean[r] = m;
        rstd[r] = rs;
        let or = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            or[j] = (xr[j] - m) * rs * g[j] + be[j];
        }
    }
    let out = Tensor::from_raw(x.shape().to_vec(), out);
    out.check_finite("layernorm")?;
    Ok((
        out,
        LayerNormCache {
            x: x.clone(),
            mean,
            rstd,
        },
    ))
}

/// Backward of `layernorm`; returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward(
    grad_out: &Tensor,
    cache: &LayerNormCache,
    gamma: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = gamma.len();
    let rows = cache.x.len() / d;
    if grad_out.len() != cache.x.len() {
        return Err(Error::shape("layernorm_backward: grad shape mismatch"));
    }
    let mut dx = vec![0.0; cache.x.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let g = gamma.data();
    for r in 0..rows {
        let xr = &cache.x.data()[r * d..(r + 1) * d];
        let gr = &grad_out.data()[r * d..(r + 1) * d];
        let (m, rs) = (cache.mean[r], cache.rstd[r]);
        // xhat = (x - m) * rs; dnorm = g * gr
        let mut dnorm_mean = 0.0f32;
        let mut dnorm_xhat_mean = 0.0f32;
        for j in 0..d {
            let xhat = (xr[j] - m) * rs;
            let dnorm = g[j] * gr[j];
            dnorm_mean += dnorm;
            dnorm_xhat_mean += dnorm * xhat;
            dgamma[j] += gr[j] * xhat;
            dbeta[j] += gr[j];
        }
        dnorm_mean /= d as f32;
        dnorm_xhat_mean /= d as f32;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let xhat = (xr[j] - m) * rs;
            let dnorm = g[j] * gr[j];
            dxr[j] = (dnorm - dnorm_mean - xhat * dnorm_xhat_mean) * rs;
        }
    }
    let dx = Tensor::from_raw(cache.x.shape().to_vec(), dx);
    let dgamma = Tensor::from_raw(vec![d], dgamma);
    let dbeta = Tensor::from_raw(vec![d], dbeta);
    dx.check_finite("layernorm_backward dx")?;
    Ok((dx, dgamma, dbeta))
}

// ── softmax ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SoftmaxCache {
    y: Shared,
    axis: usize,
}

/// Numerically stable softmax along `axis` (max subtraction before exp).
pub fn softmax(x: &Tensor, axis: usize) -> Result<(Tensor, SoftmaxCache)> {
    if axis >= x.rank() {
        return Err(Error::shape(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let alen = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    let data = x.data();
    for o in 0..outer {
        let base = o * alen * inner;
        for i in 0..inner {
            let mut mx = f32::NEG_INFINITY;
            for a in 0..alen {
                mx = mx.max(data[base + a * inner + i]);
            }
            let mut sum = 0.0f32;
            for a in 0..alen {
                let e = fast_exp(data[base + a * inner + i] - mx);
                out[base + a * inner + i] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for a in 0..alen {
                out[base + a * inner + i] *= inv;
            }
        }
    }
    let y = Arc::new(Tensor::from_raw(x.shape().to_vec(), out));
    y.check_finite("softmax")?;
    Ok((
        y.as_ref().clone(),
        SoftmaxCache { y, axis },
    ))
}

/// Backward of `softmax`: `dx = y * (dy - sum(dy * y) along axis)`.
pub fn softmax_backward(grad_out: &Tensor, cache: &SoftmaxCache) -> Result<Tensor> {
    let y = &cache.y;
    if grad_out.shape() != y.shape() {
        return Err(Error::shape("softmax_backward: grad shape mismatch"));
    }
    let axis = cache.axis;
    let alen = y.shape()[axis];
    let inner: usize = y.shape()[axis + 1..].iter().product();
    let outer: usize = y.shape()[..axis].iter().product();
    let mut dx = vec![0.0; y.len()];
    let yd = y.data();
    let gd = grad_out.data();
    for o in 0..outer {
        let base = o * alen * inner;
        for i in 0..inner {
            let mut s = 0.0f32;
            for a in 0..alen {
                let idx = base + a * inner + i;
                s += gd[idx] * yd[idx];
            }
            for a in 0..alen {
                let idx = base + a * inner + i;
                dx[idx] = yd[idx] * (gd[idx] - s);
            }
        }
    }
    let dx = Tensor::from_raw(y.shape().to_vec(), dx);
    dx.check_finite("softmax_backward")?;
    Ok(dx)
}

// ── gelu ────────────────────────────────────────────────────────────────────

const GELU_SCALE: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_CUBIC: f32 = 0.044_715;

#[derive(Debug, Clone)]
pub struct GeluCache {
    x: Tensor,
}

/// GELU with the tanh approximation.
pub fn gelu(x: &Tensor) -> Result<(Tensor, GeluCache)> {
    let out: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| {
            let u = GELU_SCALE * (v + GELU_CUBIC * v * v * v);
            0.5 * v * (1.0 + fast_tanh(u))
        })
        .collect();
    let out = Tensor::from_raw(x.shape().to_vec(), out);
    out.check_finite("gelu")?;
    Ok((out, GeluCache { x: x.clone() }))
}

pub fn gelu_backward(grad_out: &Tensor, cache: &GeluCache) -> Result<Tensor> {
    if grad_out.shape() != cache.x.shape() {
        return Err(Error::shape("gelu_backward: grad shape mismatch"));
    }
    let dx: Vec<f32> = cache
        .x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let u = GELU_SCALE * (v + GELU_CUBIC * v * v * v);
            let t = fast_tanh(u);
            let du = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect();
    let dx = Tensor::from_raw(cache.x.shape().to_vec(), dx);
    dx.check_finite("gelu_backward")?;
    Ok(dx)
}

// ── cross entropy ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CrossEntropyCache {
    probs: Tensor,
    labels: Vec<u32>,
}

/// Mean negative log-likelihood of `labels` under softmaxed `logits [B x C]`.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<(f32, CrossEntropyCache)> {
    if logits.rank() != 2 {
        return Err(Error::shape("cross_entropy expects [batch x classes]"));
    }
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::shape(format!(
            "cross_entropy: {b} rows vs {} labels",
            labels.len()
        )));
    }
    for &l in labels {
        if l as usize >= c {
            return Err(Error::Index(format!(
                "label {l} out of range for {c} classes"
            )));
        }
    }
    let (probs, _) = softmax(logits, 1)?;
    let mut loss = 0.0f64;
    for (r, &l) in labels.iter().enumerate() {
        let p = probs.data()[r * c + l as usize].max(f32::MIN_POSITIVE);
        loss -= (p as f64).ln();
    }
    let loss = (loss / b as f64) as f32;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy loss".into()));
    }
    Ok((
        loss,
        CrossEntropyCache {
            probs,
            labels: labels.to_vec(),
        },
    ))
}

/// Gradient of mean NLL w.r.t. logits: `(softmax - onehot) / batch`.
pub fn cross_entropy_backward(cache: &CrossEntropyCache) -> Tensor {
    let (b, c) = (cache.probs.rows(), cache.probs.cols());
    let inv = 1.0 / b as f32;
    let mut dx = cache.probs.data().to_vec();
    for (r, &l) in cache.labels.iter().enumerate() {
        dx[r * c + l as usize] -= 1.0;
    }
    for v in &mut dx {
        *v *= inv;
    }
    Tensor::from_raw(vec![b, c], dx)
}
