//! Central finite-difference oracles for every handwritten backward pass.
//! Kernel-level checks difference the kernels themselves; block- and
//! model-level checks difference an independent f64 reference forward so the
//! probe is free of f32 evaluation noise.

mod common;

use std::sync::Arc;

use common::{ref_block, ref_forward, RefModel, RefState};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use etta::numerics::{
    cross_entropy, cross_entropy_backward, gelu, gelu_backward, layernorm, layernorm_backward,
    linear, linear_backward, matmul, matmul_backward, softmax, softmax_backward,
};
use etta::tensor::Tensor;
use etta::tokenagg::{apply_merge, apply_merge_backward, bipartite_soft_matching, similarity_scores, TokenBatch};
use etta::vit::{
    block_backward, block_forward, model_backward, model_backward_train, model_forward,
    LossGrads, MergeConfig, TunableParams, ViTConfig, ViTParams,
};

const SEEDS: u64 = 20;
const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
            let u2: f32 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// L2-aggregated relative error between an analytic and an FD gradient.
/// Mathematically zero gradients (e.g. the key bias, which cancels under
/// softmax shift invariance) compare as rounding noise on both sides, so an
/// absolute difference below 1e-5 counts as exact.
fn rel_err(analytic: &[f32], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    let (mut na, mut nf, mut nd) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &f) in analytic.iter().zip(fd) {
        let a = a as f64;
        na += a * a;
        nf += f * f;
        nd += (a - f) * (a - f);
    }
    if nd.sqrt() <= 1e-5 {
        return 0.0;
    }
    nd.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-10)
}

/// Central differences over every coordinate. `eval_at(i, d)` must perturb
/// coordinate `i` by `d`, evaluate the loss, and undo the perturbation.
fn fd_grad(n: usize, h: f64, mut eval_at: impl FnMut(usize, f32) -> f64) -> Vec<f64> {
    (0..n)
        .map(|i| (eval_at(i, h as f32) - eval_at(i, -(h as f32))) / (2.0 * h))
        .collect()
}

/// Weighted-sum probe loss in f64: sum(c .* y).
fn probe(y: &Tensor, c: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(c.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

// ── kernel-level checks ─────────────────────────────────────────────────────

#[test]
fn matmul_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = randn(&mut rng, &[3, 4]);
        let mut b = randn(&mut rng, &[4, 2]);
        let c = randn(&mut rng, &[3, 2]);
        let (_, cache) = matmul(&a, &b).unwrap();
        let (da, db) = matmul_backward(&c, &cache).unwrap();
        let fd_a = fd_grad(a.len(), H, |i, d| {
            a.data_mut()[i] += d;
            let out = matmul(&a, &b).unwrap().0;
            a.data_mut()[i] -= d;
            probe(&out, &c)
        });
        let fd_b = fd_grad(b.len(), H, |i, d| {
            b.data_mut()[i] += d;
            let out = matmul(&a, &b).unwrap().0;
            b.data_mut()[i] -= d;
            probe(&out, &c)
        });
        assert!(rel_err(da.data(), &fd_a) < TOL, "seed {seed} grad a");
        assert!(rel_err(db.data(), &fd_b) < TOL, "seed {seed} grad b");
    }
}

#[test]
fn linear_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut x = randn(&mut rng, &[5, 4]);
        let mut w = randn(&mut rng, &[4, 3]);
        let mut b = randn(&mut rng, &[3]);
        let c = randn(&mut rng, &[5, 3]);
        let (_, cache) = linear(&Arc::new(x.clone()), &w, Some(&b)).unwrap();
        let g = linear_backward(&c, &cache, &w, true).unwrap();
        let eval = |x: &Tensor, w: &Tensor, b: &Tensor| {
            probe(&linear(&Arc::new(x.clone()), w, Some(b)).unwrap().0, &c)
        };
        let fd_x = fd_grad(x.len(), H, |i, d| {
            x.data_mut()[i] += d;
            let v = eval(&x, &w, &b);
            x.data_mut()[i] -= d;
            v
        });
        let fd_w = fd_grad(w.len(), H, |i, d| {
            w.data_mut()[i] += d;
            let v = eval(&x, &w, &b);
            w.data_mut()[i] -= d;
            v
        });
        let fd_b = fd_grad(b.len(), H, |i, d| {
            b.data_mut()[i] += d;
            let v = eval(&x, &w, &b);
            b.data_mut()[i] -= d;
            v
        });
        assert!(rel_err(g.x.data(), &fd_x) < TOL, "seed {seed} grad x");
        assert!(rel_err(g.w.as_ref().unwrap().data(), &fd_w) < TOL, "seed {seed} grad w");
        assert!(rel_err(g.b.as_ref().unwrap().data(), &fd_b) < TOL, "seed {seed} grad b");
    }
}

#[test]
fn layernorm_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut x = randn(&mut rng, &[4, 6]);
        let mut gamma = randn(&mut rng, &[6]);
        let mut beta = randn(&mut rng, &[6]);
        let c = randn(&mut rng, &[4, 6]);
        let eps = 1e-6;
        let (_, cache) = layernorm(&Arc::new(x.clone()), &gamma, &beta, eps).unwrap();
        let (dx, dg, db) = layernorm_backward(&c, &cache, &gamma).unwrap();
        let eval = |x: &Tensor, g: &Tensor, b: &Tensor| {
            probe(&layernorm(&Arc::new(x.clone()), g, b, eps).unwrap().0, &c)
        };
        let fd_x = fd_grad(x.len(), H, |i, d| {
            x.data_mut()[i] += d;
            let v = eval(&x, &gamma, &beta);
            x.data_mut()[i] -= d;
            v
        });
        let fd_g = fd_grad(gamma.len(), H, |i, d| {
            gamma.data_mut()[i] += d;
            let v = eval(&x, &gamma, &beta);
            gamma.data_mut()[i] -= d;
            v
        });
        let fd_b = fd_grad(beta.len(), H, |i, d| {
            beta.data_mut()[i] += d;
            let v = eval(&x, &gamma, &beta);
            beta.data_mut()[i] -= d;
            v
        });
        assert!(rel_err(dx.data(), &fd_x) < TOL, "seed {seed} grad x");
        assert!(rel_err(dg.data(), &fd_g) < TOL, "seed {seed} grad gamma");
        assert!(rel_err(db.data(), &fd_b) < TOL, "seed {seed} grad beta");
    }
}

#[test]
fn softmax_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        for axis in [0usize, 1] {
            let mut x = randn(&mut rng, &[3, 5]);
            let c = randn(&mut rng, &[3, 5]);
            let (_, cache) = softmax(&x, axis).unwrap();
            let dx = softmax_backward(&c, &cache).unwrap();
            let fd = fd_grad(x.len(), H, |i, d| {
                x.data_mut()[i] += d;
                let v = probe(&softmax(&x, axis).unwrap().0, &c);
                x.data_mut()[i] -= d;
                v
            });
            assert!(rel_err(dx.data(), &fd) < TOL, "seed {seed} axis {axis}");
        }
    }
}

#[test]
fn gelu_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let mut x = randn(&mut rng, &[24]);
        let c = randn(&mut rng, &[24]);
        let (_, cache) = gelu(&x).unwrap();
        let dx = gelu_backward(&c, &cache).unwrap();
        let fd = fd_grad(x.len(), H, |i, d| {
            x.data_mut()[i] += d;
            let v = probe(&gelu(&x).unwrap().0, &c);
            x.data_mut()[i] -= d;
            v
        });
        assert!(rel_err(dx.data(), &fd) < TOL, "seed {seed}");
    }
}

#[test]
fn cross_entropy_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut logits = randn(&mut rng, &[4, 5]);
        let labels: Vec<u32> = (0..4).map(|_| rng.gen_range(0..5u32)).collect();
        let (_, cache) = cross_entropy(&logits, &labels).unwrap();
        let dl = cross_entropy_backward(&cache);
        let fd = fd_grad(logits.len(), H, |i, d| {
            logits.data_mut()[i] += d;
            let v = cross_entropy(&logits, &labels).unwrap().0 as f64;
            logits.data_mut()[i] -= d;
            v
        });
        assert!(rel_err(dl.data(), &fd) < TOL, "seed {seed}");
    }
}

#[test]
fn token_merge_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let (b, n, d) = (2usize, 7usize, 3usize);
        let mut tokens = randn(&mut rng, &[b, n, d]);
        let sizes = Tensor::new(
            vec![b, n],
            (0..b * n).map(|i| 1.0 + (i % 3) as f32).collect(),
        )
        .unwrap();
        let keys = randn(&mut rng, &[b, n, 4]);
        let plan = bipartite_soft_matching(&similarity_scores(&keys).unwrap(), 2, 0).unwrap();
        let batch = TokenBatch::new(tokens.clone(), sizes.clone()).unwrap();
        let (out, cache) = apply_merge(&batch, &plan).unwrap();
        let c = randn(&mut rng, out.tokens.shape());
        let dt = apply_merge_backward(&c, &cache).unwrap();
        let fd = fd_grad(tokens.len(), H, |i, d| {
            tokens.data_mut()[i] += d;
            let batch = TokenBatch::new(tokens.clone(), sizes.clone()).unwrap();
            let v = probe(&apply_merge(&batch, &plan).unwrap().0.tokens, &c);
            tokens.data_mut()[i] -= d;
            v
        });
        assert!(rel_err(dt.data(), &fd) < TOL, "seed {seed}");
    }
}

// ── block-level check (d = 8, N = 6) ────────────────────────────────────────

fn tiny_block_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        hidden_dim: 8,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        ln_eps: 1e-6,
    }
}

/// f64 probe of the reference block output.
fn ref_block_probe(
    tokens: &[f64],
    sizes: &[f64],
    b: usize,
    n: usize,
    model: &RefModel,
    state: &RefState,
    plan: &etta::tokenagg::MergePlan,
    c: &[f64],
) -> f64 {
    let (out, _, _) = ref_block(tokens, sizes, b, n, model, 0, Some(state), Some(plan));
    out.iter().zip(c).map(|(&a, &b)| a * b).sum()
}

#[test]
fn block_gradients_match_finite_differences() {
    let cfg = tiny_block_config();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let params = ViTParams::init(&cfg, 900 + seed).unwrap();
        let mut state = TunableParams::new(&params, &[0]).unwrap();
        state.delta_layers.insert(0, randn(&mut rng, &[8]));
        // Nudge the live norms off identity so their gradients are generic.
        for v in state.ln.per_layer[0].0.gamma.data_mut() {
            *v += 0.1 * rng.gen::<f32>();
        }
        for v in state.ln.per_layer[0].1.beta.data_mut() {
            *v += 0.1 * rng.gen::<f32>();
        }

        let (b, n, d) = (2usize, 6usize, 8usize);
        let tokens = randn(&mut rng, &[b, n, d]);
        let sizes = Tensor::new(
            vec![b, n],
            (0..b * n).map(|i| 1.0 + (i % 2) as f32).collect(),
        )
        .unwrap();
        let batch = TokenBatch::new(tokens.clone(), sizes.clone()).unwrap();
        let (out, plan, cache) =
            block_forward(&batch, 0, &params, Some(&state), MergeConfig { r: 2 }).unwrap();
        let plan = plan.unwrap();
        let c = randn(&mut rng, out.tokens.shape());
        let bwd = block_backward(&c, &cache, &params, Some(&state), true).unwrap();
        let w = bwd.weights.as_ref().unwrap();

        let mut rm = RefModel::from_params(&params);
        let mut rs = RefState::from_tunables(&state);
        let mut tok64: Vec<f64> = tokens.data().iter().map(|&v| v as f64).collect();
        let siz64: Vec<f64> = sizes.data().iter().map(|&v| v as f64).collect();
        let c64: Vec<f64> = c.data().iter().map(|&v| v as f64).collect();

        // Input tokens.
        let fd = fd_grad(tok64.len(), H, |i, dlt| {
            tok64[i] += dlt as f64;
            let v = ref_block_probe(&tok64, &siz64, b, n, &rm, &rs, &plan, &c64);
            tok64[i] -= dlt as f64;
            v
        });
        assert!(rel_err(bwd.dx.data(), &fd) < TOL, "seed {seed} d_tokens");

        // delta_l.
        let fd = fd_grad(d, H, |i, dlt| {
            rs.delta_layers.get_mut(&0).unwrap()[i] += dlt as f64;
            let v = ref_block_probe(&tok64, &siz64, b, n, &rm, &rs, &plan, &c64);
            rs.delta_layers.get_mut(&0).unwrap()[i] -= dlt as f64;
            v
        });
        assert!(
            rel_err(bwd.delta_l.as_ref().unwrap().data(), &fd) < TOL,
            "seed {seed} delta_l"
        );

        // Live LayerNorm affines.
        for (name, analytic, pick) in [
            ("ln1.gamma", &bwd.ln1.gamma, 0usize),
            ("ln1.beta", &bwd.ln1.beta, 1),
            ("ln2.gamma", &bwd.ln2.gamma, 2),
            ("ln2.beta", &bwd.ln2.beta, 3),
        ] {
            let fd = fd_grad(d, H, |i, dlt| {
                {
                    let site = &mut rs.ln[0];
                    (match pick {
                        0 => &mut site.0,
                        1 => &mut site.1,
                        2 => &mut site.2,
                        _ => &mut site.3,
                    })[i] += dlt as f64;
                }
                let v = ref_block_probe(&tok64, &siz64, b, n, &rm, &rs, &plan, &c64);
                let site = &mut rs.ln[0];
                (match pick {
                    0 => &mut site.0,
                    1 => &mut site.1,
                    2 => &mut site.2,
                    _ => &mut site.3,
                })[i] -= dlt as f64;
                v
            });
            assert!(rel_err(analytic.data(), &fd) < TOL, "seed {seed} {name}");
        }

        // Every frozen weight and bias in the block.
        let weight_cases: Vec<(&str, &Tensor)> = vec![
            ("blocks.0.attn.wq", &w.wq),
            ("blocks.0.attn.bq", &w.bq),
            ("blocks.0.attn.wk", &w.wk),
            ("blocks.0.attn.bk", &w.bk),
            ("blocks.0.attn.wv", &w.wv),
            ("blocks.0.attn.bv", &w.bv),
            ("blocks.0.attn.wo", &w.wo),
            ("blocks.0.attn.bo", &w.bo),
            ("blocks.0.mlp.w1", &w.w1),
            ("blocks.0.mlp.b1", &w.b1),
            ("blocks.0.mlp.w2", &w.w2),
            ("blocks.0.mlp.b2", &w.b2),
        ];
        for (name, analytic) in weight_cases {
            let coords = analytic.len();
            let fd = fd_grad(coords, H, |i, dlt| {
                rm.get_mut(name)[i] += dlt as f64;
                let v = ref_block_probe(&tok64, &siz64, b, n, &rm, &rs, &plan, &c64);
                rm.get_mut(name)[i] -= dlt as f64;
                v
            });
            assert!(rel_err(analytic.data(), &fd) < TOL, "seed {seed} {name}");
        }
    }
}

// ── full-model tunable check ────────────────────────────────────────────────

fn tiny_model_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        hidden_dim: 8,
        num_layers: 3,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        ln_eps: 1e-6,
    }
}

/// f64 loss: cross entropy on logits plus a probe on each layer's [CLS]
/// features, so gradients reach the model through both paths.
struct ModelLoss {
    labels: Vec<u32>,
    probes: Vec<Tensor>,
    quad: f64,
}

impl ModelLoss {
    /// Same loss evaluated on reference (f64) outputs.
    fn eval_ref(&self, logits: &[f64], layer_cls: &[Vec<f64>], b: usize, c: usize) -> f64 {
        let mut total = 0.0f64;
        for bi in 0..b {
            let row = &logits[bi * c..(bi + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            total += -((row[self.labels[bi] as usize] - max) - z.ln());
        }
        total /= b as f64;
        for (cls, pr) in layer_cls.iter().zip(&self.probes) {
            for (&v, &p) in cls.iter().zip(pr.data()) {
                total += (p as f64) * v + 0.5 * self.quad * v * v;
            }
        }
        total
    }

    /// Analytic upstream gradients at the unperturbed point.
    fn grads(&self, logits: &Tensor, layer_cls: &[Tensor]) -> LossGrads {
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        let mut dl = vec![0.0f32; b * c];
        for bi in 0..b {
            let row = logits.row(bi);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| ((v as f64) - max).exp()).sum();
            for ci in 0..c {
                let p = ((row[ci] as f64) - max).exp() / z;
                let onehot = if self.labels[bi] as usize == ci { 1.0 } else { 0.0 };
                dl[bi * c + ci] = ((p - onehot) / b as f64) as f32;
            }
        }
        let layer = layer_cls
            .iter()
            .zip(&self.probes)
            .map(|(cls, pr)| {
                let g: Vec<f32> = cls
                    .data()
                    .iter()
                    .zip(pr.data())
                    .map(|(&v, &p)| ((p as f64) + self.quad * (v as f64)) as f32)
                    .collect();
                Some(Tensor::new(cls.shape().to_vec(), g).unwrap())
            })
            .collect();
        LossGrads {
            logits: Tensor::new(vec![b, c], dl).unwrap(),
            layer_cls: layer,
        }
    }
}

#[test]
fn model_tunable_gradients_match_finite_differences() {
    let cfg = tiny_model_config();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let params = ViTParams::init(&cfg, 1700 + seed).unwrap();
        let mut state = TunableParams::new(&params, &[0, 1]).unwrap();
        state.delta = randn(&mut rng, &[8]);
        state.delta = state.delta.map(|v| 0.1 * v);
        for l in 0..2 {
            let t = randn(&mut rng, &[8]).map(|v| 0.1 * v);
            state.delta_layers.insert(l, t);
        }
        let images = randn(&mut rng, &[2, 3, 8, 8]).map(|v| 0.5 + 0.25 * v);
        let loss = ModelLoss {
            labels: vec![rng.gen_range(0..3u32), rng.gen_range(0..3u32)],
            probes: (0..cfg.num_layers).map(|_| randn(&mut rng, &[2, 8])).collect(),
            quad: 0.5,
        };

        let trace = model_forward(&images, &params, Some(&state), MergeConfig { r: 1 }, None).unwrap();
        let plans = trace.plans.clone();
        let upstream = loss.grads(&trace.logits, &trace.layer_cls);
        let grads = model_backward(&trace, &upstream, &params, &state).unwrap();

        let rm = RefModel::from_params(&params);
        let mut rs = RefState::from_tunables(&state);
        let c = cfg.num_classes;

        // delta.
        let fd = fd_grad(8, H, |i, dlt| {
            rs.delta[i] += dlt as f64;
            let v = {
                let tr = ref_forward(&rm, Some(&rs), &images, &plans);
                loss.eval_ref(&tr.logits, &tr.layer_cls, 2, c)
            };
            rs.delta[i] -= dlt as f64;
            v
        });
        assert!(rel_err(grads.delta.data(), &fd) < TOL, "seed {seed} delta");

        // Each delta_l.
        for l in 0..2usize {
            let fd = fd_grad(8, H, |i, dlt| {
                rs.delta_layers.get_mut(&l).unwrap()[i] += dlt as f64;
                let tr = ref_forward(&rm, Some(&rs), &images, &plans);
                let v = loss.eval_ref(&tr.logits, &tr.layer_cls, 2, c);
                rs.delta_layers.get_mut(&l).unwrap()[i] -= dlt as f64;
                v
            });
            assert!(
                rel_err(grads.delta_layers[&l].data(), &fd) < TOL,
                "seed {seed} delta_{l}"
            );
        }

        // Every LayerNorm affine, per layer and final.
        for l in 0..cfg.num_layers {
            for pick in 0..4usize {
                let analytic = match pick {
                    0 => &grads.ln.per_layer[l].0.gamma,
                    1 => &grads.ln.per_layer[l].0.beta,
                    2 => &grads.ln.per_layer[l].1.gamma,
                    _ => &grads.ln.per_layer[l].1.beta,
                };
                let fd = fd_grad(8, H, |i, dlt| {
                    {
                        let site = &mut rs.ln[l];
                        (match pick {
                            0 => &mut site.0,
                            1 => &mut site.1,
                            2 => &mut site.2,
                            _ => &mut site.3,
                        })[i] += dlt as f64;
                    }
                    let tr = ref_forward(&rm, Some(&rs), &images, &plans);
                    let v = loss.eval_ref(&tr.logits, &tr.layer_cls, 2, c);
                    let site = &mut rs.ln[l];
                    (match pick {
                        0 => &mut site.0,
                        1 => &mut site.1,
                        2 => &mut site.2,
                        _ => &mut site.3,
                    })[i] -= dlt as f64;
                    v
                });
                assert!(
                    rel_err(analytic.data(), &fd) < TOL,
                    "seed {seed} layer {l} ln site {pick}"
                );
            }
        }
        for pick in 0..2usize {
            let analytic = match pick {
                0 => &grads.ln.final_ln.gamma,
                _ => &grads.ln.final_ln.beta,
            };
            let fd = fd_grad(8, H, |i, dlt| {
                (match pick {
                    0 => &mut rs.final_gamma,
                    _ => &mut rs.final_beta,
                })[i] += dlt as f64;
                let tr = ref_forward(&rm, Some(&rs), &images, &plans);
                let v = loss.eval_ref(&tr.logits, &tr.layer_cls, 2, c);
                (match pick {
                    0 => &mut rs.final_gamma,
                    _ => &mut rs.final_beta,
                })[i] -= dlt as f64;
                v
            });
            assert!(rel_err(analytic.data(), &fd) < TOL, "seed {seed} final ln {pick}");
        }
    }
}

#[test]
fn gradients_outside_aug_set_are_absent_and_zero_loss_gives_zero_grads() {
    let cfg = tiny_model_config();
    let params = ViTParams::init(&cfg, 42).unwrap();
    let state = TunableParams::new(&params, &[0, 1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let images = randn(&mut rng, &[2, 3, 8, 8]);
    let trace = model_forward(&images, &params, Some(&state), MergeConfig { r: 1 }, None).unwrap();

    // Layer 2 carries no delta_2, so no gradient entry may appear for it.
    let upstream = LossGrads::from_logits(Tensor::full(&[2, 3], 0.3));
    let grads = model_backward(&trace, &upstream, &params, &state).unwrap();
    assert!(grads.delta_layers.contains_key(&0));
    assert!(grads.delta_layers.contains_key(&1));
    assert!(!grads.delta_layers.contains_key(&2));

    // An all-zero upstream gradient must produce an all-zero gradient set.
    let zero = LossGrads::from_logits(Tensor::zeros(&[2, 3]));
    let grads = model_backward(&trace, &zero, &params, &state).unwrap();
    assert!(grads.delta.data().iter().all(|&v| v == 0.0));
    for g in grads.delta_layers.values() {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
    for (a, b) in &grads.ln.per_layer {
        for t in [&a.gamma, &a.beta, &b.gamma, &b.beta] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }
}

// ── full-parameter training path ────────────────────────────────────────────

#[test]
fn train_gradients_match_finite_differences() {
    let cfg = tiny_model_config();
    for seed in 0..2u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let params = ViTParams::init(&cfg, 2600 + seed).unwrap();
        let images = randn(&mut rng, &[2, 3, 8, 8]).map(|v| 0.5 + 0.25 * v);
        let labels = vec![rng.gen_range(0..3u32), rng.gen_range(0..3u32)];

        // No merging on the training path keeps the check independent of
        // plan replay.
        let trace = model_forward(&images, &params, None, MergeConfig { r: 0 }, None).unwrap();
        let (_, ce) = cross_entropy(&trace.logits, &labels).unwrap();
        let d_logits = cross_entropy_backward(&ce);
        let grads = model_backward_train(&trace, &d_logits, &params).unwrap();

        let eval = |p: &ViTParams| {
            let tr = model_forward(&images, p, None, MergeConfig { r: 0 }, None).unwrap();
            let (b, c) = (tr.logits.shape()[0], tr.logits.shape()[1]);
            let _ = c;
            let mut total = 0.0f64;
            for bi in 0..b {
                let row = tr.logits.row(bi);
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let z: f64 = row.iter().map(|&v| ((v as f64) - max).exp()).sum();
                total += -(((row[labels[bi] as usize] as f64) - max) - z.ln());
            }
            total / b as f64
        };

        let mut flat_analytic: Vec<f32> = Vec::new();
        let mut flat_fd: Vec<f64> = Vec::new();
        let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        for name in &names {
            let analytic = lookup(&grads, name).data().to_vec();
            let coords = analytic.len();
            // Sample a handful of coordinates per tensor to bound runtime.
            let step = (coords / 6).max(1);
            let mut pp = params.clone();
            for i in (0..coords).step_by(step) {
                let fd = {
                    lookup_mut(&mut pp, name).data_mut()[i] += H as f32;
                    let hi = eval(&pp);
                    lookup_mut(&mut pp, name).data_mut()[i] -= 2.0 * H as f32;
                    let lo = eval(&pp);
                    lookup_mut(&mut pp, name).data_mut()[i] += H as f32;
                    (hi - lo) / (2.0 * H)
                };
                flat_analytic.push(analytic[i]);
                flat_fd.push(fd);
            }
        }
        let err = rel_err(&flat_analytic, &flat_fd);
        assert!(err < TOL, "seed {seed}: train-path rel err {err}");
    }
}

fn lookup<'a>(p: &'a ViTParams, name: &str) -> &'a Tensor {
    p.named_tensors()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .unwrap()
}

fn lookup_mut<'a>(p: &'a mut ViTParams, name: &str) -> &'a mut Tensor {
    if let Some(rest) = name.strip_prefix("blocks.") {
        let (idx, field) = rest.split_once('.').unwrap();
        let b = &mut p.blocks[idx.parse::<usize>().unwrap()];
        return match field {
            "ln1.gamma" => &mut b.ln1.gamma,
            "ln1.beta" => &mut b.ln1.beta,
            "attn.wq" => &mut b.wq,
            "attn.bq" => &mut b.bq,
            "attn.wk" => &mut b.wk,
            "attn.bk" => &mut b.bk,
            "attn.wv" => &mut b.wv,
            "attn.bv" => &mut b.bv,
            "attn.wo" => &mut b.wo,
            "attn.bo" => &mut b.bo,
            "ln2.gamma" => &mut b.ln2.gamma,
            "ln2.beta" => &mut b.ln2.beta,
            "mlp.w1" => &mut b.w1,
            "mlp.b1" => &mut b.b1,
            "mlp.w2" => &mut b.w2,
            "mlp.b2" => &mut b.b2,
            _ => unreachable!("unknown block field {field}"),
        };
    }
    match name {
        "patch_proj.weight" => &mut p.patch_w,
        "patch_proj.bias" => &mut p.patch_b,
        "pos_embed" => &mut p.pos,
        "cls_embed" => &mut p.cls,
        "final_ln.gamma" => &mut p.final_ln.gamma,
        "final_ln.beta" => &mut p.final_ln.beta,
        "head.weight" => &mut p.head_w,
        "head.bias" => &mut p.head_b,
        _ => unreachable!("unknown param {name}"),
    }
}
