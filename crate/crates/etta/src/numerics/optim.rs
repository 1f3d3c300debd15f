//! In-place optimizer update rules.

use crate::error::{Error, Result};

fn check_lens(what: &str, param: &[f32], grad: &[f32], bufs: &[&[f32]]) -> Result<()> {
    if grad.len() != param.len() || bufs.iter().any(|b| b.len() != param.len()) {
        return Err(Error::shape(format!(
            "{what}: parameter/gradient/buffer lengths differ"
        )));
    }
    Ok(())
}

/// SGD with momentum: `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_step(
    param: &mut [f32],
    grad: &[f32],
    velocity: &mut [f32],
    lr: f32,
    momentum: f32,
) -> Result<()> {
    check_lens("sgd_step", param, grad, &[velocity])?;
    if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!(
            "sgd_step: lr {lr} must be >= 0 and momentum {momentum} in [0, 1)"
        )));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Adam with bias correction; `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) -> Result<()> {
    check_lens("adam_step", param, grad, &[m, v])?;
    if step == 0 {
        return Err(Error::Config("adam_step: step is 1-based".into()));
    }
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = vec![1.0f32];
        let mut vel = vec![0.0f32];
        sgd_step(&mut p, &[1.0], &mut vel, 0.1, 0.9).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((vel[0] - 1.0).abs() < 1e-7);
        sgd_step(&mut p, &[1.0], &mut vel, 0.1, 0.9).unwrap();
        // v = 0.9 * 1 + 1 = 1.9; p = 0.9 - 0.19
        assert!((vel[0] - 1.9).abs() < 1e-7);
        assert!((p[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn sgd_zero_momentum_is_plain_descent() {
        let mut p = vec![2.0f32];
        let mut vel = vec![0.0f32];
        sgd_step(&mut p, &[4.0], &mut vel, 0.5, 0.0).unwrap();
        assert_eq!(p[0], 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g) up to eps.
        let mut p = vec![0.0f32];
        let (mut m, mut v) = (vec![0.0f32], vec![0.0f32]);
        adam_step(&mut p, &[3.0], &mut m, &mut v, 1, 0.01, 0.9, 0.999, 1e-8).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-5);
    }

    #[test]
    fn rejects_length_mismatch() {
        let mut p = vec![0.0f32; 2];
        let mut vel = vec![0.0f32; 1];
        assert!(sgd_step(&mut p, &[0.0; 2], &mut vel, 0.1, 0.0).is_err());
    }
}
