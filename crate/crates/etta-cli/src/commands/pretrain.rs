//! `etta pretrain`: trains the source model on the clean synthetic dataset
//! with Adam until the running train accuracy clears the configured target,
//! then saves the checkpoint and a per-epoch JSONL training log. Refuses to
//! save anything if the target is never reached.

use std::time::Instant;

use serde::Serialize;

use etta::adapt::argmax_rows;
use etta::data::{batches, ingest_raw, shuffled};
use etta::numerics::optim::adam_step;
use etta::numerics::{cross_entropy, cross_entropy_backward};
use etta::vit::{model_forward, save_checkpoint, MergeConfig, ViTParams};
use etta::{Error, Result, Tensor};

use crate::config::{derive_seed, RunConfig};

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    mean_loss: f64,
    train_accuracy: f64,
    wall_ms: f64,
}

#[derive(Serialize)]
struct FinalLine {
    converged: bool,
    epochs_run: usize,
    final_train_accuracy: f64,
    test_accuracy: f64,
}

fn dataset_or_hint(path: &std::path::Path) -> Result<(Tensor, Vec<u32>, usize)> {
    if !path.exists() {
        return Err(Error::State(format!(
            "dataset {} not found; run `etta gen-data --config <file>` first",
            path.display()
        )));
    }
    ingest_raw(path)
}

/// Frozen accuracy of `params` over a labeled set, evaluated in batches.
pub fn frozen_accuracy(params: &ViTParams, images: &Tensor, labels: &[u32]) -> Result<f64> {
    let mut correct = 0usize;
    for batch in batches(images, labels, 256)? {
        let trace = model_forward(&batch.images, params, None, MergeConfig { r: 0 }, None)?;
        correct += argmax_rows(&trace.logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / labels.len() as f64)
}

pub fn run(config: &RunConfig) -> Result<()> {
    let (train_images, train_labels, train_classes) =
        dataset_or_hint(&config.paths.dataset_train)?;
    let (test_images, test_labels, _) = dataset_or_hint(&config.paths.dataset_test)?;
    if train_classes != config.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {train_classes} classes, model expects {}",
            config.model.num_classes
        )));
    }

    let mut params = ViTParams::init(&config.model, derive_seed(config.seed, 2))?;
    let mut m = ViTParams::zeros(&config.model)?;
    let mut v = ViTParams::zeros(&config.model)?;
    let mut step = 0u64;
    let lr = config.train.lr;

    let mut log: Vec<String> = Vec::new();
    let mut converged = false;
    let mut epochs_run = 0usize;
    let mut last_train_acc = 0.0f64;
    for epoch in 0..config.train.max_epochs {
        let started = Instant::now();
        let (images, labels) = shuffled(
            &train_images,
            &train_labels,
            derive_seed(config.seed, 1000 + epoch as u64),
        )?;
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut hits = 0usize;
        for batch in batches(&images, &labels, config.train.batch_size)? {
            let trace = model_forward(&batch.images, &params, None, MergeConfig { r: 0 }, None)?;
            let (loss, cache) = cross_entropy(&trace.logits, &batch.labels)?;
            let d_logits = cross_entropy_backward(&cache);
            let grads = etta::vit::model_backward_train(&trace, &d_logits, &params)?;
            step += 1;
            // All four holders enumerate in the same canonical order.
            let mut p_list = params.named_tensors_mut();
            let g_list = grads.named_tensors();
            let mut m_list = m.named_tensors_mut();
            let mut v_list = v.named_tensors_mut();
            for i in 0..p_list.len() {
                adam_step(
                    p_list[i].1.data_mut(),
                    g_list[i].1.data(),
                    m_list[i].1.data_mut(),
                    v_list[i].1.data_mut(),
                    step,
                    lr,
                    0.9,
                    0.999,
                    1e-8,
                )?;
            }

            let n = batch.labels.len();
            loss_sum += loss as f64 * n as f64;
            hits += argmax_rows(&trace.logits)
                .iter()
                .zip(&batch.labels)
                .filter(|(a, b)| a == b)
                .count();
            seen += n;
        }
        epochs_run = epoch + 1;
        last_train_acc = hits as f64 / seen as f64;
        let line = EpochLine {
            epoch,
            mean_loss: loss_sum / seen as f64,
            train_accuracy: last_train_acc,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        eprintln!(
            "epoch {:>3}: loss {:.4}  train {:.4}  ({:.1}s)",
            epoch,
            line.mean_loss,
            line.train_accuracy,
            line.wall_ms / 1e3
        );
        log.push(serde_json::to_string(&line)?);
        if last_train_acc >= config.train.target_train_accuracy as f64 {
            converged = true;
            break;
        }
    }

    let test_accuracy = if converged {
        frozen_accuracy(&params, &test_images, &test_labels)?
    } else {
        f64::NAN
    };
    log.push(serde_json::to_string(&FinalLine {
        converged,
        epochs_run,
        final_train_accuracy: last_train_acc,
        test_accuracy,
    })?);
    if let Some(dir) = config.paths.train_log.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&config.paths.train_log, log.join("\n") + "\n")?;

    if !converged {
        return Err(Error::Data(format!(
            "training did not reach {:.0}% train accuracy within {} epochs \
             (best {:.2}%); see {}",
            config.train.target_train_accuracy * 100.0,
            config.train.max_epochs,
            last_train_acc * 100.0,
            config.paths.train_log.display()
        )));
    }

    if let Some(dir) = config.paths.checkpoint.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&params, &config.paths.checkpoint)?;
    if let Some(dir) = config.paths.checkpoint.parent() {
        config.write_resolved(dir, "pretrain")?;
    }
    println!(
        "converged in {epochs_run} epochs: train {:.4}, test {:.4}; checkpoint at {}",
        last_train_acc,
        test_accuracy,
        config.paths.checkpoint.display()
    );
    Ok(())
}
