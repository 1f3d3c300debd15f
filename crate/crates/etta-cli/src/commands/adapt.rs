//! `etta adapt`: streams corrupted test batches through the online
//! adaptation loop, one corruption dataset after another, writing one JSONL
//! record per batch and a per-corruption CSV summary.

use std::fmt::Write as _;

use serde::Serialize;

use etta::adapt::{evaluate_stream, reset_state, AdaptState, MetricsRecord, SourceStats};
use etta::data::{batches, corrupt_batch, ingest_raw, shuffled, CorruptionSpec};
use etta::flops::flops_report;
use etta::vit::load_checkpoint;
use etta::{Error, Result, Tensor};

use crate::config::{derive_seed, RunConfig};

#[derive(Serialize)]
struct BatchLine<'a> {
    label: &'a str,
    corruption: &'a str,
    severity: u8,
    #[serde(flatten)]
    record: &'a MetricsRecord,
}

pub struct CorruptionRow {
    pub corruption: String,
    pub severity: u8,
    pub images: usize,
    pub batches: usize,
    pub accuracy: f64,
    pub mean_entropy: f64,
    pub mean_loss: f64,
    pub forward_passes: u64,
    pub wall_ms: f64,
}

pub const SUMMARY_HEADER: &str =
    "label,corruption,severity,images,batches,accuracy,mean_entropy,mean_loss,forward_passes,wall_ms,r,flops_ratio";

pub fn run(config: &RunConfig) -> Result<()> {
    let ckpt = &config.paths.checkpoint;
    if !ckpt.exists() {
        return Err(Error::State(format!(
            "checkpoint {} not found; run `etta pretrain --config <file>` first",
            ckpt.display()
        )));
    }
    let stats_path = &config.paths.stats;
    if !stats_path.exists() {
        return Err(Error::State(format!(
            "source statistics {} not found; run `etta stats --config <file>` first",
            stats_path.display()
        )));
    }
    let params = load_checkpoint(ckpt)?;
    let stats = SourceStats::load(stats_path)?;
    let (test_images, test_labels, _) = ingest_raw(&config.paths.dataset_test)?;
    let available = test_labels.len();
    if available < config.adapt.images {
        return Err(Error::Data(format!(
            "adapt.images = {} but the test set holds only {available}; \
             regenerate with a larger gen.test_per_class",
            config.adapt.images
        )));
    }
    let per = test_images.len() / available;
    let take = config.adapt.images;
    let mut shape = test_images.shape().to_vec();
    shape[0] = take;
    let clean = Tensor::new(shape, test_images.data()[..take * per].to_vec())?;
    let labels = test_labels[..take].to_vec();

    let ratio = flops_report(&config.model, config.tta.r)
        .map(|rep| rep.ratio)
        .unwrap_or(f64::NAN);

    let mut state = AdaptState::new(&params, &config.tta)?;
    let mut jsonl = String::new();
    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');

    for (idx, &kind) in config.adapt.corruptions.iter().enumerate() {
        let spec = CorruptionSpec {
            kind,
            severity: config.adapt.severity,
            seed: derive_seed(config.tta.seed, 100 + idx as u64),
        };
        let corrupted = corrupt_batch(&clean, &spec)?;
        let (ordered, ordered_labels) =
            shuffled(&corrupted, &labels, derive_seed(config.tta.seed, 200 + idx as u64))?;
        let stream = batches(&ordered, &ordered_labels, config.tta.batch_size)?;

        if config.adapt.reset_between && idx > 0 {
            reset_state(&mut state);
        }
        let summary = evaluate_stream(&stream, &params, &mut state, &stats, &config.tta)?;

        let mut entropy_weighted = 0.0f64;
        let mut loss_weighted = 0.0f64;
        let mut wall_ms = 0.0f64;
        let mut forwards = 0u64;
        for (record, batch) in summary.records.iter().zip(&stream) {
            let line = BatchLine {
                label: &config.label,
                corruption: kind.name(),
                severity: config.adapt.severity,
                record,
            };
            jsonl.push_str(&serde_json::to_string(&line)?);
            jsonl.push('\n');
            let w = batch.labels.len() as f64;
            entropy_weighted += record.mean_entropy as f64 * w;
            loss_weighted += record.loss as f64 * w;
            wall_ms += record.wall_ms;
            forwards += record.forward_passes;
        }
        let row = CorruptionRow {
            corruption: kind.name().into(),
            severity: config.adapt.severity,
            images: summary.samples,
            batches: stream.len(),
            accuracy: summary.accuracy as f64,
            mean_entropy: entropy_weighted / summary.samples as f64,
            mean_loss: loss_weighted / summary.samples as f64,
            forward_passes: forwards,
            wall_ms,
        };
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{:.3},{},{}",
            config.label,
            row.corruption,
            row.severity,
            row.images,
            row.batches,
            row.accuracy,
            row.mean_entropy,
            row.mean_loss,
            row.forward_passes,
            row.wall_ms,
            config.tta.r,
            ratio,
        )
        .expect("writing to a string cannot fail");
        println!(
            "{:>15} s{}: accuracy {:.4}  entropy {:.4}  ({} batches, {:.1}s)",
            row.corruption,
            row.severity,
            row.accuracy,
            row.mean_entropy,
            row.batches,
            row.wall_ms / 1e3
        );
    }

    let out = &config.paths.out_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.jsonl"), jsonl)?;
    std::fs::write(out.join("summary.csv"), csv)?;
    config.write_resolved(out, "adapt")?;
    println!("metrics in {}", out.display());
    Ok(())
}
