//! `etta stats`: estimates per-layer source feature statistics from the
//! head of the clean train set, under the same merge rate the adaptation
//! run will use, and saves them as a named-array container.

use etta::adapt::compute_source_stats;
use etta::data::ingest_raw;
use etta::vit::{load_checkpoint, MergeConfig};
use etta::{Error, Result, Tensor};

use crate::config::RunConfig;

pub fn run(config: &RunConfig) -> Result<()> {
    let ckpt = &config.paths.checkpoint;
    if !ckpt.exists() {
        return Err(Error::State(format!(
            "checkpoint {} not found; run `etta pretrain --config <file>` first",
            ckpt.display()
        )));
    }
    let params = load_checkpoint(ckpt)?;
    let (images, _, _) = ingest_raw(&config.paths.dataset_train)?;
    let n = images.shape()[0];
    let take = config.stats.sample_images;
    if take > n {
        return Err(Error::Data(format!(
            "stats.sample_images = {take} but the train set holds only {n} images"
        )));
    }
    let per = images.len() / n;
    let mut shape = images.shape().to_vec();
    shape[0] = take;
    let sample = Tensor::new(shape, images.data()[..take * per].to_vec())?;
    let stats = compute_source_stats(&params, &sample, MergeConfig { r: config.tta.r })?;

    if let Some(dir) = config.paths.stats.parent() {
        std::fs::create_dir_all(dir)?;
    }
    stats.save(&config.paths.stats)?;
    if let Some(dir) = config.paths.stats.parent() {
        config.write_resolved(dir, "stats")?;
    }
    println!(
        "source statistics over {take} images ({} layers, r={}) at {}",
        stats.num_layers(),
        config.tta.r,
        config.paths.stats.display()
    );
    Ok(())
}
