//! Synthetic source-domain dataset and corrupted test streams.
//!
//! The source task is ten-way shape classification on procedurally rendered
//! 32x32 RGB images; distribution shift comes from the corruption transforms
//! in [`corrupt`]. Everything is seed-deterministic.

mod corrupt;
mod shapes;

pub use corrupt::{
    box_blur, brightness, contrast, corrupt, corrupt_batch, gaussian_noise, impulse_noise,
    pixelate, severity_tables, CorruptionKind, CorruptionSpec, SeverityTables, ALL_CORRUPTIONS,
};
pub use shapes::{render_sample, SampleSpec, CLASS_NAMES, NUM_SHAPE_CLASSES};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::io::Write;
use std::path::Path;

use crate::adapt::StreamBatch;
use crate::container::NamedArrays;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Dataset geometry: square RGB images and the number of shape classes used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    pub num_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 32,
            num_classes: NUM_SHAPE_CLASSES,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > NUM_SHAPE_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be 1..={NUM_SHAPE_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size must be at least 8, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Generates a balanced labeled dataset: `num_per_class` samples of each
/// class, interleaved class-round-robin, as a `[N, 3, S, S]` tensor with
/// values in [0, 1]. Same arguments, same bytes.
pub fn gen_dataset(
    num_per_class: usize,
    config: &DataConfig,
    seed: u64,
) -> Result<(Tensor, Vec<u32>)> {
    config.validate()?;
    let n = num_per_class * config.num_classes;
    if n == 0 {
        return Err(Error::Config("num_per_class must be positive".into()));
    }
    let s = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * CHANNELS * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % config.num_classes) as u32;
        let spec = SampleSpec::sample(class, &mut rng);
        images.extend_from_slice(&render_sample(&spec, s));
        labels.push(class);
    }
    Ok((Tensor::new(vec![n, CHANNELS, s, s], images)?, labels))
}

/// Splits a labeled image tensor into stream batches of `batch_size`,
/// keeping order; a shorter final batch is kept.
pub fn batches(images: &Tensor, labels: &[u32], batch_size: usize) -> Result<Vec<StreamBatch>> {
    if images.rank() != 4 || images.shape()[0] != labels.len() {
        return Err(Error::Data(format!(
            "{} labels for image shape {:?}",
            labels.len(),
            images.shape()
        )));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let n = labels.len();
    let per = images.len() / n.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        out.push(StreamBatch {
            images: Tensor::new(shape, images.data()[start * per..end * per].to_vec())?,
            labels: labels[start..end].to_vec(),
        });
        start = end;
    }
    Ok(out)
}

/// Reorders a labeled dataset by the given permutation-producing seed.
pub fn shuffled(images: &Tensor, labels: &[u32], seed: u64) -> Result<(Tensor, Vec<u32>)> {
    if images.rank() != 4 || images.shape()[0] != labels.len() {
        return Err(Error::Data(format!(
            "{} labels for image shape {:?}",
            labels.len(),
            images.shape()
        )));
    }
    let n = labels.len();
    let per = images.len() / n.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut data = Vec::with_capacity(images.len());
    let mut new_labels = Vec::with_capacity(n);
    for &idx in &order {
        data.extend_from_slice(&images.data()[idx * per..(idx + 1) * per]);
        new_labels.push(labels[idx]);
    }
    Ok((Tensor::new(images.shape().to_vec(), data)?, new_labels))
}

/// Writes a labeled dataset as a named-array container with `images` and
/// `labels` entries.
pub fn export_dataset(
    path: &Path,
    images: &Tensor,
    labels: &[u32],
    num_classes: usize,
) -> Result<()> {
    if images.rank() != 4 || images.shape()[0] != labels.len() {
        return Err(Error::Data(format!(
            "{} labels for image shape {:?}",
            labels.len(),
            images.shape()
        )));
    }
    let mut arrays = NamedArrays::new(json!({
        "kind": "dataset",
        "num_classes": num_classes,
    }));
    arrays.push_tensor("images", images)?;
    arrays.push(
        "labels",
        vec![labels.len()],
        labels.iter().map(|&l| l as f32).collect(),
    )?;
    arrays.save(path)
}

/// Loads a dataset container and validates it: `[N, 3, S, S]` images, one
/// integral label per image, all labels below the recorded class count.
pub fn ingest_raw(path: &Path) -> Result<(Tensor, Vec<u32>, usize)> {
    let arrays = NamedArrays::load(path)?;
    let num_classes = arrays
        .meta
        .get("num_classes")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("dataset container missing num_classes".into()))? as usize;
    let images = arrays.tensor("images", None)?;
    if images.rank() != 4 {
        return Err(Error::Format(format!(
            "images must be [N, C, H, W], got {:?}",
            images.shape()
        )));
    }
    if images.shape()[1] != CHANNELS {
        return Err(Error::Format(format!(
            "expected {CHANNELS} channels, got {}",
            images.shape()[1]
        )));
    }
    let raw_labels = arrays.tensor("labels", Some(&[images.shape()[0]]))?;
    let mut labels = Vec::with_capacity(raw_labels.len());
    for (i, &l) in raw_labels.data().iter().enumerate() {
        if l.fract() != 0.0 || l < 0.0 {
            return Err(Error::Format(format!("label {i} is not an integer: {l}")));
        }
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::Data(format!(
                "label {i} is {l}, outside 0..{num_classes}"
            )));
        }
        labels.push(l as u32);
    }
    Ok((images, labels, num_classes))
}

/// Dumps one `[3, H, W]` image as a binary PPM for visual spot checks.
pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != CHANNELS {
        return Err(Error::shape(format!(
            "PPM export takes one [3, H, W] image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut buf = Vec::with_capacity(h * w * 3 + 32);
    buf.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data()[c * plane + y * w + x];
                buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}
