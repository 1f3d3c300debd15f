//! Checkpoint round trip: parameters plus their config in one named-array
//! container, reloadable bit-exactly.

use std::path::Path;

use crate::container::NamedArrays;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTParams};

pub fn save_checkpoint(params: &ViTParams, path: &Path) -> Result<()> {
    let meta = serde_json::json!({ "config": params.config });
    let mut arrays = NamedArrays::new(meta);
    for (name, t) in params.named_tensors() {
        arrays.push_tensor(name, t)?;
    }
    arrays.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ViTParams> {
    let arrays = NamedArrays::load(path)?;
    let config: ViTConfig = serde_json::from_value(
        arrays
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint manifest lacks a config".into()))?,
    )
    .map_err(|e| Error::Format(format!("checkpoint config does not parse: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint config fails validation: {e}")))?;

    // Zeros fix the expected names and shapes; every stored tensor is
    // cross-checked against them, so any shape conflict is a format error.
    let mut params = ViTParams::zeros(&config)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if arrays.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, config implies {}",
            arrays.len(),
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let t = arrays
            .tensor(name, Some(shape))
            .map_err(|e| Error::Format(format!("checkpoint tensor {name}: {e}")))?;
        loaded.push(t);
    }
    assign_canonical(&mut params, loaded.into_iter());
    Ok(params)
}

/// Writes tensors into `params` in the same order `named_tensors` lists them.
fn assign_canonical(params: &mut ViTParams, mut it: impl Iterator<Item = Tensor>) {
    let mut next = || it.next().expect("tensor count checked by caller");
    params.patch_w = next();
    params.patch_b = next();
    params.pos = next();
    params.cls = next();
    for b in &mut params.blocks {
        b.ln1.gamma = next();
        b.ln1.beta = next();
        b.wq = next();
        b.bq = next();
        b.wk = next();
        b.bk = next();
        b.wv = next();
        b.bv = next();
        b.wo = next();
        b.bo = next();
        b.ln2.gamma = next();
        b.ln2.beta = next();
        b.w1 = next();
        b.b1 = next();
        b.w2 = next();
        b.b2 = next();
    }
    params.final_ln.gamma = next();
    params.final_ln.beta = next();
    params.head_w = next();
    params.head_b = next();
}
