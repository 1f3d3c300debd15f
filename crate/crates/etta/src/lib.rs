//! Efficient test-time adaptation engine.
//!
//! A compact pre-norm Vision Transformer with in-network token aggregation,
//! adapted online on corrupted data streams by entropy minimization and
//! feature-statistics alignment, with learned [CLS]-embedding and
//! shallow-layer [CLS]-bias augmentations. Includes hand-written gradient
//! kernels, a synthetic corruption benchmark, an analytic FLOPs model, and
//! serialization for checkpoints, statistics, and datasets.

pub mod adapt;
pub mod container;
pub mod data;
pub mod error;
pub mod flops;
pub mod numerics;
pub mod tensor;
pub mod tokenagg;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
