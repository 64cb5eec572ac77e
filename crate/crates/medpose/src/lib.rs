//! Anatomical landmark detection with a LoRA-adapted vision transformer and a
//! heatmap decoding head: dataset manifests, Gaussian heatmap codec, nn
//! primitives with exact backward maps, model assembly, augmentation, AdamW
//! training with layer-wise lr decay, and SDR/MRE evaluation.

pub mod augment;
pub mod heatmap;
pub mod landmark;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod trainer;

pub use tensor::{Scalar, Tensor};
