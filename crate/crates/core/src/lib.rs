//! Pixel-wise multimodal volume segmentation with 3D-to-2D patch conversion.
//!
//! Each modality's `ω×ω×L` patch is recalibrated slice by slice with a
//! squeeze-and-excitation gate, collapsed to a 2D map by a 1×1 bottleneck,
//! and the four maps are classified by a small 2D CNN that predicts the
//! label of the patch's central voxel.
//!
//! Everything runs on the crate's own reverse-mode autodiff engine
//! ([`autodiff`]) in `f32`, with `f64` reserved for gradient verification.

pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod conversion;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod optimizer;
pub mod parallel;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, Graph, Padding, Var};
pub use classifier::{ModelConfig, ModelParams};
pub use conversion::ConversionParams;
pub use data::{LabelVolume, Modality, MultimodalVolume, Patch3D};
pub use error::{Error, Result};
pub use optimizer::{AdadeltaConfig, AdadeltaState};
pub use scalar::Scalar;
pub use tensor::Tensor;
