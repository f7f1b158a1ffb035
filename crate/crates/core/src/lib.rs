//! Windowed-attention chest X-ray classifier at desk scale.
//!
//! The crate bundles a small f64 autodiff tensor engine, shifted-window
//! multi-head attention, a hierarchical transformer backbone with
//! per-pathology MLP heads, a ChestX-ray14-format data pipeline with
//! patient-wise splits, AUROC evaluation with max-validation model selection,
//! attention-complexity calculators, and Grad-CAM saliency rendering.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcam;
pub mod model;
pub mod complexity;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod windowing;

pub use config::{class_index, HeadVariant, ModelConfig, CLASS_NAMES, NUM_CLASSES};
pub use error::{Error, Result};
pub use model::{bce_loss, head_param_count, SwinModel};
pub use tensor::{concat_last, grad_check, grad_check_at, no_grad, ParamSet, Tensor};
