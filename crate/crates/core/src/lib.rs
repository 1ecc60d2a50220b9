//! Full-disk solar flare prediction: a from-scratch CNN, skill scores, and
//! gradient-based attribution.
//!
//! - [`autodiff`]: tensors and reverse-mode differentiation over a layer chain
//! - [`model`]: the AlexNet-style classifier and its FXT1 files
//! - [`data`]: catalogs, labels, partitions, augmentation, synthetic magnetograms
//! - [`training`]: weighted NLL, SGD, fold runs
//! - [`evaluation`]: TSS, HSS, grouped recall, published-table checks
//! - [`attribution`]: Guided Grad-CAM, Integrated Gradients, Deep SHAP
//! - [`cli`]: the `flarecast` command
//!
//! Runnable examples live in `examples/`: `verify_tables`, `gradient_check`,
//! `synth_dataset`, `model_io`, `train_desk`, `cross_validation` and
//! `explain`.

pub mod attribution;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod training;

pub use error::{Error, Result};
