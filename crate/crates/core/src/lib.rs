//! A small attention-CNN framework: reverse-mode autodiff over dense
//! tensors, a CBAM-gated dense-connectivity classifier, the data pipeline
//! and two-phase training protocol around it, Grad-CAM explanations and
//! multi-seed evaluation.
//!
//! The accompanying book (`book/`) walks through each part; its code
//! snippets are compiled and run as doc-tests of this crate.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod explain;
pub mod fsutil;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use params::ParameterSet;
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/gradcam.md")]
    mod gradcam {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
