//! Referring-segmentation model built around mutual attention between a
//! language query and a visual feature map, together with everything needed
//! to exercise it end to end at desk scale: a reverse-mode autodiff core,
//! the neural building blocks, the decoder stack with inter-layer language
//! re-injection, a language-feature reconstruction head, a dynamic-kernel
//! mask decoder, a synthetic referring-grounding dataset, segmentation
//! metrics, and a deterministic training harness.

pub mod ablate;
pub mod autodiff;
pub mod ckpt;
pub mod data;
pub mod decoder;
pub mod dump;
pub mod error;
pub mod imi;
pub mod kvconfig;
pub mod lfr;
pub mod maskdec;
pub mod metrics;
pub mod model;
pub mod mutual;
pub mod nn;
pub mod pgm;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
