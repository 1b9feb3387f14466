//! Few-shot classification with a query-support transformer.
//!
//! The pipeline: episodic sampling ([`data`]), a small convolutional backbone
//! with cross-scale fusion ([`cife`]), a sample-level encoder/decoder whose
//! cross-attention is the global metric ([`sample_former`]), a patch-level
//! attention block ([`patch_former`]) feeding an exact transport-based local
//! metric ([`emd`]), and fused nearest-neighbor classification with
//! cross-entropy and contrastive losses ([`objective`]). [`trainer`] runs
//! episodic SGD and evaluation.

pub mod cife;
pub mod config;
pub mod data;
pub mod emd;
pub mod error;
pub mod features;
pub mod metric;
pub mod model;
pub mod numeric;
pub mod objective;
pub mod par;
pub mod patch_former;
pub mod report;
pub mod sample_former;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
