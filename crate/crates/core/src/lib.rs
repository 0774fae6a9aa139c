//! Dependency-aware structured pruning for small CNNs.
//!
//! The pipeline: a portable graph IR ([`ir`]), pruning-dependency analysis
//! ([`deps`]), L1 filter ranking plus physical shrinking ([`prune`]), a small
//! training runtime ([`runtime`]) and the data-aware search over pruning
//! levels ([`search`]).

pub mod data;
pub mod deps;
pub mod digest;
pub mod error;
pub mod fixtures;
pub mod ir;
pub mod prune;
pub mod report;
pub mod runtime;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use ir::{parse_model, serialize_model, CostReport, ModelGraph};
pub use tensor::{Tensor, WeightStore};
