//! Speculative KV-cache prefetching for offloaded transformer decoding.
//!
//! The crate contains a small transformer decoder, the offline query/key
//! skewing pass, prefill-time partial weight generation, decode-time
//! attention speculation with thresholded token selection, a CPU-side KV
//! pool with counter/LRU/FIFO eviction, comparison baselines, an analytical
//! CPU↔GPU transfer model, and trace metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cost;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pool;
pub mod report;
pub mod skew;
pub mod speculation;
pub mod tensor;

pub use cost::{CostParams, ExecutionStyle, LatencyBreakdown};
pub use engine::{run, RunConfig, RunOutput, Scheme, Trace, Workload};
pub use error::{Error, Result};
pub use model::{Model, ModelSpec};
pub use pool::{EvictionPolicy, KvPool};
pub use skew::SkewSet;
pub use speculation::SpeculationConfig;
pub use tensor::Matrix;
