use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::cost::BlockWork;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

pub const TRACE_FORMAT: &str = "specprefetch-trace";
pub const TRACE_VERSION: u32 = 1;

/// Model dimensions recorded alongside a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
}

impl From<&ModelSpec> for ModelShape {
    fn from(s: &ModelSpec) -> Self {
        Self {
            layers: s.layers,
            model_dim: s.model_dim,
            heads: s.heads,
            head_dim: s.head_dim,
            ffn_dim: s.ffn_dim,
        }
    }
}

/// What prefill left behind for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePrefill {
    pub sequence: usize,
    /// Partial column indices per layer per head; empty for layers without
    /// speculation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partial_columns: Vec<Vec<Vec<usize>>>,
    /// Rows per layer (every head holds the same count).
    pub pool_rows: Vec<usize>,
    pub evictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillRecord {
    pub prompt_len: usize,
    pub sequences: Vec<SequencePrefill>,
}

/// Captured details of one head at one layer and iteration.
///
/// `approx_weights` and `true_scores` are dense over token ids
/// `0..=current`; the current token is the last entry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub sequence: usize,
    pub head: usize,
    /// Token ids of the fetched rows, ascending.
    pub selected: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub approx_weights: Vec<f32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub true_scores: Vec<f32>,
    /// Token id held by each pool row before this step's append.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pool_tokens: Vec<usize>,
    /// Speculated scores aligned with `pool_tokens`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub speculated_scores: Vec<f32>,
}

/// One layer of one decode iteration, summed over the batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub bytes_moved: u64,
    pub full_bytes: u64,
    pub attention_flops: u64,
    pub full_attention_flops: u64,
    pub ffn_flops: u64,
    pub speculation_flops: u64,
    /// Fetched row count per sequence and head, sequence-major.
    pub n_selected: Vec<usize>,
    /// Pool rows after the step's append (largest over the batch).
    pub pool_rows: usize,
    pub evictions: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub heads: Vec<HeadRecord>,
}

impl LayerRecord {
    pub fn work(&self) -> BlockWork {
        BlockWork {
            selected_bytes: self.bytes_moved,
            full_bytes: self.full_bytes,
            selected_attention_flops: self.attention_flops,
            full_attention_flops: self.full_attention_flops,
            ffn_flops: self.ffn_flops,
            speculation_flops: self.speculation_flops,
        }
    }

    /// Mean fetched rows per head.
    pub fn mean_selected(&self) -> f64 {
        if self.n_selected.is_empty() {
            0.0
        } else {
            self.n_selected.iter().sum::<usize>() as f64 / self.n_selected.len() as f64
        }
    }

    pub(crate) fn merge(&mut self, other: LayerRecord) {
        self.bytes_moved += other.bytes_moved;
        self.full_bytes += other.full_bytes;
        self.attention_flops += other.attention_flops;
        self.full_attention_flops += other.full_attention_flops;
        self.ffn_flops += other.ffn_flops;
        self.speculation_flops += other.speculation_flops;
        self.n_selected.extend(other.n_selected);
        self.pool_rows = self.pool_rows.max(other.pool_rows);
        self.evictions += other.evictions;
        self.heads.extend(other.heads);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub layers: Vec<LayerRecord>,
}

/// Versioned record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub model: ModelShape,
    pub prefill: PrefillRecord,
    pub iterations: Vec<IterationRecord>,
}

impl Trace {
    /// Per-iteration block work, for the cost model.
    pub fn work(&self) -> Vec<Vec<BlockWork>> {
        self.iterations
            .iter()
            .map(|it| it.layers.iter().map(LayerRecord::work).collect())
            .collect()
    }

    pub fn total_bytes(&self) -> u64 {
        self.iterations
            .iter()
            .flat_map(|it| &it.layers)
            .map(|l| l.bytes_moved)
            .sum()
    }

    pub fn total_full_bytes(&self) -> u64 {
        self.iterations
            .iter()
            .flat_map(|it| &it.layers)
            .map(|l| l.full_bytes)
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let trace: Trace = serde_json::from_slice(&fs::read(path)?)?;
        if trace.format != TRACE_FORMAT || trace.version != TRACE_VERSION {
            return Err(Error::Validation(format!(
                "unsupported trace {} v{}",
                trace.format, trace.version
            )));
        }
        Ok(trace)
    }
}
