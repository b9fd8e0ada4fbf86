//! Analytical transfer/compute latency model for decode iterations.
//!
//! Each block has a load phase (moving its KV rows) and a compute phase
//! (attention plus FFN). Overlapping styles hide block `i`'s load under block
//! `i-1`'s compute; block 0's load is always exposed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hardware parameters. Defaults are illustrative, not measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    /// Host-to-device bytes per second.
    pub pcie_bandwidth: f64,
    /// Device flops per second.
    pub gpu_compute: f64,
    /// Device memory bytes per second.
    pub gpu_mem_bandwidth: f64,
    pub kv_bytes_per_element: u64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            pcie_bandwidth: 16e9,
            gpu_compute: 30e12,
            gpu_mem_bandwidth: 700e9,
            kv_bytes_per_element: 2,
        }
    }
}

impl CostParams {
    /// All rates must be positive (infinite is allowed and means free).
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("pcie_bandwidth", self.pcie_bandwidth),
            ("gpu_compute", self.gpu_compute),
            ("gpu_mem_bandwidth", self.gpu_mem_bandwidth),
        ];
        for (name, v) in rates {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.kv_bytes_per_element == 0 {
            return Err(Error::invalid("kv_bytes_per_element must be positive"));
        }
        Ok(())
    }

    pub fn transfer_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.pcie_bandwidth
    }

    pub fn compute_time(&self, flops: u64) -> f64 {
        flops as f64 / self.gpu_compute
    }

    pub fn device_read_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.gpu_mem_bandwidth
    }
}

/// `2·L·H·d·seq·batch·bytes_per_element`.
pub fn kv_bytes(layers: usize, heads: usize, head_dim: usize, seq: usize, batch: usize, bytes_per_element: u64) -> u64 {
    2 * (layers * heads * head_dim * seq * batch) as u64 * bytes_per_element
}

/// Scores plus weighted sum: `4·n·d` per head.
pub fn attention_flops(heads_n: &[usize], head_dim: usize) -> u64 {
    heads_n.iter().map(|&n| 4 * (n * head_dim) as u64).sum()
}

/// Two `D × ffn_dim` matmuls.
pub fn ffn_flops(model_dim: usize, ffn_dim: usize) -> u64 {
    4 * (model_dim * ffn_dim) as u64
}

/// Partial query projection plus partial scores, per head.
pub fn speculation_flops(heads: usize, model_dim: usize, k: usize, s: usize) -> u64 {
    heads as u64 * (2 * model_dim * k + 2 * s * k) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStyle {
    /// Whole cache resident in device memory.
    FullGpu,
    /// Load then compute, block by block.
    CpuSerial,
    /// Whole cache streamed, overlapped with the previous block.
    PrefetchAll,
    /// Only the selected rows streamed, overlapped with the previous block.
    SelectivePrefetch,
}

impl ExecutionStyle {
    pub const ALL: [ExecutionStyle; 4] = [
        ExecutionStyle::FullGpu,
        ExecutionStyle::CpuSerial,
        ExecutionStyle::PrefetchAll,
        ExecutionStyle::SelectivePrefetch,
    ];
}

impl FromStr for ExecutionStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full_gpu" => Ok(Self::FullGpu),
            "cpu_serial" => Ok(Self::CpuSerial),
            "prefetch_all" => Ok(Self::PrefetchAll),
            "selective_prefetch" | "selective" => Ok(Self::SelectivePrefetch),
            other => Err(Error::invalid(format!("unknown execution style {other:?}"))),
        }
    }
}

impl fmt::Display for ExecutionStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FullGpu => "full_gpu",
            Self::CpuSerial => "cpu_serial",
            Self::PrefetchAll => "prefetch_all",
            Self::SelectivePrefetch => "selective_prefetch",
        })
    }
}

/// Work done by one block in one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockWork {
    pub selected_bytes: u64,
    pub full_bytes: u64,
    pub selected_attention_flops: u64,
    pub full_attention_flops: u64,
    pub ffn_flops: u64,
    /// Flops spent speculating for this block; executed during the previous
    /// block.
    pub speculation_flops: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockLatency {
    pub load_s: f64,
    pub attention_s: f64,
    pub ffn_s: f64,
    /// Speculation for the next block, run in this block's window.
    pub speculation_s: f64,
    pub exposed_s: f64,
}

impl BlockLatency {
    pub fn compute_s(&self) -> f64 {
        self.attention_s + self.ffn_s + self.speculation_s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationLatency {
    pub blocks: Vec<BlockLatency>,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub style: ExecutionStyle,
    pub iterations: Vec<IterationLatency>,
    pub total_s: f64,
}

/// Latency of every iteration of `work` under `style`.
pub fn simulate_run(work: &[Vec<BlockWork>], style: ExecutionStyle, params: &CostParams) -> Result<LatencyBreakdown> {
    params.validate()?;
    let iterations: Vec<IterationLatency> = work
        .iter()
        .map(|blocks| simulate_iteration(blocks, style, params))
        .collect();
    let total_s = iterations.iter().map(|i| i.total_s).sum();
    Ok(LatencyBreakdown {
        style,
        iterations,
        total_s,
    })
}

fn simulate_iteration(work: &[BlockWork], style: ExecutionStyle, p: &CostParams) -> IterationLatency {
    let mut blocks: Vec<BlockLatency> = work
        .iter()
        .map(|w| {
            let (load_s, attn) = match style {
                ExecutionStyle::FullGpu => (p.device_read_time(w.full_bytes), w.full_attention_flops),
                ExecutionStyle::CpuSerial | ExecutionStyle::PrefetchAll => {
                    (p.transfer_time(w.full_bytes), w.full_attention_flops)
                }
                ExecutionStyle::SelectivePrefetch => (p.transfer_time(w.selected_bytes), w.selected_attention_flops),
            };
            BlockLatency {
                load_s,
                attention_s: p.compute_time(attn),
                ffn_s: p.compute_time(w.ffn_flops),
                ..BlockLatency::default()
            }
        })
        .collect();

    if style == ExecutionStyle::SelectivePrefetch {
        for i in 1..work.len() {
            blocks[i - 1].speculation_s = p.compute_time(work[i].speculation_flops);
        }
    }

    let overlapped = matches!(style, ExecutionStyle::PrefetchAll | ExecutionStyle::SelectivePrefetch);
    for i in 0..blocks.len() {
        blocks[i].exposed_s = if overlapped && i > 0 {
            (blocks[i].load_s - blocks[i - 1].compute_s()).max(0.0)
        } else {
            blocks[i].load_s
        };
    }
    let total_s = blocks.iter().map(|b| b.exposed_s + b.compute_s()).sum();
    IterationLatency { blocks, total_s }
}
