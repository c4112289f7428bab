//! Bit-operation and peak-memory cost model.

use super::stats::ModelStats;
use crate::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

/// `ops * b_w * b_a` over the model's total operation count.
pub fn bop_count(stats: &ModelStats, bits_w: u32, bits_a: u32) -> u64 {
    stats.total_ops * bits_w as u64 * bits_a as u64
}

/// `params * b_w + peak_activation * b_a`, in bits.
pub fn peak_memory_bits(stats: &ModelStats, bits_w: u32, bits_a: u32) -> u64 {
    stats.params * bits_w as u64 + stats.peak_activation * bits_a as u64
}

/// Peak memory rounded up to whole bytes.
pub fn peak_memory_bytes(stats: &ModelStats, bits_w: u32, bits_a: u32) -> u64 {
    peak_memory_bits(stats, bits_w, bits_a).div_ceil(8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub name: String,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub bits_w: u32,
    pub bits_a: u32,
    pub layers: Vec<LayerMacs>,
    pub macs: u64,
    pub aux_ops: u64,
    pub total_ops: u64,
    pub params: u64,
    pub params_prefold: u64,
    pub peak_activation: u64,
    pub bop: u64,
    pub peak_memory_bits: u64,
    pub peak_memory_bytes: u64,
    pub accuracy: Option<f64>,
    pub config: Option<PipelineConfig>,
}

impl CostReport {
    pub fn new(stats: &ModelStats, bits_w: u32, bits_a: u32) -> Self {
        Self {
            model: stats.model.clone(),
            bits_w,
            bits_a,
            layers: stats
                .layers
                .iter()
                .filter(|l| l.macs > 0)
                .map(|l| LayerMacs {
                    name: l.name.clone(),
                    macs: l.macs,
                })
                .collect(),
            macs: stats.macs,
            aux_ops: stats.aux_ops,
            total_ops: stats.total_ops,
            params: stats.params,
            params_prefold: stats.params_prefold,
            peak_activation: stats.peak_activation,
            bop: bop_count(stats, bits_w, bits_a),
            peak_memory_bits: peak_memory_bits(stats, bits_w, bits_a),
            peak_memory_bytes: peak_memory_bytes(stats, bits_w, bits_a),
            accuracy: None,
            config: None,
        }
    }
}
