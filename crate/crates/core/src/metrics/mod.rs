//! Model statistics, the BOP / peak-memory cost model, accuracy and reports.

mod cost;
mod eval;
mod report;
mod stats;

pub use cost::{bop_count, peak_memory_bits, peak_memory_bytes, CostReport, LayerMacs};
pub use eval::{argmax_rows, evaluate, Predictor};
pub use report::{emit_report, mean_std, Report, RunRecord, SummaryRow};
pub use stats::{model_stats, peak_activation, LayerStats, ModelStats};
