//! Accuracy-versus-cost tables: one row per run plus mean and sample standard
//! deviation over seeds, with savings relative to 8W8A.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;
use std::collections::BTreeMap;

/// One pipeline run; field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub b_w: u32,
    pub b_a: u32,
    pub strategy: String,
    pub init: String,
    pub cle: bool,
    pub bias_tune: bool,
    pub seed: u64,
    pub accuracy: f64,
    pub macs: u64,
    pub params: u64,
    pub peak_activation: u64,
    pub bop: u64,
    pub peak_memory_bytes: u64,
}

impl RunRecord {
    fn key(&self) -> (String, u32, u32, String, String, bool, bool) {
        (
            self.model.clone(),
            self.b_w,
            self.b_a,
            self.strategy.clone(),
            self.init.clone(),
            self.cle,
            self.bias_tune,
        )
    }

    fn memory_bits(&self) -> u64 {
        self.params * self.b_w as u64 + self.peak_activation * self.b_a as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub b_w: u32,
    pub b_a: u32,
    pub strategy: String,
    pub init: String,
    pub cle: bool,
    pub bias_tune: bool,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    /// Float accuracy minus mean accuracy, when the float accuracy is known.
    pub accuracy_drop: Option<f64>,
    pub bop: u64,
    /// `1 - bop / bop(8W8A)`.
    pub bop_saving: f64,
    pub peak_memory_bytes: u64,
    /// `1 - memory / memory(8W8A)`.
    pub memory_saving: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub fp_accuracy: BTreeMap<String, f64>,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    match values.len() {
        0 => (f64::NAN, 0.0),
        1 => (values[0], 0.0),
        _ => (values.mean(), values.std_dev()),
    }
}

/// Groups runs that differ only by seed and summarizes them, in first-seen order.
pub fn emit_report(runs: &[RunRecord], fp_accuracy: &BTreeMap<String, f64>) -> Report {
    let mut groups: Vec<(_, Vec<&RunRecord>)> = Vec::new();
    for r in runs {
        let key = r.key();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let summary = groups
        .into_iter()
        .map(|(_, rs)| {
            let first = rs[0];
            let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let (mean, std) = mean_std(&acc);
            let bop_8 = first.bop / (first.b_w as u64 * first.b_a as u64).max(1) * 64;
            let mem_8 = (first.params + first.peak_activation) * 8;
            SummaryRow {
                model: first.model.clone(),
                b_w: first.b_w,
                b_a: first.b_a,
                strategy: first.strategy.clone(),
                init: first.init.clone(),
                cle: first.cle,
                bias_tune: first.bias_tune,
                runs: rs.len(),
                accuracy_mean: mean,
                accuracy_std: std,
                accuracy_drop: fp_accuracy.get(&first.model).map(|fp| fp - mean),
                bop: first.bop,
                bop_saving: 1.0 - first.bop as f64 / bop_8.max(1) as f64,
                peak_memory_bytes: first.peak_memory_bytes,
                memory_saving: 1.0 - first.memory_bits() as f64 / mem_8.max(1) as f64,
            }
        })
        .collect();
    Report {
        fp_accuracy: fp_accuracy.clone(),
        runs: runs.to_vec(),
        summary,
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

impl Report {
    /// One line per run.
    pub fn runs_csv(&self) -> Result<String> {
        to_csv(&self.runs)
    }

    pub fn summary_csv(&self) -> Result<String> {
        to_csv(&self.summary)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
