//! The four-step PTQ pipeline: batchnorm folding and optional cross-layer
//! equalization, quantizer attachment, unit-wise reconstruction and bias tuning.

mod adam;
mod attach;
mod bias;
pub mod bits;
mod cle;
mod config;
mod optimize;
mod qgraph;

pub use adam::Adam;
pub use attach::attach_and_init;
pub use bias::bias_tune;
pub use cle::{cle_equalize, eligible_pairs, input_channel_ranges, output_channel_ranges, CleReport, EqualizedPair};
pub use config::{InitMethod, PipelineConfig, Strategy, UnitGranularity, FULL_PRECISION_BITS};
pub use optimize::{optimize, optimize_unit, unit_data, unit_mse, units, BatchSampler, Unit, UnitData};
pub use qgraph::{QuantHooks, QuantizedGraph, StrategyState};

use crate::engine::{fold_batchnorm, Graph};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One loss measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: String,
    pub unit: String,
    pub iteration: usize,
    pub loss: f64,
}

impl LogEntry {
    pub fn new(step: &str, unit: &str, iteration: usize, loss: f64) -> Self {
        Self {
            step: step.to_string(),
            unit: unit.to_string(),
            iteration,
            loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub unit: String,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub best_iteration: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: Option<PipelineConfig>,
    pub entries: Vec<LogEntry>,
    pub units: Vec<UnitSummary>,
    /// (initial, final) end-to-end MSE of bias tuning.
    pub bias: Option<(f64, f64)>,
    /// Equalized layer pairs, by name.
    pub cle_pairs: Vec<(String, String)>,
}

/// Picks `config.calib_size` samples of `data` in a seeded order (all of them
/// when fewer are available).
pub fn calibration_subset(data: &Tensor, config: &PipelineConfig) -> Tensor {
    let mut idx: Vec<usize> = (0..data.batch()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    idx.shuffle(&mut rng);
    idx.truncate(config.calib_size.min(data.batch()));
    data.gather_batch(&idx)
}

/// Runs the full pipeline on a float graph. Deterministic for a given seed.
pub fn run_pipeline(fp_graph: &Graph, calib: &Tensor, config: &PipelineConfig) -> Result<(QuantizedGraph, RunLog)> {
    config.validate()?;
    let calib = calibration_subset(calib, config);
    let mut log = RunLog {
        config: Some(config.clone()),
        ..Default::default()
    };
    let mut fp = fold_batchnorm(fp_graph)?;
    if config.cle {
        let (eq, report) = cle_equalize(&fp);
        log.cle_pairs = report.pairs.into_iter().map(|p| (p.first, p.second)).collect();
        fp = eq;
    }
    let q = attach_and_init(&fp, &calib, config)?;
    let mut q = optimize(&q, &fp, &calib, config, &mut log)?;
    if config.recalibrate_activations && config.activations_quantized() {
        let hooks = q.hooks()?;
        let weights_only = QuantHooks {
            weights: hooks.weights,
            biases: Vec::new(),
            acts: &Default::default(),
            overrides: Default::default(),
        };
        let nodes: Vec<_> = q.act_q.keys().copied().collect();
        let acts = attach::init_activation_quantizers(&q.graph, &weights_only, &calib, &nodes, config)?;
        q.act_q = acts;
    }
    if config.bias_tune {
        q = bias_tune(&q, &fp, &calib, config, &mut log)?;
    }
    Ok((q, log))
}

/// Float reference graph used by the pipeline (batchnorm folded, optionally equalized).
pub fn reference_graph(fp_graph: &Graph, cle: bool) -> Result<Graph> {
    let fp = fold_batchnorm(fp_graph)?;
    Ok(if cle { cle_equalize(&fp).0 } else { fp })
}

/// Values of a metric over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
}

/// Runs the pipeline once per seed and scores each result with `score`.
pub fn seed_sweep(
    fp_graph: &Graph,
    calib: &Tensor,
    config: &PipelineConfig,
    seeds: &[u64],
    mut score: impl FnMut(&QuantizedGraph) -> Result<f64>,
) -> Result<SeedSweep> {
    let mut values = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = PipelineConfig { seed, ..config.clone() };
        let (q, _) = run_pipeline(fp_graph, calib, &cfg)?;
        values.push(score(&q)?);
    }
    Ok(SeedSweep {
        seeds: seeds.to_vec(),
        values,
    })
}
