use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Bitwidth that disables quantization.
pub const FULL_PRECISION_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Minmax,
    Mse,
}

/// Which variables the layerwise reconstruction optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Scales and zero points of the quantizers in the unit.
    #[serde(alias = "opt_qparam")]
    Qparam,
    /// Continuous weights through a straight-through estimator.
    #[serde(alias = "opt_weights")]
    Weights,
    /// Integer codes, bit plane by bit plane.
    #[serde(alias = "opt_bits")]
    Bits,
    /// Learned up/down rounding decisions.
    #[serde(alias = "opt_round")]
    Round,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitGranularity {
    #[serde(alias = "layerwise")]
    Layer,
    #[serde(alias = "blockwise")]
    Block,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Qparam => "qparam",
            Strategy::Weights => "weights",
            Strategy::Bits => "bits",
            Strategy::Round => "round",
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Strategy::Qparam => 1e-3,
            Strategy::Weights => 1e-4,
            Strategy::Bits => 0.0,
            Strategy::Round => 1e-2,
        }
    }
}

impl InitMethod {
    pub fn name(self) -> &'static str {
        match self {
            InitMethod::Minmax => "minmax",
            InitMethod::Mse => "mse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub bits_w: u32,
    pub bits_a: u32,
    pub init_w: InitMethod,
    pub init_a: InitMethod,
    pub cle: bool,
    pub strategy: Strategy,
    pub granularity: UnitGranularity,
    pub bias_tune: bool,
    pub calib_size: usize,
    /// Iterations per unit (and for bias tuning).
    pub iters: usize,
    /// Learning rate of the strategy; `None` picks the strategy default.
    pub lr: Option<f64>,
    pub bias_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mse_grid_steps: usize,
    /// Bit-plane sweeps per unit for the `bits` strategy.
    pub bit_sweeps: usize,
    /// Re-initialize activation quantizers on the quantized chain after optimization.
    pub recalibrate_activations: bool,
    /// Iterations between best-iterate checkpoints; `None` uses `iters / 10`.
    pub eval_every: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bits_w: 8,
            bits_a: 8,
            init_w: InitMethod::Mse,
            init_a: InitMethod::Mse,
            cle: false,
            strategy: Strategy::Round,
            granularity: UnitGranularity::Layer,
            bias_tune: true,
            calib_size: 1024,
            iters: 2000,
            lr: None,
            bias_lr: 1e-3,
            batch_size: 32,
            seed: 0,
            mse_grid_steps: crate::quant::DEFAULT_GRID_STEPS,
            bit_sweeps: 3,
            recalibrate_activations: false,
            eval_every: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, b) in [("weight", self.bits_w), ("activation", self.bits_a)] {
            if !(2..=8).contains(&b) && b != FULL_PRECISION_BITS {
                return Err(Error::Config(format!(
                    "{what} bitwidth must be in 2..=8 or {FULL_PRECISION_BITS}, got {b}"
                )));
            }
        }
        if self.batch_size == 0 || self.calib_size < self.batch_size {
            return Err(Error::Config(format!(
                "need calib_size >= batch_size >= 1 (calib_size {}, batch_size {})",
                self.calib_size, self.batch_size
            )));
        }
        if self.strategy == Strategy::Bits && self.granularity == UnitGranularity::Block {
            return Err(Error::Config(
                "the bits strategy optimizes single layers only; use layer granularity".into(),
            ));
        }
        if self.mse_grid_steps < 2 {
            return Err(Error::Config("mse_grid_steps must be >= 2".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("invalid learning rate {lr}")));
            }
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.strategy.default_lr())
    }

    pub fn weights_quantized(&self) -> bool {
        self.bits_w != FULL_PRECISION_BITS
    }

    pub fn activations_quantized(&self) -> bool {
        self.bits_a != FULL_PRECISION_BITS
    }

    pub(crate) fn checkpoint_every(&self) -> usize {
        self.eval_every.unwrap_or(self.iters / 10).max(1)
    }
}
