//! Simulated (fake) quantization.
//!
//! `x_hat = s * (clamp(round(x / s) + z, n, p) - z)` with round-half-to-even.
//! Weights use the symmetric signed grid `[-2^(b-1), 2^(b-1) - 1]` with
//! `z = 0`; activations use the asymmetric grid `[0, 2^b - 1]`.

mod init;
mod surrogate;

pub use init::{init_minmax, init_mse, reconstruction_sse, MseObserver, RangeObserver, DEFAULT_GRID_STEPS};
pub use surrogate::{
    adaround_reg, adaround_reg_grad, lsq_grad_scale, lsq_scale_grad, lsq_zero_point_grad, softround,
    softround_grad, ste_weight_grad, RoundingVars,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Ranges narrower than this fall back to `s = 1e-8`, `z = 0`.
pub const DEGENERATE_RANGE: f64 = 1e-12;
pub const DEGENERATE_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Asymmetric,
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One quantizer per index along `axis`.
    PerChannel { axis: usize },
}

/// Scheme, granularity and bitwidth of a quantizer before initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub bits: u32,
}

impl QuantSpec {
    /// Symmetric per-channel quantizer over the last axis of a rank-`rank` weight.
    pub fn weight(bits: u32, rank: usize) -> Self {
        Self {
            scheme: Scheme::Symmetric,
            granularity: Granularity::PerChannel { axis: rank - 1 },
            bits,
        }
    }

    /// Asymmetric per-tensor activation quantizer.
    pub fn activation(bits: u32) -> Self {
        Self {
            scheme: Scheme::Asymmetric,
            granularity: Granularity::PerTensor,
            bits,
        }
    }

    pub fn grid(&self) -> (i64, i64) {
        grid_bounds(self.bits, self.scheme)
    }

    /// Number of groups for a tensor of `shape`.
    pub fn groups(&self, shape: &[usize]) -> Result<usize> {
        match self.granularity {
            Granularity::PerTensor => Ok(1),
            Granularity::PerChannel { axis } => shape.get(axis).copied().ok_or_else(|| {
                Error::Config(format!("channel axis {axis} out of range for shape {shape:?}"))
            }),
        }
    }
}

/// Integer grid `[n, p]` for a bitwidth and scheme.
pub fn grid_bounds(bits: u32, scheme: Scheme) -> (i64, i64) {
    match scheme {
        Scheme::Asymmetric => (0, (1i64 << bits) - 1),
        Scheme::Symmetric => (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1),
    }
}

/// Quantization parameters of a single group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub scale: f64,
    pub zero_point: i64,
    pub qmin: i64,
    pub qmax: i64,
    /// Set when the range was degenerate and the fallback scale was used.
    pub degenerate: bool,
}

/// Scale and zero point covering the clipping range `[alpha, beta]`.
///
/// For the asymmetric scheme the range is first widened to contain 0.
pub fn qparams_from_range(alpha: f64, beta: f64, bits: u32, scheme: Scheme) -> Result<QParams> {
    if !alpha.is_finite() || !beta.is_finite() || alpha > beta {
        return Err(Error::Config(format!("invalid clipping range [{alpha}, {beta}]")));
    }
    if !(2..=16).contains(&bits) {
        return Err(Error::Config(format!("unsupported bitwidth {bits}")));
    }
    let (n, p) = grid_bounds(bits, scheme);
    let fallback = QParams {
        scale: DEGENERATE_SCALE,
        zero_point: 0,
        qmin: n,
        qmax: p,
        degenerate: true,
    };
    match scheme {
        Scheme::Asymmetric => {
            let (alpha, beta) = (alpha.min(0.0), beta.max(0.0));
            if beta - alpha < DEGENERATE_RANGE {
                return Ok(fallback);
            }
            let scale = (beta - alpha) / (p - n) as f64;
            let z = (-alpha / scale).round_ties_even() as i64 + n;
            Ok(QParams {
                scale,
                zero_point: z.clamp(n, p),
                qmin: n,
                qmax: p,
                degenerate: false,
            })
        }
        Scheme::Symmetric => {
            let m = alpha.abs().max(beta.abs());
            if 2.0 * m < DEGENERATE_RANGE {
                return Ok(fallback);
            }
            Ok(QParams {
                scale: m / p as f64,
                zero_point: 0,
                qmin: n,
                qmax: p,
                degenerate: false,
            })
        }
    }
}

impl QParams {
    /// Integer grid index of `x` (before removing the zero point).
    #[inline]
    pub fn code(&self, x: f64) -> i64 {
        let q = (x / self.scale).round_ties_even();
        // saturate before the integer cast so huge ratios cannot wrap
        let q = q.clamp((self.qmin - self.zero_point) as f64 - 1.0, (self.qmax - self.zero_point) as f64 + 1.0);
        (q as i64 + self.zero_point).clamp(self.qmin, self.qmax)
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        self.scale * (self.code(x) - self.zero_point) as f64
    }

    /// Whether `x` lands inside the grid before clamping.
    #[inline]
    pub fn in_range(&self, x: f64) -> bool {
        let q = (x / self.scale).round_ties_even() + self.zero_point as f64;
        q >= self.qmin as f64 && q <= self.qmax as f64
    }
}

/// Fully initialized quantizer for one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub spec: QuantSpec,
    pub params: Vec<QParams>,
}

impl QuantizerState {
    pub fn new(spec: QuantSpec, params: Vec<QParams>) -> Result<Self> {
        let (n, p) = spec.grid();
        if params.is_empty() {
            return Err(Error::Config("quantizer needs at least one group".into()));
        }
        if spec.granularity == Granularity::PerTensor && params.len() != 1 {
            return Err(Error::Config("per-tensor quantizer must have one group".into()));
        }
        for g in &params {
            let ok = g.scale > 0.0
                && g.scale.is_finite()
                && n < p
                && g.qmin == n
                && g.qmax == p
                && match spec.scheme {
                    Scheme::Symmetric => g.zero_point == 0,
                    Scheme::Asymmetric => (n..=p).contains(&g.zero_point),
                };
            if !ok {
                return Err(Error::Config(format!("invalid quantizer group {g:?} for {spec:?}")));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn bits(&self) -> u32 {
        self.spec.bits
    }

    pub fn scheme(&self) -> Scheme {
        self.spec.scheme
    }

    pub fn scales(&self) -> Vec<f64> {
        self.params.iter().map(|g| g.scale).collect()
    }

    pub fn is_degenerate(&self) -> bool {
        self.params.iter().any(|g| g.degenerate)
    }

    /// Checks that this quantizer applies to tensors of `shape`.
    pub fn check(&self, shape: &[usize]) -> Result<()> {
        let groups = self.spec.groups(shape)?;
        if groups != self.params.len() {
            return Err(Error::Config(format!(
                "quantizer has {} groups, tensor {shape:?} needs {groups}",
                self.params.len()
            )));
        }
        Ok(())
    }

    /// Maps a flat index of a tensor of `shape` to its quantization group.
    pub fn grouping(&self, shape: &[usize]) -> GroupIndex {
        GroupIndex::new(&self.spec.granularity, shape)
    }

    pub fn quantize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x.shape())?;
        let gi = self.grouping(x.shape());
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = self.params[gi.group(i)].quantize(*v);
        }
        Ok(out)
    }

    /// Integer codes `clamp(round(x/s) + z, n, p)`.
    pub fn codes(&self, x: &Tensor) -> Result<Vec<i64>> {
        self.check(x.shape())?;
        let gi = self.grouping(x.shape());
        Ok(x.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| self.params[gi.group(i)].code(v))
            .collect())
    }
}

/// Flat index -> group lookup for a given granularity and shape.
#[derive(Debug, Clone, Copy)]
pub struct GroupIndex {
    stride: usize,
    extent: usize,
}

impl GroupIndex {
    pub fn new(granularity: &Granularity, shape: &[usize]) -> Self {
        match *granularity {
            Granularity::PerTensor => Self { stride: 1, extent: 1 },
            Granularity::PerChannel { axis } => Self {
                stride: shape[axis + 1..].iter().product(),
                extent: shape[axis],
            },
        }
    }

    #[inline]
    pub fn group(&self, flat: usize) -> usize {
        if self.extent == 1 {
            0
        } else {
            (flat / self.stride) % self.extent
        }
    }

    pub fn len(&self) -> usize {
        self.extent
    }

    pub fn is_empty(&self) -> bool {
        self.extent == 0
    }
}

/// Quantizes a scalar with explicit parameters.
pub fn quantize_scalar(x: f64, scale: f64, zero_point: i64, qmin: i64, qmax: i64) -> f64 {
    QParams {
        scale,
        zero_point,
        qmin,
        qmax,
        degenerate: false,
    }
    .quantize(x)
}
