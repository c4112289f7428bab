use super::{qparams_from_range, GroupIndex, QParams, QuantSpec, QuantizerState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GRID_STEPS: usize = 100;

/// Running per-group min/max over a stream of tensors.
#[derive(Debug, Clone)]
pub struct RangeObserver {
    spec: QuantSpec,
    min: Vec<f64>,
    max: Vec<f64>,
    seen: bool,
}

impl RangeObserver {
    pub fn new(spec: QuantSpec) -> Self {
        Self {
            spec,
            min: Vec::new(),
            max: Vec::new(),
            seen: false,
        }
    }

    pub fn observe(&mut self, x: &Tensor) -> Result<()> {
        let groups = self.spec.groups(x.shape())?;
        if !self.seen {
            self.min = vec![f64::INFINITY; groups];
            self.max = vec![f64::NEG_INFINITY; groups];
            self.seen = true;
        } else if groups != self.min.len() {
            return Err(Error::Shape {
                expected: vec![self.min.len()],
                got: vec![groups],
            });
        }
        let gi = GroupIndex::new(&self.spec.granularity, x.shape());
        for (i, &v) in x.data().iter().enumerate() {
            let g = gi.group(i);
            self.min[g] = self.min[g].min(v);
            self.max[g] = self.max[g].max(v);
        }
        Ok(())
    }

    /// Per-group (min, max); empty groups report (0, 0).
    pub fn ranges(&self) -> Result<Vec<(f64, f64)>> {
        if !self.seen {
            return Err(Error::Config("quantizer initialization needs at least one sample".into()));
        }
        Ok(self
            .min
            .iter()
            .zip(&self.max)
            .map(|(&a, &b)| if a <= b { (a, b) } else { (0.0, 0.0) })
            .collect())
    }

    pub fn finish(&self) -> Result<QuantizerState> {
        let params = self
            .ranges()?
            .into_iter()
            .map(|(a, b)| qparams_from_range(a, b, self.spec.bits, self.spec.scheme))
            .collect::<Result<Vec<_>>>()?;
        QuantizerState::new(self.spec, params)
    }
}

/// Accumulates reconstruction error of proportionally shrunk candidate ranges
/// `(k / steps) * (min, max)`, `k = 1..=steps`, per group.
#[derive(Debug, Clone)]
pub struct MseObserver {
    spec: QuantSpec,
    candidates: Vec<Vec<QParams>>,
    errors: Vec<Vec<f64>>,
}

impl MseObserver {
    /// Candidates are derived from the ranges of a completed [`RangeObserver`].
    pub fn new(ranges: &RangeObserver, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config("MSE grid search needs at least 2 steps".into()));
        }
        let spec = ranges.spec;
        let candidates = ranges
            .ranges()?
            .into_iter()
            .map(|(a, b)| {
                (1..=steps)
                    .map(|k| {
                        let f = k as f64 / steps as f64;
                        qparams_from_range(f * a, f * b, spec.bits, spec.scheme)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let errors = vec![vec![0.0; steps]; candidates.len()];
        Ok(Self {
            spec,
            candidates,
            errors,
        })
    }

    pub fn observe(&mut self, x: &Tensor) -> Result<()> {
        let groups = self.spec.groups(x.shape())?;
        if groups != self.candidates.len() {
            return Err(Error::Shape {
                expected: vec![self.candidates.len()],
                got: vec![groups],
            });
        }
        let gi = GroupIndex::new(&self.spec.granularity, x.shape());
        for (i, &v) in x.data().iter().enumerate() {
            let g = gi.group(i);
            for (err, q) in self.errors[g].iter_mut().zip(&self.candidates[g]) {
                let d = v - q.quantize(v);
                *err += d * d;
            }
        }
        Ok(())
    }

    /// Picks the lowest-error candidate per group; ties keep the widest range.
    pub fn finish(&self) -> Result<QuantizerState> {
        let params = self
            .candidates
            .iter()
            .zip(&self.errors)
            .map(|(cands, errs)| {
                let mut best = cands.len() - 1;
                for k in (0..cands.len()).rev() {
                    if errs[k] < errs[best] {
                        best = k;
                    }
                }
                cands[best]
            })
            .collect();
        QuantizerState::new(self.spec, params)
    }
}

/// Clipping range from the global per-group min/max of `samples`.
pub fn init_minmax(samples: &[Tensor], spec: &QuantSpec) -> Result<QuantizerState> {
    let mut obs = RangeObserver::new(*spec);
    for s in samples {
        obs.observe(s)?;
    }
    obs.finish()
}

/// Clipping range minimizing the squared reconstruction error over a
/// proportional shrink grid of the MinMax range.
pub fn init_mse(samples: &[Tensor], spec: &QuantSpec, grid_steps: usize) -> Result<QuantizerState> {
    let mut ranges = RangeObserver::new(*spec);
    for s in samples {
        ranges.observe(s)?;
    }
    let mut obs = MseObserver::new(&ranges, grid_steps)?;
    for s in samples {
        obs.observe(s)?;
    }
    obs.finish()
}

/// Sum of squared reconstruction errors of `q` over `samples`.
pub fn reconstruction_sse(samples: &[Tensor], q: &QuantizerState) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let qs = q.quantize(s)?;
        total += s
            .data()
            .iter()
            .zip(qs.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}
