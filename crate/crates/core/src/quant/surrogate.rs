//! Gradient surrogates used by the reconstruction strategies.

use super::{QParams, QuantizerState};
use crate::error::Result;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Straight-through estimator: passes `upstream` where `x` falls inside the
/// grid before clamping, zero elsewhere.
pub fn ste_weight_grad(x: &Tensor, q: &QuantizerState, upstream: &Tensor) -> Result<Tensor> {
    q.check(x.shape())?;
    let gi = q.grouping(x.shape());
    let mut g = upstream.clone();
    for (i, v) in g.data_mut().iter_mut().enumerate() {
        if !q.params[gi.group(i)].in_range(x.data()[i]) {
            *v = 0.0;
        }
    }
    Ok(g)
}

/// Gradient scale `1 / sqrt(count * p)` for a group of `count` elements.
pub fn lsq_grad_scale(count: usize, qmax: i64) -> f64 {
    1.0 / ((count.max(1) as f64) * (qmax.max(1) as f64)).sqrt()
}

/// Partial derivative of the quantizer output wrt its scale.
#[inline]
pub(crate) fn dq_dscale(x: f64, g: &QParams) -> f64 {
    let v = x / g.scale;
    let q = v.round_ties_even() + g.zero_point as f64;
    if q < g.qmin as f64 {
        (g.qmin - g.zero_point) as f64
    } else if q > g.qmax as f64 {
        (g.qmax - g.zero_point) as f64
    } else {
        v.round_ties_even() - v
    }
}

/// Partial derivative of the quantizer output wrt a continuous zero point.
#[inline]
pub(crate) fn dq_dzero(x: f64, g: &QParams) -> f64 {
    if g.in_range(x) {
        0.0
    } else {
        -g.scale
    }
}

fn per_group(x: &Tensor, q: &QuantizerState, upstream: &Tensor, scaled: bool, f: impl Fn(f64, &QParams) -> f64) -> Result<Vec<f64>> {
    q.check(x.shape())?;
    let gi = q.grouping(x.shape());
    let mut grads = vec![0.0; q.params.len()];
    let mut counts = vec![0usize; q.params.len()];
    for (i, (&xv, &u)) in x.data().iter().zip(upstream.data()).enumerate() {
        let g = gi.group(i);
        grads[g] += u * f(xv, &q.params[g]);
        counts[g] += 1;
    }
    if scaled {
        for (g, (grad, &count)) in grads.iter_mut().zip(&counts).enumerate() {
            *grad *= lsq_grad_scale(count, q.params[g].qmax);
        }
    }
    Ok(grads)
}

/// Learned-step-size scale gradient per group, including the `1/sqrt(count*p)` scaling.
pub fn lsq_scale_grad(x: &Tensor, q: &QuantizerState, upstream: &Tensor) -> Result<Vec<f64>> {
    per_group(x, q, upstream, true, dq_dscale)
}

/// Zero-point gradient per group (straight-through inside the grid), with the same scaling.
pub fn lsq_zero_point_grad(x: &Tensor, q: &QuantizerState, upstream: &Tensor) -> Result<Vec<f64>> {
    per_group(x, q, upstream, true, dq_dzero)
}

/// Rectified sigmoid `clamp(sigmoid(v) * (zeta - gamma) + gamma, 0, 1)`.
#[inline]
pub fn softround(v: f64, zeta: f64, gamma: f64) -> f64 {
    (sigmoid(v) * (zeta - gamma) + gamma).clamp(0.0, 1.0)
}

#[inline]
pub fn softround_grad(v: f64, zeta: f64, gamma: f64) -> f64 {
    let s = sigmoid(v);
    let h = s * (zeta - gamma) + gamma;
    if (0.0..=1.0).contains(&h) {
        s * (1.0 - s) * (zeta - gamma)
    } else {
        0.0
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Rounding regularizer `sum(1 - |2h - 1|^beta)`.
pub fn adaround_reg(h: &[f64], beta: f64) -> f64 {
    h.iter().map(|&h| 1.0 - (2.0 * h - 1.0).abs().powf(beta)).sum()
}

/// Derivative of [`adaround_reg`] wrt each `h`.
pub fn adaround_reg_grad(h: &[f64], beta: f64) -> Vec<f64> {
    h.iter()
        .map(|&h| {
            let d = 2.0 * h - 1.0;
            if d == 0.0 {
                0.0
            } else {
                -beta * d.abs().powf(beta - 1.0) * d.signum() * 2.0
            }
        })
        .collect()
}

/// Learnable rounding offsets for one weight tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundingVars {
    pub v: Tensor,
    pub zeta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl RoundingVars {
    pub const ZETA: f64 = 1.1;
    pub const GAMMA: f64 = -0.1;
    pub const LAMBDA: f64 = 0.01;
    pub const BETA_START: f64 = 20.0;
    pub const BETA_END: f64 = 2.0;

    /// Initializes `V` so that hardened rounding reproduces nearest rounding
    /// (including ties-to-even) of `w` under `q`.
    pub fn init(w: &Tensor, q: &QuantizerState) -> Result<Self> {
        q.check(w.shape())?;
        let gi = q.grouping(w.shape());
        let (zeta, gamma) = (Self::ZETA, Self::GAMMA);
        let mut v = w.clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            let g = &q.params[gi.group(i)];
            let ratio = *x / g.scale;
            let floor = ratio.floor();
            let mut rest = ratio - floor;
            let rounds_up = ratio.round_ties_even() > floor;
            // keep the hardened decision identical to nearest rounding
            rest = if rounds_up { rest.max(0.5 + 1e-6) } else { rest.min(0.5 - 1e-6) };
            let s = ((rest - gamma) / (zeta - gamma)).clamp(1e-6, 1.0 - 1e-6);
            *x = (s / (1.0 - s)).ln();
        }
        Ok(Self {
            v,
            zeta,
            gamma,
            lambda: Self::LAMBDA,
            beta_start: Self::BETA_START,
            beta_end: Self::BETA_END,
        })
    }

    pub fn soft(&self) -> Vec<f64> {
        self.v.data().iter().map(|&v| softround(v, self.zeta, self.gamma)).collect()
    }

    /// Hardened offsets in {0, 1}.
    pub fn hard(&self) -> Vec<f64> {
        self.soft().into_iter().map(|h| if h >= 0.5 { 1.0 } else { 0.0 }).collect()
    }

    /// Linearly annealed beta at iteration `it` of `total`.
    pub fn beta_at(&self, it: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.beta_end;
        }
        let t = it as f64 / (total - 1) as f64;
        self.beta_start + (self.beta_end - self.beta_start) * t
    }

    /// Weight with the given rounding offsets: `s * (clamp(floor(w/s) + h + z, n, p) - z)`.
    pub fn weight_with(&self, w: &Tensor, q: &QuantizerState, h: &[f64]) -> Result<Tensor> {
        q.check(w.shape())?;
        let gi = q.grouping(w.shape());
        let mut out = w.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            let g = &q.params[gi.group(i)];
            let z = g.zero_point as f64;
            let code = ((*x / g.scale).floor() + h[i] + z).clamp(g.qmin as f64, g.qmax as f64);
            *x = g.scale * (code - z);
        }
        Ok(out)
    }

    /// d(weight_with)/dV given upstream gradient wrt the soft weight.
    pub fn v_grad(&self, w: &Tensor, q: &QuantizerState, upstream: &Tensor) -> Result<Vec<f64>> {
        let gi = q.grouping(w.shape());
        let h = self.soft();
        Ok(self
            .v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let g = &q.params[gi.group(i)];
                let z = g.zero_point as f64;
                let code = (w.data()[i] / g.scale).floor() + h[i] + z;
                if code < g.qmin as f64 || code > g.qmax as f64 {
                    0.0
                } else {
                    upstream.data()[i] * g.scale * softround_grad(v, self.zeta, self.gamma)
                }
            })
            .collect())
    }
}
