//! Bit-plane coordinate descent on integer weight codes.
//!
//! A single weighted layer is linear in its weight, so for output channel `c`
//! the squared error is the quadratic `s^2 q'Gq - 2 s q'r + const` with `G`
//! the Gram matrix of the input patches and `r` their correlation with the
//! bias-free target. Codes are swept one bit plane at a time from the most
//! significant bit down; after each sweep the channel scale is refitted by
//! least squares.

use super::config::PipelineConfig;
use super::optimize::{Unit, UnitData};
use super::qgraph::{QuantizedGraph, StrategyState};
use super::{LogEntry, RunLog};
use crate::engine::{NodeId, Op};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Quadratic least-squares problem of one output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelProblem {
    pub dim: usize,
    /// Row-major `dim x dim` Gram matrix.
    pub gram: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl ChannelProblem {
    /// `s^2 q'Gq - 2 s q'r` (the squared error up to a constant).
    pub fn loss(&self, codes: &[i64], scale: f64) -> f64 {
        let mut quad = 0.0;
        let mut lin = 0.0;
        for i in 0..self.dim {
            let qi = codes[i] as f64;
            let row = &self.gram[i * self.dim..(i + 1) * self.dim];
            let gq: f64 = row.iter().zip(codes).map(|(g, &q)| g * q as f64).sum();
            quad += qi * gq;
            lin += qi * self.rhs[i];
        }
        scale * scale * quad - 2.0 * scale * lin
    }

    /// Least-squares scale for fixed codes, if positive and finite.
    pub fn refit_scale(&self, codes: &[i64]) -> Option<f64> {
        let mut quad = 0.0;
        let mut lin = 0.0;
        for i in 0..self.dim {
            let row = &self.gram[i * self.dim..(i + 1) * self.dim];
            let gq: f64 = row.iter().zip(codes).map(|(g, &q)| g * q as f64).sum();
            quad += codes[i] as f64 * gq;
            lin += codes[i] as f64 * self.rhs[i];
        }
        let s = lin / quad;
        (quad > 0.0 && s.is_finite() && s > 0.0).then_some(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitSolution {
    pub codes: Vec<i64>,
    pub scale: f64,
    pub loss: f64,
}

/// One MSB-to-LSB sweep over all bit planes at a fixed scale. At plane `k`
/// each code may move by `+2^k` or `-2^k` (setting or clearing that bit, with
/// carry) when this lowers the error; codes stay in `[qmin, qmax]`.
pub fn sweep_bit_planes(p: &ChannelProblem, codes: &mut [i64], scale: f64, qmin: i64, qmax: i64, bits: u32) {
    let n = p.dim;
    let mut gq: Vec<f64> = (0..n)
        .map(|i| {
            p.gram[i * n..(i + 1) * n]
                .iter()
                .zip(codes.iter())
                .map(|(g, &q)| g * q as f64)
                .sum()
        })
        .collect();
    for plane in (0..bits).rev() {
        let step = 1i64 << plane;
        for j in 0..n {
            let mut best = (0.0, 0i64);
            for d in [step, -step] {
                if !(qmin..=qmax).contains(&(codes[j] + d)) {
                    continue;
                }
                let df = d as f64;
                let delta = scale * scale * (2.0 * df * gq[j] + df * df * p.gram[j * n + j]) - 2.0 * scale * df * p.rhs[j];
                if delta < best.0 {
                    best = (delta, d);
                }
            }
            let d = best.1;
            if d != 0 {
                codes[j] += d;
                let df = d as f64;
                for (i, g) in gq.iter_mut().enumerate() {
                    *g += df * p.gram[i * n + j];
                }
            }
        }
    }
}

/// Coordinate descent from `codes` at `scale`: `sweeps` rounds of a bit-plane
/// sweep followed (when `refit`) by a least-squares scale refit. The best
/// state seen, including the starting one, is returned.
pub fn coordinate_descent(
    p: &ChannelProblem,
    codes: &[i64],
    scale: f64,
    qmin: i64,
    qmax: i64,
    sweeps: usize,
    refit: bool,
) -> BitSolution {
    let bits = (64 - (qmax - qmin).leading_zeros()).max(1);
    let mut best = BitSolution {
        codes: codes.to_vec(),
        scale,
        loss: p.loss(codes, scale),
    };
    let mut cur = best.clone();
    for _ in 0..sweeps {
        sweep_bit_planes(p, &mut cur.codes, cur.scale, qmin, qmax, bits);
        if refit {
            if let Some(s) = p.refit_scale(&cur.codes) {
                cur.scale = s;
            }
        }
        cur.loss = p.loss(&cur.codes, cur.scale);
        if cur.loss < best.loss {
            best = cur.clone();
        }
    }
    best
}

/// Patch geometry of a weighted layer: rows per sample and the patch row for
/// each output position, with weight index `f * channels + c`.
struct Im2col {
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    h: usize,
    w: usize,
    cin: usize,
}

impl Im2col {
    fn new(op: &Op, x: &Tensor) -> Result<Self> {
        let s = x.shape();
        let conv = |spec: &crate::engine::ConvSpec, one_d: bool| -> Result<Im2col> {
            let (h, w) = if one_d { (s[1], 1) } else { (s[1], s[2]) };
            let kw = if one_d { 1 } else { spec.kernel.1 };
            let pad = |n, k| -> Result<(usize, usize)> {
                spec.padding
                    .resolve(n, k, spec.stride)
                    .ok_or_else(|| Error::Config("kernel larger than input".into()))
            };
            let (oh, pad_t) = pad(h, spec.kernel.0)?;
            let (ow, pad_l) = if one_d { (1, 0) } else { pad(w, kw)? };
            Ok(Im2col {
                oh,
                ow,
                kh: spec.kernel.0,
                kw,
                stride: spec.stride,
                pad_t,
                pad_l,
                h,
                w,
                cin: spec.in_channels,
            })
        };
        match op {
            Op::Conv2d(spec) | Op::DepthwiseConv2d(spec) => conv(spec, false),
            Op::Conv1d(spec) => conv(spec, true),
            Op::Dense { in_features, .. } => Ok(Im2col {
                oh: 1,
                ow: 1,
                kh: 1,
                kw: 1,
                stride: 1,
                pad_t: 0,
                pad_l: 0,
                h: 1,
                w: 1,
                cin: *in_features,
            }),
            other => Err(Error::Config(format!("{} has no weights", other.kind()))),
        }
    }

    fn width(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows_per_sample(&self) -> usize {
        self.oh * self.ow
    }

    /// Patch rows of samples `[start, end)` of `x`.
    fn rows(&self, x: &Tensor, start: usize, end: usize) -> Vec<f64> {
        let width = self.width();
        let item = x.item_len();
        let rps = self.rows_per_sample();
        let mut out = vec![0.0; (end - start) * rps * width];
        out.par_chunks_mut(rps * width).enumerate().for_each(|(k, rows)| {
            let xs = &x.data()[(start + k) * item..(start + k + 1) * item];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = &mut rows[(oy * self.ow + ox) * width..][..width];
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_t as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_l as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((iy as usize) * self.w + ix as usize) * self.cin;
                            let dst = (ky * self.kw + kx) * self.cin;
                            row[dst..dst + self.cin].copy_from_slice(&xs[src..src + self.cin]);
                        }
                    }
                }
            }
        });
        out
    }
}

const ROWS_BUDGET: usize = 1 << 22;

/// Per-channel quadratic problems of weighted layer `layer` given its
/// (already activation-quantized) input and bias-free float target.
pub fn channel_problems(op: &Op, x: &Tensor, target: &Tensor, bias: Option<&Tensor>) -> Result<Vec<ChannelProblem>> {
    let geo = Im2col::new(op, x)?;
    let depthwise = matches!(op, Op::DepthwiseConv2d(_));
    let channels = target.channels();
    let width = geo.width();
    let dim = if depthwise { geo.kh * geo.kw } else { width };
    let rps = geo.rows_per_sample();
    if target.numel() != x.batch() * rps * channels {
        return Err(Error::Shape {
            expected: vec![x.batch(), rps, channels],
            got: target.shape().to_vec(),
        });
    }
    let shared = !depthwise;
    let n_gram = if shared { 1 } else { channels };
    let mut grams = vec![vec![0.0; dim * dim]; n_gram];
    let mut rhs = vec![vec![0.0; dim]; channels];
    let per_block = (ROWS_BUDGET / (rps * width).max(1)).max(1);

    let mut start = 0;
    while start < x.batch() {
        let end = (start + per_block).min(x.batch());
        let a = geo.rows(x, start, end);
        let rows = (end - start) * rps;
        let t: Vec<f64> = target.data()[start * rps * channels..end * rps * channels]
            .chunks(channels)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(c, v)| v - bias.map_or(0.0, |b| b.data()[c]))
            })
            .collect();
        if shared {
            grams[0].par_chunks_mut(dim).enumerate().for_each(|(i, g)| {
                for r in 0..rows {
                    let row = &a[r * width..(r + 1) * width];
                    let ai = row[i];
                    if ai != 0.0 {
                        for (gj, &aj) in g.iter_mut().zip(row) {
                            *gj += ai * aj;
                        }
                    }
                }
            });
            rhs.par_iter_mut().enumerate().for_each(|(c, rc)| {
                for r in 0..rows {
                    let tc = t[r * channels + c];
                    for (ri, &ai) in rc.iter_mut().zip(&a[r * width..(r + 1) * width]) {
                        *ri += ai * tc;
                    }
                }
            });
        } else {
            grams.par_iter_mut().zip(rhs.par_iter_mut()).enumerate().for_each(|(c, (g, rc))| {
                for r in 0..rows {
                    let row = &a[r * width..(r + 1) * width];
                    let tc = t[r * channels + c];
                    for f in 0..dim {
                        let af = row[f * channels + c];
                        rc[f] += af * tc;
                        for k in 0..dim {
                            g[f * dim + k] += af * row[k * channels + c];
                        }
                    }
                }
            });
        }
        start = end;
    }
    Ok(rhs
        .into_iter()
        .enumerate()
        .map(|(c, rhs)| ChannelProblem {
            dim,
            gram: grams[if shared { 0 } else { c }].clone(),
            rhs,
        })
        .collect())
}

/// Runs the bits strategy on a single-layer unit. Returns the best unit MSE and
/// the sweep it was reached at.
pub(crate) fn optimize_bits(
    q: &mut QuantizedGraph,
    unit: &Unit,
    data: &UnitData,
    config: &PipelineConfig,
    eval: &dyn Fn(&QuantizedGraph) -> Result<f64>,
    log: &mut RunLog,
) -> Result<(f64, usize)> {
    let layer = *unit.span.start();
    if unit.span.end() != unit.span.start() {
        return Err(Error::Config("the bits strategy optimizes single layers only".into()));
    }
    let initial = eval(q)?;
    let (Some(wq), Some(w)) = (q.weight_q[layer].clone(), q.graph.layers[layer].weight.clone()) else {
        return Ok((initial, 0));
    };
    let l = &q.graph.layers[layer];
    let node: NodeId = l.inputs[0];
    let raw = data
        .inputs
        .get(&node)
        .ok_or_else(|| Error::State(format!("missing input for unit `{}`", unit.name)))?;
    let x = match q.act_q.get(&node) {
        Some(aq) => aq.quantize(raw)?,
        None => raw.clone(),
    };
    let problems = channel_problems(&l.op, &x, &data.target, l.bias.as_ref())?;
    let channels = problems.len();
    let mut codes = wq.codes(&w)?;
    let gather = |codes: &[i64], c: usize| -> Vec<i64> { (0..problems[c].dim).map(|f| codes[f * channels + c]).collect() };

    let mut cur: Vec<BitSolution> = (0..channels)
        .map(|c| {
            let qc = gather(&codes, c);
            let s = wq.params[c].scale;
            BitSolution {
                loss: problems[c].loss(&qc, s),
                codes: qc,
                scale: s,
            }
        })
        .collect();
    let mut best_ch = cur.clone();
    let mut best = (initial, 0usize, q.clone());
    let qmin = wq.params[0].qmin;
    let qmax = wq.params[0].qmax;

    for sweep in 1..=config.bit_sweeps.max(1) {
        cur.par_iter_mut().zip(&problems).for_each(|(sol, p)| {
            *sol = coordinate_descent(p, &sol.codes, sol.scale, qmin, qmax, 1, true);
        });
        for (b, c) in best_ch.iter_mut().zip(&cur) {
            if c.loss < b.loss {
                *b = c.clone();
            }
        }
        let mut state = wq.clone();
        for (c, sol) in best_ch.iter().enumerate() {
            state.params[c].scale = sol.scale;
            for (f, &v) in sol.codes.iter().enumerate() {
                codes[f * channels + c] = v;
            }
        }
        q.weight_q[layer] = Some(state);
        q.strategy_state[layer] = Some(StrategyState::Codes(codes.clone()));
        let mse = eval(q)?;
        log.entries.push(LogEntry::new("optimize", &unit.name, sweep, mse));
        if mse < best.0 {
            best = (mse, sweep, q.clone());
        }
    }
    *q = best.2;
    Ok((best.0, best.1))
}
