//! Cross-layer equalization.
//!
//! For two weighted layers joined only by a ReLU, output channel `i` of the
//! first layer is divided by `s_i` and input channel `i` of the second is
//! multiplied by it, with `s_i = sqrt(r1_i / r2_i)`. ReLU commutes with
//! positive scaling, so the float network function is unchanged and both
//! per-channel weight ranges become `sqrt(r1_i * r2_i)`.

use crate::engine::{Graph, NodeId, Op};
use serde::Serialize;

/// One equalized pair: the accumulated scales and the final per-channel ranges.
#[derive(Debug, Clone, Serialize)]
pub struct EqualizedPair {
    pub first: String,
    pub second: String,
    pub scales: Vec<f64>,
    pub ranges_first: Vec<f64>,
    pub ranges_second: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CleReport {
    pub pairs: Vec<EqualizedPair>,
}

fn is_equalizable(op: &Op) -> bool {
    matches!(op, Op::Conv2d(_) | Op::DepthwiseConv2d(_))
}

/// (first layer, second layer) pairs eligible for equalization, in graph order.
pub fn eligible_pairs(graph: &Graph) -> Vec<(usize, usize)> {
    let consumers = graph.consumers();
    let mut pairs = Vec::new();
    for (i, layer) in graph.layers.iter().enumerate() {
        if !is_equalizable(&layer.op) {
            continue;
        }
        let out = NodeId::of_layer(i);
        let [relu] = consumers[out.0][..] else { continue };
        if !matches!(graph.layers[relu].op, Op::Relu) {
            continue;
        }
        let [next] = consumers[NodeId::of_layer(relu).0][..] else { continue };
        let second = &graph.layers[next];
        if is_equalizable(&second.op) && second.inputs == [NodeId::of_layer(relu)] {
            pairs.push((i, next));
        }
    }
    pairs
}

/// Max |w| per output channel (last axis).
pub fn output_channel_ranges(w: &crate::Tensor) -> Vec<f64> {
    let c = w.channels();
    let mut r = vec![0.0f64; c];
    for (i, v) in w.data().iter().enumerate() {
        r[i % c] = r[i % c].max(v.abs());
    }
    r
}

/// Max |w| per input channel of the second layer of a pair.
pub fn input_channel_ranges(op: &Op, w: &crate::Tensor) -> Vec<f64> {
    match op {
        Op::Conv2d(spec) => {
            let (cin, cout) = (spec.in_channels, spec.out_channels);
            let mut r = vec![0.0f64; cin];
            for (i, v) in w.data().iter().enumerate() {
                let ci = (i / cout) % cin;
                r[ci] = r[ci].max(v.abs());
            }
            r
        }
        _ => output_channel_ranges(w),
    }
}

fn scale_input_channels(op: &Op, w: &mut crate::Tensor, s: &[f64]) {
    match op {
        Op::Conv2d(spec) => {
            let (cin, cout) = (spec.in_channels, spec.out_channels);
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                *v *= s[(i / cout) % cin];
            }
        }
        _ => {
            let c = s.len();
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                *v *= s[i % c];
            }
        }
    }
}

/// Sweeps over the pairs stop once every scale of a sweep is within this of 1.
const CONVERGED: f64 = 1e-10;
const MAX_SWEEPS: usize = 10_000;
/// Over-relaxation exponent: each step applies `s^OMEGA`. Long chains of
/// coupled pairs converge several times faster than with plain steps, and the
/// fixed point (`s = 1` everywhere) is the same.
const OMEGA: f64 = 1.8;

/// Rescales one pair in place and returns the scales applied.
fn equalize_pair(out: &mut Graph, a: usize, b: usize) -> Vec<f64> {
    let (Some(w1), Some(w2)) = (&out.layers[a].weight, &out.layers[b].weight) else {
        return Vec::new();
    };
    let r1 = output_channel_ranges(w1);
    let r2 = input_channel_ranges(&out.layers[b].op, w2);
    let scales: Vec<f64> = r1
        .iter()
        .zip(&r2)
        .map(|(&r1, &r2)| if r1 > 0.0 && r2 > 0.0 { (r1 / r2).sqrt().powf(OMEGA) } else { 1.0 })
        .collect();

    let first = &mut out.layers[a];
    let c = scales.len();
    if let Some(w) = first.weight.as_mut() {
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v /= scales[i % c];
        }
    }
    if let Some(bias) = first.bias.as_mut() {
        for (v, s) in bias.data_mut().iter_mut().zip(&scales) {
            *v /= s;
        }
    }
    let op = out.layers[b].op.clone();
    if let Some(w) = out.layers[b].weight.as_mut() {
        scale_input_channels(&op, w, &scales);
    }
    scales
}

/// Equalizes every eligible pair. Pairs that share a layer (chains such as
/// dw -> pw -> dw) disturb each other, so the pairs are swept in graph order
/// until no scale moves. Expects batchnorm to be folded already; graphs
/// without eligible pairs are returned unchanged.
pub fn cle_equalize(graph: &Graph) -> (Graph, CleReport) {
    let mut out = graph.clone();
    let pairs = eligible_pairs(graph);
    let mut total: Vec<Vec<f64>> = pairs
        .iter()
        .map(|&(a, _)| vec![1.0; graph.layers[a].op.out_channels().unwrap_or(0)])
        .collect();
    for _ in 0..MAX_SWEEPS {
        let mut moved = 0.0f64;
        for (k, &(a, b)) in pairs.iter().enumerate() {
            let scales = equalize_pair(&mut out, a, b);
            for (t, s) in total[k].iter_mut().zip(&scales) {
                *t *= s;
                moved = moved.max((s - 1.0).abs());
            }
        }
        if moved <= CONVERGED {
            break;
        }
    }
    let pairs = pairs
        .iter()
        .zip(total)
        .map(|(&(a, b), scales)| EqualizedPair {
            first: out.layers[a].name.clone(),
            second: out.layers[b].name.clone(),
            scales,
            ranges_first: output_channel_ranges(out.layers[a].weight.as_ref().expect("weighted")),
            ranges_second: input_channel_ranges(&out.layers[b].op, out.layers[b].weight.as_ref().expect("weighted")),
        })
        .collect();
    (out, CleReport { pairs })
}
