//! Compute, parameter and activation-memory statistics of a float graph.
//!
//! Counting conventions:
//! * `macs`: multiply-accumulates of weighted layers only.
//! * `aux_ops`: one bias addition per conv / depthwise / conv1d output
//!   element plus, for pooling, one operation per input and per output
//!   element. `total_ops = macs + aux_ops` is the figure BOP is built on.
//! * `params`: weights and biases after batchnorm folding; `params_prefold`
//!   counts the unfolded graph with four values per batchnorm channel.
//! * `peak_activation`: largest sum of simultaneously live buffers in layer
//!   order. A buffer lives from its producer to its last consumer; flatten is
//!   a view of its input, every other layer (including ReLU and add) writes a
//!   new buffer; the network input counts while live.

use crate::engine::{fold_batchnorm, Graph, Op};
use crate::error::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStats {
    pub name: String,
    pub kind: String,
    pub macs: u64,
    pub aux_ops: u64,
    pub params: u64,
    pub output_elems: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub model: String,
    /// Per layer of the folded graph.
    pub layers: Vec<LayerStats>,
    pub macs: u64,
    pub aux_ops: u64,
    pub total_ops: u64,
    pub params: u64,
    pub params_prefold: u64,
    pub bn_params: u64,
    pub peak_activation: u64,
}

fn numel(shape: &[usize]) -> u64 {
    shape.iter().product::<usize>() as u64
}

/// Statistics of `graph` (batchnorm is folded first).
pub fn model_stats(graph: &Graph) -> Result<ModelStats> {
    let bn_params: u64 = graph
        .layers
        .iter()
        .map(|l| match &l.op {
            Op::BatchNorm(bn) => 4 * bn.gamma.len() as u64,
            _ => 0,
        })
        .sum();
    let params_prefold: u64 = graph
        .layers
        .iter()
        .map(|l| {
            let w = l.op.weight_shape().map_or(0, |s| numel(&s));
            w + l.bias.as_ref().map_or(0, |b| b.numel() as u64)
        })
        .sum::<u64>()
        + bn_params;

    let folded = fold_batchnorm(graph)?;
    let shapes = folded.node_shapes()?;
    let mut layers = Vec::with_capacity(folded.layers.len());
    for (i, l) in folded.layers.iter().enumerate() {
        let ins = &shapes[l.inputs[0].0];
        let out = &shapes[i + 1];
        let out_elems = numel(out);
        let (macs, aux) = match &l.op {
            Op::Conv2d(c) | Op::Conv1d(c) => (out_elems * (c.kernel.0 * kernel_w(&l.op) * c.in_channels) as u64, out_elems),
            Op::DepthwiseConv2d(c) => (out_elems * (c.kernel.0 * c.kernel.1) as u64, out_elems),
            Op::Dense {
                in_features,
                out_features,
            } => ((in_features * out_features) as u64, 0),
            Op::AvgPool(_) | Op::MaxPool(_) => (0, numel(ins) + out_elems),
            _ => (0, 0),
        };
        let params = l.weight.as_ref().map_or(0, |w| w.numel() as u64) + l.bias.as_ref().map_or(0, |b| b.numel() as u64);
        layers.push(LayerStats {
            name: l.name.clone(),
            kind: l.op.kind().to_string(),
            macs,
            aux_ops: aux,
            params,
            output_elems: out_elems,
        });
    }
    let macs = layers.iter().map(|l| l.macs).sum();
    let aux_ops = layers.iter().map(|l| l.aux_ops).sum();
    Ok(ModelStats {
        model: graph.name.clone(),
        macs,
        aux_ops,
        total_ops: macs + aux_ops,
        params: layers.iter().map(|l| l.params).sum(),
        params_prefold,
        bn_params,
        peak_activation: peak_activation(&folded, &shapes),
        layers,
    })
}

fn kernel_w(op: &Op) -> usize {
    match op {
        Op::Conv2d(c) => c.kernel.1,
        _ => 1,
    }
}

/// Peak of simultaneously live activation elements under the liveness
/// convention above; `shapes` are per-node sample shapes.
pub fn peak_activation(graph: &Graph, shapes: &[Vec<usize>]) -> u64 {
    let n = graph.num_nodes();
    // buffer owning each node's value
    let mut buffer: Vec<usize> = (0..n).collect();
    for (i, l) in graph.layers.iter().enumerate() {
        if matches!(l.op, Op::Flatten) {
            buffer[i + 1] = buffer[l.inputs[0].0];
        }
    }
    let mut last_use = vec![0usize; n];
    for (i, l) in graph.layers.iter().enumerate() {
        for input in &l.inputs {
            let b = buffer[input.0];
            last_use[b] = last_use[b].max(i);
        }
    }
    let out_buf = buffer[n - 1];
    last_use[out_buf] = graph.layers.len();
    let size = |b: usize| numel(&shapes[b]);

    let mut live: Vec<usize> = vec![0];
    let mut peak = size(0);
    for (i, _) in graph.layers.iter().enumerate() {
        let node = i + 1;
        if buffer[node] == node {
            live.push(node);
        }
        peak = peak.max(live.iter().map(|&b| size(b)).sum());
        live.retain(|&b| last_use[b] > i);
    }
    peak
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_model;

    #[test]
    fn res8_first_and_last_layer() {
        let s = model_stats(&build_model("res8", None, 0).unwrap()).unwrap();
        assert_eq!(s.layers[0].macs, 442_368);
        assert_eq!(s.layers.last().unwrap().macs, 640);
        assert_eq!(s.macs, s.layers.iter().map(|l| l.macs).sum::<u64>());
    }

    #[test]
    fn peak_does_not_depend_on_weights() {
        let a = model_stats(&build_model("dscnn", None, 1).unwrap()).unwrap();
        let b = model_stats(&build_model("dscnn", None, 2).unwrap()).unwrap();
        assert_eq!(a.peak_activation, b.peak_activation);
    }
}
