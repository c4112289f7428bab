//! Quantizer insertion and initialization.

use super::config::{InitMethod, PipelineConfig};
use super::qgraph::QuantizedGraph;
use crate::engine::{run_span, Graph, Hooks, NodeId, NoHooks};
use crate::error::{Error, Result};
use crate::quant::{init_minmax, init_mse, MseObserver, QuantSpec, QuantizerState, RangeObserver};
use crate::tensor::Tensor;
use std::collections::{BTreeMap, BTreeSet};

/// Samples per forward pass when streaming over calibration data.
pub(crate) const STREAM_CHUNK: usize = 64;

/// Calls `visit` with the pre-hook values of `nodes` for consecutive chunks of `data`.
pub(crate) fn stream_nodes(
    graph: &Graph,
    hooks: &dyn Hooks,
    data: &Tensor,
    nodes: &[NodeId],
    mut visit: impl FnMut(&BTreeMap<NodeId, &Tensor>) -> Result<()>,
) -> Result<()> {
    let last = nodes.iter().filter_map(|n| n.layer()).max();
    let n = data.batch();
    let mut start = 0;
    while start < n {
        let end = (start + STREAM_CHUNK).min(n);
        let chunk = data.slice_batch(start, end);
        match last {
            None => {
                let map = nodes.iter().map(|&node| (node, &chunk)).collect();
                visit(&map)?;
            }
            Some(last) => {
                let mut env = BTreeMap::new();
                env.insert(NodeId::INPUT, chunk.clone());
                let trace = run_span(graph, 0..=last, env, hooks, true)?;
                let map = nodes
                    .iter()
                    .map(|&node| {
                        trace
                            .pre_value(node)
                            .map(|v| (node, v))
                            .ok_or_else(|| Error::State(format!("node {} was not produced", node.0)))
                    })
                    .collect::<Result<_>>()?;
                visit(&map)?;
            }
        }
        start = end;
    }
    Ok(())
}

/// Pre-hook values of `nodes` over all of `data`.
pub(crate) fn collect_nodes(
    graph: &Graph,
    hooks: &dyn Hooks,
    data: &Tensor,
    nodes: &[NodeId],
) -> Result<BTreeMap<NodeId, Tensor>> {
    let mut parts: BTreeMap<NodeId, Vec<Tensor>> = nodes.iter().map(|&n| (n, Vec::new())).collect();
    stream_nodes(graph, hooks, data, nodes, |chunk| {
        for (node, v) in chunk {
            parts.get_mut(node).expect("requested node").push((*v).clone());
        }
        Ok(())
    })?;
    parts
        .into_iter()
        .map(|(n, p)| Ok((n, Tensor::concat_batch(&p)?)))
        .collect()
}

fn check_calibration(graph: &Graph, calib: &Tensor) -> Result<()> {
    if calib.rank() == 0 || calib.batch() == 0 {
        return Err(Error::Config("calibration set is empty".into()));
    }
    if calib.shape()[1..] != graph.input_shape[..] {
        return Err(Error::Shape {
            expected: graph.input_shape.clone(),
            got: calib.shape()[1..].to_vec(),
        });
    }
    Ok(())
}

/// Initializes activation quantizers on `nodes` from values observed on the
/// chain described by `graph` and `hooks`.
pub(crate) fn init_activation_quantizers(
    graph: &Graph,
    hooks: &dyn Hooks,
    calib: &Tensor,
    nodes: &[NodeId],
    config: &PipelineConfig,
) -> Result<BTreeMap<NodeId, QuantizerState>> {
    if nodes.is_empty() {
        return Ok(BTreeMap::new());
    }
    let spec = QuantSpec::activation(config.bits_a);
    let mut ranges: BTreeMap<NodeId, RangeObserver> =
        nodes.iter().map(|&n| (n, RangeObserver::new(spec))).collect();
    stream_nodes(graph, hooks, calib, nodes, |chunk| {
        for (node, v) in chunk {
            ranges.get_mut(node).expect("observer").observe(v)?;
        }
        Ok(())
    })?;
    match config.init_a {
        InitMethod::Minmax => ranges.iter().map(|(&n, o)| Ok((n, o.finish()?))).collect(),
        InitMethod::Mse => {
            let mut mse: BTreeMap<NodeId, MseObserver> = ranges
                .iter()
                .map(|(&n, o)| Ok((n, MseObserver::new(o, config.mse_grid_steps)?)))
                .collect::<Result<_>>()?;
            stream_nodes(graph, hooks, calib, nodes, |chunk| {
                for (node, v) in chunk {
                    mse.get_mut(node).expect("observer").observe(v)?;
                }
                Ok(())
            })?;
            mse.iter().map(|(&n, o)| Ok((n, o.finish()?))).collect()
        }
    }
}

/// Attaches weight and activation quantizers to `graph` (batchnorm already
/// folded) and initializes them: weights from their own values, activations
/// from the float network's values over `calib`.
pub fn attach_and_init(graph: &Graph, calib: &Tensor, config: &PipelineConfig) -> Result<QuantizedGraph> {
    config.validate()?;
    check_calibration(graph, calib)?;
    let n_layers = graph.layers.len();
    let mut weight_q = vec![None; n_layers];
    if config.weights_quantized() {
        for i in graph.weighted_layers() {
            let w = graph.layers[i]
                .weight
                .as_ref()
                .ok_or_else(|| Error::structural(&graph.layers[i].name, "missing weight"))?;
            let spec = QuantSpec::weight(config.bits_w, w.rank());
            let samples = std::slice::from_ref(w);
            weight_q[i] = Some(match config.init_w {
                InitMethod::Minmax => init_minmax(samples, &spec)?,
                InitMethod::Mse => init_mse(samples, &spec, config.mse_grid_steps)?,
            });
        }
    }
    let act_q = if config.activations_quantized() {
        let nodes = graph.quantized_activation_nodes();
        init_activation_quantizers(graph, &NoHooks, calib, &nodes, config)?
    } else {
        BTreeMap::new()
    };
    Ok(QuantizedGraph {
        graph: graph.clone(),
        weight_q,
        act_q,
        frozen: vec![false; n_layers],
        frozen_acts: BTreeSet::new(),
        strategy_state: vec![None; n_layers],
    })
}
