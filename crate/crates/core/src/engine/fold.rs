use super::graph::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Folds every batchnorm into the weighted layer that feeds it.
///
/// The producer's output must be consumed by the batchnorm alone.
pub fn fold_batchnorm(graph: &Graph) -> Result<Graph> {
    let consumers = graph.consumers();
    let mut folded = graph.clone();
    let mut removed = vec![false; graph.layers.len()];
    // node of a removed batchnorm -> node it is replaced by
    let mut redirect: Vec<NodeId> = (0..graph.num_nodes()).map(NodeId).collect();

    for (i, layer) in graph.layers.iter().enumerate() {
        let Op::BatchNorm(bn) = &layer.op else { continue };
        let src = layer.inputs[0];
        let prev = src
            .layer()
            .filter(|&p| graph.layers[p].op.is_weighted() && consumers[src.0] == [i])
            .ok_or_else(|| {
                Error::structural(&layer.name, "batchnorm does not directly follow a conv/dwconv/fc layer")
            })?;
        let (scale, shift) = bn.affine();
        let target = &mut folded.layers[prev];
        let c = scale.len();
        if target.op.out_channels() != Some(c) {
            return Err(Error::structural(&layer.name, "batchnorm channel count mismatch"));
        }
        let w = target
            .weight
            .as_mut()
            .ok_or_else(|| Error::structural(&target.name, "missing weight"))?;
        for (k, v) in w.data_mut().iter_mut().enumerate() {
            *v *= scale[k % c];
        }
        let old_bias = target.bias.take().map(Tensor::into_data).unwrap_or_else(|| vec![0.0; c]);
        let bias = old_bias
            .iter()
            .zip(&scale)
            .zip(&shift)
            .map(|((b, s), t)| b * s + t)
            .collect();
        target.bias = Some(Tensor::from_vec(bias));
        removed[i] = true;
        redirect[NodeId::of_layer(i).0] = redirect[src.0];
    }
    Ok(remove_layers(&folded, &removed, &redirect))
}

/// Drops the flagged layers, rewiring consumers through `redirect` and
/// renumbering nodes and block ranges.
pub(crate) fn remove_layers(graph: &Graph, removed: &[bool], redirect: &[NodeId]) -> Graph {
    let mut new_index = vec![0usize; graph.num_nodes()];
    let mut next = 1;
    for i in 0..graph.layers.len() {
        if !removed[i] {
            new_index[i + 1] = next;
            next += 1;
        }
    }
    let renumber = |n: NodeId| NodeId(new_index[redirect[n.0].0]);
    let mut out = Graph::new(graph.name.clone(), graph.input_shape.clone());
    for (i, layer) in graph.layers.iter().enumerate() {
        if removed[i] {
            continue;
        }
        let mut l = layer.clone();
        l.inputs = l.inputs.iter().map(|&n| renumber(n)).collect();
        out.layers.push(l);
    }
    for block in &graph.blocks {
        let kept: Vec<usize> = block
            .range()
            .filter(|&i| !removed[i])
            .map(|i| new_index[i + 1] - 1)
            .collect();
        if let (Some(&first), Some(&last)) = (kept.first(), kept.last()) {
            let mut b = block.clone();
            b.first = first;
            b.last = last;
            out.blocks.push(b);
        }
    }
    out
}
