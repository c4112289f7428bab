//! Graph execution: forward passes over a contiguous span of layers and
//! reverse-mode gradients through the same span.

use super::graph::{ConvSpec, Graph, Layer, NodeId, Op, PoolSpec};
use super::kernels::{self, ConvGeom, PoolGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::ops::RangeInclusive;

/// Interception points used to simulate quantization inside a float forward pass.
pub trait Hooks: Sync {
    /// Replacement weight for `layer` (e.g. its fake-quantized weight).
    fn weight(&self, _layer: usize) -> Option<&Tensor> {
        None
    }

    /// Replacement bias for `layer`.
    fn bias(&self, _layer: usize) -> Option<&Tensor> {
        None
    }

    /// Transform applied to a node's value once it is produced.
    fn activation(&self, _node: NodeId, _x: &Tensor) -> Option<Tensor> {
        None
    }

    /// Gradient through [`Hooks::activation`]; `None` means identity.
    fn activation_grad(&self, _node: NodeId, _pre: &Tensor, _grad: &Tensor) -> Option<Tensor> {
        None
    }
}

pub struct NoHooks;

impl Hooks for NoHooks {}

/// Values produced by a forward pass over a span of layers.
#[derive(Debug, Clone)]
pub struct Trace {
    span: RangeInclusive<usize>,
    recorded: bool,
    /// Post-hook values, indexed by node.
    values: Vec<Option<Tensor>>,
    /// Pre-hook values of nodes whose hook changed them.
    pre: Vec<Option<Tensor>>,
}

impl Trace {
    pub fn span(&self) -> RangeInclusive<usize> {
        self.span.clone()
    }

    pub fn is_recorded(&self) -> bool {
        self.recorded
    }

    /// Output of the span's last layer, before any activation hook.
    pub fn output(&self) -> &Tensor {
        self.pre_value(NodeId::of_layer(*self.span.end()))
            .expect("span output is always retained")
    }

    /// Post-hook value of `node`, if retained.
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node.0).and_then(Option::as_ref)
    }

    /// Pre-hook value of `node`, if retained.
    pub fn pre_value(&self, node: NodeId) -> Option<&Tensor> {
        self.pre
            .get(node.0)
            .and_then(Option::as_ref)
            .or_else(|| self.value(node))
    }

    pub fn into_output(mut self) -> Tensor {
        let node = NodeId::of_layer(*self.span.end()).0;
        self.pre[node].take().or_else(|| self.values[node].take()).expect("span output")
    }

    /// Per-layer outputs (pre-hook) in execution order; empty entries were not retained.
    pub fn layer_outputs(&self) -> Vec<Option<&Tensor>> {
        self.span
            .clone()
            .map(|i| self.pre_value(NodeId::of_layer(i)))
            .collect()
    }
}

/// Nodes read by layers in `span` but produced before it.
pub fn span_inputs(graph: &Graph, span: &RangeInclusive<usize>) -> Vec<NodeId> {
    let first_node = NodeId::of_layer(*span.start());
    let mut nodes: Vec<NodeId> = span
        .clone()
        .flat_map(|i| graph.layers[i].inputs.iter().copied())
        .filter(|n| *n < first_node)
        .collect();
    nodes.sort();
    nodes.dedup();
    nodes
}

/// Full-graph forward pass on a batch. With `record` every intermediate is kept.
pub fn forward(graph: &Graph, input: &Tensor, record: bool) -> Result<Trace> {
    forward_with(graph, input, record, &NoHooks)
}

pub fn forward_with(graph: &Graph, input: &Tensor, record: bool, hooks: &dyn Hooks) -> Result<Trace> {
    if graph.layers.is_empty() {
        return Err(Error::State("graph has no layers".into()));
    }
    let expected: Vec<usize> = std::iter::once(input.batch())
        .chain(graph.input_shape.iter().copied())
        .collect();
    if input.shape() != expected.as_slice() {
        return Err(Error::structural(
            "input",
            format!("expected shape {expected:?}, got {:?}", input.shape()),
        ));
    }
    let mut env = BTreeMap::new();
    env.insert(NodeId::INPUT, input.clone());
    run_span(graph, 0..=graph.layers.len() - 1, env, hooks, record)
}

/// Runs layers in `span` given pre-hook values for every node the span reads
/// from outside itself. Hooks are applied to those external values as well.
pub fn run_span(
    graph: &Graph,
    span: RangeInclusive<usize>,
    externals: BTreeMap<NodeId, Tensor>,
    hooks: &dyn Hooks,
    record: bool,
) -> Result<Trace> {
    let n_nodes = graph.num_nodes();
    let mut values: Vec<Option<Tensor>> = vec![None; n_nodes];
    let mut pre: Vec<Option<Tensor>> = vec![None; n_nodes];

    let mut last_use = vec![0usize; n_nodes];
    for i in span.clone() {
        for input in &graph.layers[i].inputs {
            last_use[input.0] = i;
        }
    }

    for node in span_inputs(graph, &span) {
        let x = externals.get(&node).ok_or_else(|| {
            Error::State(format!("span {span:?} needs a value for node {}", node.0))
        })?;
        store(&mut values, &mut pre, node, x.clone(), hooks);
    }

    let end = *span.end();
    for i in span.clone() {
        let layer = &graph.layers[i];
        let ins: Vec<&Tensor> = layer
            .inputs
            .iter()
            .map(|n| {
                values[n.0].as_ref().ok_or_else(|| {
                    Error::State(format!("layer `{}` input node {} unavailable", layer.name, n.0))
                })
            })
            .collect::<Result<_>>()?;
        let w = hooks.weight(i).or(layer.weight.as_ref());
        let b = hooks.bias(i).or(layer.bias.as_ref());
        let y = apply(layer, &ins, w, b)?;
        let node = NodeId::of_layer(i);
        if i == end {
            // span output is kept pre-hook; downstream consumers apply the hook
            pre[node.0] = Some(y);
        } else {
            store(&mut values, &mut pre, node, y, hooks);
        }
        if !record {
            for input in &layer.inputs {
                if last_use[input.0] == i {
                    values[input.0] = None;
                    pre[input.0] = None;
                }
            }
        }
    }
    Ok(Trace {
        span,
        recorded: record,
        values,
        pre,
    })
}

fn store(values: &mut [Option<Tensor>], pre: &mut [Option<Tensor>], node: NodeId, x: Tensor, hooks: &dyn Hooks) {
    match hooks.activation(node, &x) {
        Some(q) => {
            values[node.0] = Some(q);
            pre[node.0] = Some(x);
        }
        None => values[node.0] = Some(x),
    }
}

fn conv_geom(spec: &ConvSpec, x: &Tensor, one_d: bool) -> ConvGeom {
    let s = x.shape();
    let (h, w) = if one_d { (s[1], 1) } else { (s[1], s[2]) };
    let (oh, pad_t) = spec.padding.resolve(h, spec.kernel.0, spec.stride).unwrap_or((0, 0));
    let (ow, pad_l) = if one_d {
        (1, 0)
    } else {
        spec.padding.resolve(w, spec.kernel.1, spec.stride).unwrap_or((0, 0))
    };
    ConvGeom {
        h,
        w,
        cin: spec.in_channels,
        oh,
        ow,
        cout: spec.out_channels,
        kh: spec.kernel.0,
        kw: if one_d { 1 } else { spec.kernel.1 },
        stride: spec.stride,
        pad_t,
        pad_l,
    }
}

fn pool_geom(spec: &PoolSpec, x: &Tensor) -> PoolGeom {
    let s = x.shape();
    let (h, w, c) = if s.len() == 3 { (s[1], 1, s[2]) } else { (s[1], s[2], s[3]) };
    let kw = if s.len() == 3 { 1 } else { spec.kernel.1 };
    PoolGeom {
        h,
        w,
        c,
        oh: (h - spec.kernel.0) / spec.stride + 1,
        ow: (w - kw) / spec.stride + 1,
        kh: spec.kernel.0,
        kw,
        stride: spec.stride,
    }
}

fn expect_shape(layer: &Layer, x: &Tensor, rank: usize) -> Result<()> {
    if x.rank() != rank {
        return Err(Error::structural(
            &layer.name,
            format!("expected rank-{rank} batch input, got {:?}", x.shape()),
        ));
    }
    Ok(())
}

fn check_conv_input(layer: &Layer, spec: &ConvSpec, x: &Tensor, one_d: bool) -> Result<()> {
    expect_shape(layer, x, if one_d { 3 } else { 4 })?;
    if x.channels() != spec.in_channels {
        return Err(Error::structural(
            &layer.name,
            format!("expected {} channels, got {:?}", spec.in_channels, x.shape()),
        ));
    }
    let h = x.shape()[1];
    let w = if one_d { 1 } else { x.shape()[2] };
    let kw = if one_d { 1 } else { spec.kernel.1 };
    if spec.padding.resolve(h, spec.kernel.0, spec.stride).is_none()
        || spec.padding.resolve(w, kw, spec.stride).is_none()
    {
        return Err(Error::structural(&layer.name, "kernel larger than input"));
    }
    Ok(())
}

fn weight_of<'a>(layer: &Layer, w: Option<&'a Tensor>) -> Result<&'a Tensor> {
    let w = w.ok_or_else(|| Error::structural(&layer.name, "missing weight"))?;
    if let Some(expected) = layer.op.weight_shape() {
        if w.shape() != expected.as_slice() {
            return Err(Error::structural(
                &layer.name,
                format!("weight shape {:?}, expected {expected:?}", w.shape()),
            ));
        }
    }
    Ok(w)
}

/// Forward pass of a single layer on batched inputs.
pub fn apply(layer: &Layer, ins: &[&Tensor], w: Option<&Tensor>, b: Option<&Tensor>) -> Result<Tensor> {
    let x = ins[0];
    let n = x.batch();
    let bias = b.map(Tensor::data);
    match &layer.op {
        Op::Conv2d(spec) | Op::Conv1d(spec) => {
            let one_d = matches!(layer.op, Op::Conv1d(_));
            check_conv_input(layer, spec, x, one_d)?;
            let w = weight_of(layer, w)?;
            let g = conv_geom(spec, x, one_d);
            let y = kernels::conv2d_forward(x.data(), n, w.data(), bias, &g);
            let shape = if one_d { vec![n, g.oh, g.cout] } else { vec![n, g.oh, g.ow, g.cout] };
            Tensor::new(shape, y)
        }
        Op::DepthwiseConv2d(spec) => {
            check_conv_input(layer, spec, x, false)?;
            let w = weight_of(layer, w)?;
            let g = conv_geom(spec, x, false);
            let y = kernels::depthwise_forward(x.data(), n, w.data(), bias, &g);
            Tensor::new(vec![n, g.oh, g.ow, g.cout], y)
        }
        Op::Dense { in_features, out_features } => {
            expect_shape(layer, x, 2)?;
            if x.shape()[1] != *in_features {
                return Err(Error::structural(
                    &layer.name,
                    format!("expected {in_features} features, got {:?}", x.shape()),
                ));
            }
            let w = weight_of(layer, w)?;
            let y = kernels::dense_forward(x.data(), n, w.data(), bias, *in_features, *out_features);
            Tensor::new(vec![n, *out_features], y)
        }
        Op::AvgPool(spec) | Op::MaxPool(spec) => {
            if x.rank() != 3 && x.rank() != 4 {
                return Err(Error::structural(&layer.name, "pooling needs a spatial input"));
            }
            let kw = if x.rank() == 3 { 1 } else { spec.kernel.1 };
            let w_in = if x.rank() == 3 { 1 } else { x.shape()[2] };
            if x.shape()[1] < spec.kernel.0 || w_in < kw {
                return Err(Error::structural(&layer.name, "pool window larger than input"));
            }
            let g = pool_geom(spec, x);
            let y = if matches!(layer.op, Op::AvgPool(_)) {
                kernels::avgpool_forward(x.data(), n, &g)
            } else {
                kernels::maxpool_forward(x.data(), n, &g)
            };
            let shape = if x.rank() == 3 { vec![n, g.oh, g.c] } else { vec![n, g.oh, g.ow, g.c] };
            Tensor::new(shape, y)
        }
        Op::Relu => Ok(x.map(|v| v.max(0.0))),
        Op::BatchNorm(bn) => {
            if x.channels() != bn.gamma.len() {
                return Err(Error::structural(&layer.name, "batchnorm channel count mismatch"));
            }
            let (scale, shift) = bn.affine();
            let c = scale.len();
            let mut y = x.clone();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v = *v * scale[i % c] + shift[i % c];
            }
            Ok(y)
        }
        Op::Add => {
            let other = ins.get(1).ok_or_else(|| Error::structural(&layer.name, "add needs two inputs"))?;
            if x.shape() != other.shape() {
                return Err(Error::structural(
                    &layer.name,
                    format!("add operands differ: {:?} vs {:?}", x.shape(), other.shape()),
                ));
            }
            let mut y = x.clone();
            y.add_assign(other);
            Ok(y)
        }
        Op::Flatten => {
            let item = x.item_len();
            x.clone().reshape(vec![n, item])
        }
    }
}

/// Which gradients to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wrt {
    pub inputs: bool,
    pub weights: bool,
    pub biases: bool,
}

impl Wrt {
    pub const ALL: Wrt = Wrt {
        inputs: true,
        weights: true,
        biases: true,
    };
    pub const WEIGHTS: Wrt = Wrt {
        inputs: false,
        weights: true,
        biases: false,
    };
    pub const BIASES: Wrt = Wrt {
        inputs: false,
        weights: false,
        biases: true,
    };
    pub const INPUTS: Wrt = Wrt {
        inputs: true,
        weights: false,
        biases: false,
    };
}

#[derive(Debug, Clone, Default)]
pub struct Gradients {
    /// Gradient wrt the post-hook value of each node that received one.
    pub nodes: Vec<Option<Tensor>>,
    /// Gradient wrt the pre-hook values supplied for the span's external inputs.
    pub inputs: BTreeMap<NodeId, Tensor>,
    /// Gradient wrt the effective weight of each layer in the span.
    pub weights: Vec<Option<Tensor>>,
    pub biases: Vec<Option<Tensor>>,
}

/// Reverse-mode gradients of a scalar loss whose gradient wrt the span output
/// (pre-hook) is `upstream`. Requires a recorded trace of the same graph.
pub fn backward(graph: &Graph, trace: &Trace, upstream: &Tensor, wrt: Wrt, hooks: &dyn Hooks) -> Result<Gradients> {
    if !trace.recorded {
        return Err(Error::State(
            "backward requires a forward pass with recording enabled".into(),
        ));
    }
    let span = trace.span();
    let out = trace.output();
    if out.shape() != upstream.shape() {
        return Err(Error::Shape {
            expected: out.shape().to_vec(),
            got: upstream.shape().to_vec(),
        });
    }
    let n_nodes = graph.num_nodes();
    let mut grads: Vec<Option<Tensor>> = vec![None; n_nodes];
    let mut weights = vec![None; graph.layers.len()];
    let mut biases = vec![None; graph.layers.len()];
    let end = *span.end();
    let first_node = NodeId::of_layer(*span.start());

    for i in span.clone().rev() {
        let layer = &graph.layers[i];
        let node = NodeId::of_layer(i);
        let gy = if i == end {
            upstream.clone()
        } else {
            match grads[node.0].as_ref() {
                None => continue,
                Some(g_post) => match trace.pre.get(node.0).and_then(Option::as_ref) {
                    Some(pre) => hooks
                        .activation_grad(node, pre, g_post)
                        .unwrap_or_else(|| g_post.clone()),
                    None => g_post.clone(),
                },
            }
        };
        let ins: Vec<&Tensor> = layer
            .inputs
            .iter()
            .map(|n| {
                trace
                    .value(*n)
                    .ok_or_else(|| Error::State(format!("node {} not recorded", n.0)))
            })
            .collect::<Result<_>>()?;
        let need_x = wrt.inputs || layer.inputs.iter().any(|n| *n >= first_node);
        let w = hooks.weight(i).or(layer.weight.as_ref());
        let lg = layer_backward(layer, &ins, w, &gy, need_x, wrt.weights)?;
        for (input, g) in layer.inputs.iter().zip(lg.inputs) {
            if let Some(g) = g {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        if wrt.weights {
            weights[i] = lg.weight;
        }
        if wrt.biases && layer.op.is_weighted() {
            biases[i] = lg.bias;
        }
    }

    let mut inputs = BTreeMap::new();
    if wrt.inputs {
        for node in span_inputs(graph, &span) {
            if let Some(g_post) = &grads[node.0] {
                let g = match trace.pre.get(node.0).and_then(Option::as_ref) {
                    Some(pre) => hooks
                        .activation_grad(node, pre, g_post)
                        .unwrap_or_else(|| g_post.clone()),
                    None => g_post.clone(),
                };
                inputs.insert(node, g);
            }
        }
    }
    Ok(Gradients {
        nodes: grads,
        inputs,
        weights,
        biases,
    })
}

struct LayerGrads {
    inputs: Vec<Option<Tensor>>,
    weight: Option<Tensor>,
    bias: Option<Tensor>,
}

fn layer_backward(
    layer: &Layer,
    ins: &[&Tensor],
    w: Option<&Tensor>,
    gy: &Tensor,
    need_x: bool,
    need_w: bool,
) -> Result<LayerGrads> {
    let x = ins[0];
    let n = x.batch();
    let wrap = |v: Option<Vec<f64>>, shape: &[usize]| -> Result<Option<Tensor>> {
        v.map(|d| Tensor::new(shape.to_vec(), d)).transpose()
    };
    match &layer.op {
        Op::Conv2d(spec) | Op::Conv1d(spec) | Op::DepthwiseConv2d(spec) => {
            let w = weight_of(layer, w)?;
            let one_d = matches!(layer.op, Op::Conv1d(_));
            let g = conv_geom(spec, x, one_d);
            let (gx, gw, gb) = if matches!(layer.op, Op::DepthwiseConv2d(_)) {
                kernels::depthwise_backward(x.data(), n, w.data(), gy.data(), &g, need_x, need_w)
            } else {
                kernels::conv2d_backward(x.data(), n, w.data(), gy.data(), &g, need_x, need_w)
            };
            Ok(LayerGrads {
                inputs: vec![wrap(gx, x.shape())?],
                weight: wrap(gw, w.shape())?,
                bias: Some(Tensor::from_vec(gb)),
            })
        }
        Op::Dense { in_features, out_features } => {
            let w = weight_of(layer, w)?;
            let (gx, gw, gb) = kernels::dense_backward(
                x.data(),
                n,
                w.data(),
                gy.data(),
                *in_features,
                *out_features,
                need_x,
                need_w,
            );
            Ok(LayerGrads {
                inputs: vec![wrap(gx, x.shape())?],
                weight: wrap(gw, w.shape())?,
                bias: Some(Tensor::from_vec(gb)),
            })
        }
        Op::AvgPool(spec) | Op::MaxPool(spec) => {
            let g = pool_geom(spec, x);
            let gx = if matches!(layer.op, Op::AvgPool(_)) {
                kernels::avgpool_backward(gy.data(), n, &g)
            } else {
                kernels::maxpool_backward(x.data(), gy.data(), n, &g)
            };
            Ok(LayerGrads {
                inputs: vec![Some(Tensor::new(x.shape().to_vec(), gx)?)],
                weight: None,
                bias: None,
            })
        }
        Op::Relu => {
            let mut gx = gy.clone();
            for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
            Ok(LayerGrads {
                inputs: vec![Some(gx)],
                weight: None,
                bias: None,
            })
        }
        Op::BatchNorm(bn) => {
            let (scale, _) = bn.affine();
            let c = scale.len();
            let mut gx = gy.clone();
            for (i, g) in gx.data_mut().iter_mut().enumerate() {
                *g *= scale[i % c];
            }
            Ok(LayerGrads {
                inputs: vec![Some(gx)],
                weight: None,
                bias: None,
            })
        }
        Op::Add => Ok(LayerGrads {
            inputs: vec![Some(gy.clone()), Some(gy.clone())],
            weight: None,
            bias: None,
        }),
        Op::Flatten => Ok(LayerGrads {
            inputs: vec![Some(gy.clone().reshape(x.shape().to_vec())?)],
            weight: None,
            bias: None,
        }),
    }
}
