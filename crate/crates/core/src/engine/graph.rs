use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::ops::RangeInclusive;

/// Identifies a value in the graph: node 0 is the graph input, node `i + 1`
/// is the output of layer `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const INPUT: NodeId = NodeId(0);

    pub fn of_layer(layer: usize) -> NodeId {
        NodeId(layer + 1)
    }

    /// The producing layer, or `None` for the graph input.
    pub fn layer(self) -> Option<usize> {
        self.0.checked_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    /// Output extent and leading pad for one spatial axis (TF-style `same`).
    pub fn resolve(self, input: usize, kernel: usize, stride: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Valid => {
                if input < kernel {
                    None
                } else {
                    Some(((input - kernel) / stride + 1, 0))
                }
            }
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(input);
                Some((out, total / 2))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    /// (height, width); conv1d uses (k, 1).
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
}

/// Inference-mode batch normalization over the last axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(channels: usize, eps: f64) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    /// Per-channel (scale, shift) so that `bn(x) = scale * x + shift`.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Conv2d(ConvSpec),
    DepthwiseConv2d(ConvSpec),
    Conv1d(ConvSpec),
    Dense { in_features: usize, out_features: usize },
    AvgPool(PoolSpec),
    MaxPool(PoolSpec),
    Relu,
    BatchNorm(BatchNorm),
    Add,
    Flatten,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv2d(_) => "conv2d",
            Op::DepthwiseConv2d(_) => "dwconv2d",
            Op::Conv1d(_) => "conv1d",
            Op::Dense { .. } => "fc",
            Op::AvgPool(_) => "avgpool",
            Op::MaxPool(_) => "maxpool",
            Op::Relu => "relu",
            Op::BatchNorm(_) => "batchnorm",
            Op::Add => "add",
            Op::Flatten => "flatten",
        }
    }

    /// Layers carrying a weight tensor (the ones that get quantized and optimized).
    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            Op::Conv2d(_) | Op::DepthwiseConv2d(_) | Op::Conv1d(_) | Op::Dense { .. }
        )
    }

    /// Expected weight shape for weighted layers.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            Op::Conv2d(c) => Some(vec![c.kernel.0, c.kernel.1, c.in_channels, c.out_channels]),
            Op::DepthwiseConv2d(c) => Some(vec![c.kernel.0, c.kernel.1, c.in_channels]),
            Op::Conv1d(c) => Some(vec![c.kernel.0, c.in_channels, c.out_channels]),
            Op::Dense {
                in_features,
                out_features,
            } => Some(vec![*in_features, *out_features]),
            _ => None,
        }
    }

    pub fn out_channels(&self) -> Option<usize> {
        match self {
            Op::Conv2d(c) | Op::DepthwiseConv2d(c) | Op::Conv1d(c) => Some(c.out_channels),
            Op::Dense { out_features, .. } => Some(*out_features),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl Layer {
    pub fn new(name: impl Into<String>, op: Op, inputs: Vec<NodeId>) -> Self {
        Self {
            name: name.into(),
            op,
            inputs,
            weight: None,
            bias: None,
        }
    }
}

/// A named, contiguous range of layers optimized jointly in blockwise mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub first: usize,
    pub last: usize,
}

impl Block {
    pub fn range(&self) -> RangeInclusive<usize> {
        self.first..=self.last
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub name: String,
    /// Per-sample input shape (no batch axis).
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub blocks: Vec<Block>,
}

impl Graph {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            input_shape,
            layers: Vec::new(),
            blocks: Vec::new(),
        }
    }

    /// Appends a layer and returns the node holding its output.
    pub fn push(&mut self, layer: Layer) -> NodeId {
        self.layers.push(layer);
        NodeId(self.layers.len())
    }

    pub fn num_nodes(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn output_node(&self) -> NodeId {
        NodeId(self.layers.len())
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Layers consuming each node, in execution order.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_nodes()];
        for (i, layer) in self.layers.iter().enumerate() {
            for input in &layer.inputs {
                out[input.0].push(i);
            }
        }
        out
    }

    pub fn weighted_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].op.is_weighted())
            .collect()
    }

    /// Nodes whose values feed a weighted layer; these carry activation quantizers.
    pub fn quantized_activation_nodes(&self) -> Vec<NodeId> {
        let mut nodes: Vec<NodeId> = self
            .layers
            .iter()
            .filter(|l| l.op.is_weighted())
            .flat_map(|l| l.inputs.iter().copied())
            .collect();
        nodes.sort();
        nodes.dedup();
        nodes
    }

    /// Per-sample shapes of every node, validating the whole graph.
    pub fn node_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.num_nodes());
        shapes.push(self.input_shape.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.inputs.is_empty() {
                return Err(Error::structural(&layer.name, "layer has no inputs"));
            }
            for input in &layer.inputs {
                if input.0 > i {
                    return Err(Error::structural(
                        &layer.name,
                        format!("input node {} does not precede the layer", input.0),
                    ));
                }
            }
            let ins: Vec<&[usize]> = layer.inputs.iter().map(|n| shapes[n.0].as_slice()).collect();
            let out = infer_shape(layer, &ins)?;
            check_params(layer)?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.node_shapes()?.pop().unwrap_or_default())
    }

    /// Checks structure, parameter shapes and the block partition.
    pub fn validate(&self) -> Result<()> {
        self.node_shapes()?;
        let mut owner = vec![None; self.layers.len()];
        for (b, block) in self.blocks.iter().enumerate() {
            if block.first > block.last || block.last >= self.layers.len() {
                return Err(Error::structural(&block.name, "block range out of bounds"));
            }
            for i in block.range() {
                if owner[i].is_some() {
                    return Err(Error::structural(&block.name, "blocks overlap"));
                }
                owner[i] = Some(b);
            }
        }
        if !self.blocks.is_empty() {
            for i in self.weighted_layers() {
                if owner[i].is_none() {
                    return Err(Error::structural(
                        &self.layers[i].name,
                        "weighted layer is not covered by any block",
                    ));
                }
            }
        }
        Ok(())
    }
}

fn spatial(layer: &Layer, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w, c] => Ok((*h, *w, *c)),
        [l, c] => Ok((*l, 1, *c)),
        _ => Err(Error::structural(
            &layer.name,
            format!("expected a spatial input, got shape {shape:?}"),
        )),
    }
}

fn conv_out(layer: &Layer, spec: &ConvSpec, shape: &[usize], one_d: bool) -> Result<Vec<usize>> {
    if spec.stride == 0 || spec.kernel.0 == 0 || spec.kernel.1 == 0 {
        return Err(Error::structural(&layer.name, "stride and kernel must be >= 1"));
    }
    let expected_rank = if one_d { 2 } else { 3 };
    if shape.len() != expected_rank {
        return Err(Error::structural(
            &layer.name,
            format!("expected rank-{expected_rank} input, got {shape:?}"),
        ));
    }
    let (h, w, c) = spatial(layer, shape)?;
    if c != spec.in_channels {
        return Err(Error::structural(
            &layer.name,
            format!("expected {} input channels, got {c}", spec.in_channels),
        ));
    }
    let (oh, _) = spec
        .padding
        .resolve(h, spec.kernel.0, spec.stride)
        .ok_or_else(|| Error::structural(&layer.name, "kernel larger than input"))?;
    if one_d {
        return Ok(vec![oh, spec.out_channels]);
    }
    let (ow, _) = spec
        .padding
        .resolve(w, spec.kernel.1, spec.stride)
        .ok_or_else(|| Error::structural(&layer.name, "kernel larger than input"))?;
    Ok(vec![oh, ow, spec.out_channels])
}

fn infer_shape(layer: &Layer, ins: &[&[usize]]) -> Result<Vec<usize>> {
    let arity = if matches!(layer.op, Op::Add) { 2 } else { 1 };
    if ins.len() != arity {
        return Err(Error::structural(
            &layer.name,
            format!("expected {arity} inputs, got {}", ins.len()),
        ));
    }
    let x = ins[0];
    match &layer.op {
        Op::Conv2d(spec) => conv_out(layer, spec, x, false),
        Op::Conv1d(spec) => conv_out(layer, spec, x, true),
        Op::DepthwiseConv2d(spec) => {
            if spec.in_channels != spec.out_channels {
                return Err(Error::structural(
                    &layer.name,
                    "depthwise conv must keep the channel count",
                ));
            }
            conv_out(layer, spec, x, false)
        }
        Op::Dense { in_features, out_features } => {
            if x != [*in_features] {
                return Err(Error::structural(
                    &layer.name,
                    format!("expected input [{in_features}], got {x:?}"),
                ));
            }
            Ok(vec![*out_features])
        }
        Op::AvgPool(p) | Op::MaxPool(p) => {
            if p.stride == 0 || p.kernel.0 == 0 || p.kernel.1 == 0 {
                return Err(Error::structural(&layer.name, "stride and kernel must be >= 1"));
            }
            let (h, w, c) = spatial(layer, x)?;
            if h < p.kernel.0 || w < p.kernel.1 {
                return Err(Error::structural(&layer.name, "pool window larger than input"));
            }
            let oh = (h - p.kernel.0) / p.stride + 1;
            let ow = (w - p.kernel.1) / p.stride + 1;
            Ok(if x.len() == 2 { vec![oh, c] } else { vec![oh, ow, c] })
        }
        Op::Relu => Ok(x.to_vec()),
        Op::BatchNorm(bn) => {
            let c = x.last().copied().unwrap_or(0);
            if bn.gamma.len() != c || bn.beta.len() != c || bn.mean.len() != c || bn.var.len() != c {
                return Err(Error::structural(&layer.name, "batchnorm channel count mismatch"));
            }
            Ok(x.to_vec())
        }
        Op::Add => {
            if ins[0] != ins[1] {
                return Err(Error::structural(
                    &layer.name,
                    format!("add operands differ: {:?} vs {:?}", ins[0], ins[1]),
                ));
            }
            Ok(x.to_vec())
        }
        Op::Flatten => Ok(vec![x.iter().product()]),
    }
}

fn check_params(layer: &Layer) -> Result<()> {
    if let Some(expected) = layer.op.weight_shape() {
        let w = layer
            .weight
            .as_ref()
            .ok_or_else(|| Error::structural(&layer.name, "missing weight"))?;
        if w.shape() != expected.as_slice() {
            return Err(Error::structural(
                &layer.name,
                format!("weight shape {:?}, expected {expected:?}", w.shape()),
            ));
        }
        if let Some(b) = &layer.bias {
            let c = layer.op.out_channels().unwrap_or(0);
            if b.shape() != [c] {
                return Err(Error::structural(
                    &layer.name,
                    format!("bias shape {:?}, expected [{c}]", b.shape()),
                ));
            }
        }
    }
    Ok(())
}
