//! Builders for the four tinyML reference architectures.
//!
//! * `res8`: CIFAR-10 ResNet with three residual blocks (16/32/64 channels).
//! * `dscnn`: keyword-spotting depthwise-separable CNN on 10x49 MFCC features.
//! * `mobilenetv1`: width-0.25 MobileNetV1 for 96x96 visual wake words.
//! * `har_cnn`: 1-d CNN over 128x9 inertial windows.
//!
//! Residual blocks are conv3x3-BN-ReLU -> conv3x3-BN -> add -> ReLU; the
//! stride-2 variant adds a 1x1 stride-2 conv (no BN) on the skip path.
//! Depthwise-separable blocks are dw3x3-BN-ReLU -> pw1x1-BN-ReLU.

use crate::engine::{BatchNorm, Block, ConvSpec, Graph, Layer, NodeId, Op, Padding, PoolSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Named parameter tensors: `<layer>.weight`, `<layer>.bias` and
/// `<layer>.gamma|beta|mean|var` for batchnorm layers.
pub type ParamSet = BTreeMap<String, Tensor>;

pub const MODEL_NAMES: [&str; 4] = ["res8", "dscnn", "mobilenetv1", "har_cnn"];

const BN_EPS: f64 = 1e-3;

/// Builds `name` with parameters from `weights`, or seeded random parameters
/// (He-style fan-in scaling) when `weights` is `None`.
pub fn build_model(name: &str, weights: Option<&ParamSet>, seed: u64) -> Result<Graph> {
    let mut graph = match name {
        "res8" => res8(),
        "dscnn" => dscnn(),
        "mobilenetv1" => mobilenetv1(),
        "har_cnn" => har_cnn(),
        other => return Err(Error::UnknownModel(other.to_string())),
    };
    match weights {
        Some(params) => load_params(&mut graph, params)?,
        None => randomize(&mut graph, seed),
    }
    graph.validate()?;
    Ok(graph)
}

/// Number of output classes of each model.
pub fn num_classes(name: &str) -> Result<usize> {
    match name {
        "res8" => Ok(10),
        "dscnn" => Ok(12),
        "mobilenetv1" => Ok(2),
        "har_cnn" => Ok(6),
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

struct Builder {
    graph: Graph,
    channels: usize,
    block_start: usize,
}

impl Builder {
    fn new(name: &str, input_shape: Vec<usize>) -> Self {
        let channels = *input_shape.last().unwrap_or(&1);
        Self {
            graph: Graph::new(name, input_shape),
            channels,
            block_start: 0,
        }
    }

    fn layer(&mut self, name: String, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let mut l = Layer::new(name, op, inputs);
        if let Some(shape) = l.op.weight_shape() {
            l.weight = Some(Tensor::zeros(&shape));
            l.bias = Some(Tensor::zeros(&[l.op.out_channels().unwrap_or(0)]));
        }
        self.graph.push(l)
    }

    fn conv(&mut self, name: String, x: NodeId, kernel: (usize, usize), out: usize, stride: usize, bias: bool) -> NodeId {
        let spec = ConvSpec {
            kernel,
            stride,
            padding: Padding::Same,
            in_channels: self.channels,
            out_channels: out,
        };
        self.channels = out;
        let node = self.layer(name, Op::Conv2d(spec), vec![x]);
        if !bias {
            self.graph.layers.last_mut().unwrap().bias = None;
        }
        node
    }

    fn dwconv(&mut self, name: String, x: NodeId, stride: usize) -> NodeId {
        let spec = ConvSpec {
            kernel: (3, 3),
            stride,
            padding: Padding::Same,
            in_channels: self.channels,
            out_channels: self.channels,
        };
        let node = self.layer(name, Op::DepthwiseConv2d(spec), vec![x]);
        self.graph.layers.last_mut().unwrap().bias = None;
        node
    }

    fn bn(&mut self, name: String, x: NodeId) -> NodeId {
        let c = self.channels;
        self.layer(name, Op::BatchNorm(BatchNorm::identity(c, BN_EPS)), vec![x])
    }

    fn relu(&mut self, name: String, x: NodeId) -> NodeId {
        self.layer(name, Op::Relu, vec![x])
    }

    fn conv_bn_relu(&mut self, prefix: &str, x: NodeId, kernel: (usize, usize), out: usize, stride: usize) -> NodeId {
        let y = self.conv(prefix.to_string(), x, kernel, out, stride, false);
        let y = self.bn(format!("{prefix}_bn"), y);
        self.relu(format!("{prefix}_relu"), y)
    }

    fn close_block(&mut self, name: &str) {
        let last = self.graph.layers.len() - 1;
        self.graph.blocks.push(Block {
            name: name.to_string(),
            first: self.block_start,
            last,
        });
        self.block_start = last + 1;
    }

    fn resblock(&mut self, name: &str, x: NodeId, out: usize, stride: usize) -> NodeId {
        let cin = self.channels;
        let a = self.conv_bn_relu(&format!("{name}.conv_a"), x, (3, 3), out, stride);
        let b = self.conv(format!("{name}.conv_b"), a, (3, 3), out, 1, false);
        let b = self.bn(format!("{name}.conv_b_bn"), b);
        let skip = if stride != 1 || cin != out {
            self.channels = cin;
            self.conv(format!("{name}.skip"), x, (1, 1), out, stride, true)
        } else {
            x
        };
        let y = self.layer(format!("{name}.add"), Op::Add, vec![b, skip]);
        let y = self.relu(format!("{name}.relu"), y);
        self.close_block(name);
        y
    }

    fn dsconv(&mut self, name: &str, x: NodeId, out: usize, stride: usize) -> NodeId {
        let y = self.dwconv(format!("{name}.dw"), x, stride);
        let y = self.bn(format!("{name}.dw_bn"), y);
        let y = self.relu(format!("{name}.dw_relu"), y);
        let y = self.conv_bn_relu(&format!("{name}.pw"), y, (1, 1), out, 1);
        self.close_block(name);
        y
    }

    fn head(&mut self, x: NodeId, pool: (usize, usize), classes: usize) {
        let y = self.layer(
            "pool".into(),
            Op::AvgPool(PoolSpec {
                kernel: pool,
                stride: 1,
            }),
            vec![x],
        );
        let y = self.layer("flatten".into(), Op::Flatten, vec![y]);
        self.layer(
            "fc".into(),
            Op::Dense {
                in_features: self.channels,
                out_features: classes,
            },
            vec![y],
        );
        self.close_block("fc");
    }
}

fn res8() -> Graph {
    let mut b = Builder::new("res8", vec![32, 32, 3]);
    let x = b.conv_bn_relu("conv1", NodeId::INPUT, (3, 3), 16, 1);
    b.close_block("conv1");
    let x = b.resblock("block1", x, 16, 1);
    let x = b.resblock("block2", x, 32, 2);
    let x = b.resblock("block3", x, 64, 2);
    b.head(x, (8, 8), 10);
    b.graph
}

fn dscnn() -> Graph {
    let mut b = Builder::new("dscnn", vec![10, 49, 1]);
    let mut x = b.conv_bn_relu("conv1", NodeId::INPUT, (4, 10), 64, 2);
    b.close_block("conv1");
    for i in 1..=4 {
        x = b.dsconv(&format!("ds{i}"), x, 64, 1);
    }
    b.head(x, (5, 25), 12);
    b.graph
}

/// (output channels, stride) of each depthwise-separable block. The 6x6 stage
/// has five stride-1 blocks, as in the width-0.25 reference network whose
/// MAC and parameter totals are reproduced by `model_stats`.
const MOBILENET_BLOCKS: [(usize, usize); 13] = [
    (16, 1),
    (32, 2),
    (32, 1),
    (64, 2),
    (64, 1),
    (128, 2),
    (128, 1),
    (128, 1),
    (128, 1),
    (128, 1),
    (128, 1),
    (256, 2),
    (256, 1),
];

fn mobilenetv1() -> Graph {
    let mut b = Builder::new("mobilenetv1", vec![96, 96, 3]);
    let mut x = b.conv_bn_relu("conv1", NodeId::INPUT, (3, 3), 8, 2);
    b.close_block("conv1");
    for (i, (out, stride)) in MOBILENET_BLOCKS.iter().enumerate() {
        x = b.dsconv(&format!("ds{}", i + 1), x, *out, *stride);
    }
    b.head(x, (3, 3), 2);
    b.graph
}

fn har_cnn() -> Graph {
    let mut b = Builder::new("har_cnn", vec![128, 9]);
    let conv1d = |b: &mut Builder, name: &str, x: NodeId| {
        let spec = ConvSpec {
            kernel: (3, 1),
            stride: 1,
            padding: Padding::Valid,
            in_channels: b.channels,
            out_channels: 64,
        };
        b.channels = 64;
        let y = b.layer(name.to_string(), Op::Conv1d(spec), vec![x]);
        let y = b.relu(format!("{name}_relu"), y);
        b.close_block(name);
        y
    };
    let x = conv1d(&mut b, "conv1", NodeId::INPUT);
    let x = conv1d(&mut b, "conv2", x);
    let x = b.layer(
        "pool".into(),
        Op::MaxPool(PoolSpec {
            kernel: (2, 1),
            stride: 2,
        }),
        vec![x],
    );
    let x = b.layer("flatten".into(), Op::Flatten, vec![x]);
    let x = b.layer(
        "fc1".into(),
        Op::Dense {
            in_features: 62 * 64,
            out_features: 128,
        },
        vec![x],
    );
    let x = b.relu("fc1_relu".into(), x);
    b.close_block("fc1");
    b.layer(
        "fc2".into(),
        Op::Dense {
            in_features: 128,
            out_features: 6,
        },
        vec![x],
    );
    b.close_block("fc2");
    b.graph
}

fn fan_in(op: &Op) -> usize {
    match op {
        Op::Conv2d(c) => c.kernel.0 * c.kernel.1 * c.in_channels,
        Op::DepthwiseConv2d(c) => c.kernel.0 * c.kernel.1,
        Op::Conv1d(c) => c.kernel.0 * c.in_channels,
        Op::Dense { in_features, .. } => *in_features,
        _ => 1,
    }
}

/// Fills every parameter with deterministic seeded values: He-normal weights,
/// small uniform biases and mildly perturbed batchnorm statistics.
pub fn randomize(graph: &mut Graph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut graph.layers {
        let fan = fan_in(&layer.op) as f64;
        if let Some(w) = layer.weight.as_mut() {
            let normal = Normal::new(0.0, (2.0 / fan).sqrt()).expect("valid std");
            for v in w.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        if let Some(b) = layer.bias.as_mut() {
            for v in b.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        if let Op::BatchNorm(bn) = &mut layer.op {
            for i in 0..bn.gamma.len() {
                bn.gamma[i] = rng.random_range(0.5..1.5);
                bn.beta[i] = rng.random_range(-0.1..0.1);
                bn.mean[i] = rng.random_range(-0.1..0.1);
                bn.var[i] = rng.random_range(0.5..1.5);
            }
        }
    }
}

/// Collects every parameter of `graph` under its canonical name.
pub fn graph_params(graph: &Graph) -> ParamSet {
    let mut out = ParamSet::new();
    for layer in &graph.layers {
        if let Some(w) = &layer.weight {
            out.insert(format!("{}.weight", layer.name), w.clone());
        }
        if let Some(b) = &layer.bias {
            out.insert(format!("{}.bias", layer.name), b.clone());
        }
        if let Op::BatchNorm(bn) = &layer.op {
            for (key, v) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("mean", &bn.mean), ("var", &bn.var)] {
                out.insert(format!("{}.{key}", layer.name), Tensor::from_vec(v.clone()));
            }
        }
    }
    out
}

fn take(params: &ParamSet, key: &str, shape: &[usize]) -> Result<Tensor> {
    let t = params
        .get(key)
        .ok_or_else(|| Error::Config(format!("missing parameter `{key}`")))?;
    if t.shape() != shape {
        return Err(Error::Shape {
            expected: shape.to_vec(),
            got: t.shape().to_vec(),
        });
    }
    Ok(t.clone())
}

/// Overwrites the parameters of `graph` from `params`, validating shapes.
/// A weighted layer may lack a bias entry only if the graph has none either.
pub fn load_params(graph: &mut Graph, params: &ParamSet) -> Result<()> {
    for layer in &mut graph.layers {
        if let Some(shape) = layer.op.weight_shape() {
            layer.weight = Some(take(params, &format!("{}.weight", layer.name), &shape)?);
            let c = layer.op.out_channels().unwrap_or(0);
            let key = format!("{}.bias", layer.name);
            if params.contains_key(&key) || layer.bias.is_some() {
                layer.bias = Some(take(params, &key, &[c])?);
            }
        }
        if let Op::BatchNorm(bn) = &mut layer.op {
            let c = bn.gamma.len();
            bn.gamma = take(params, &format!("{}.gamma", layer.name), &[c])?.into_data();
            bn.beta = take(params, &format!("{}.beta", layer.name), &[c])?.into_data();
            bn.mean = take(params, &format!("{}.mean", layer.name), &[c])?.into_data();
            bn.var = take(params, &format!("{}.var", layer.name), &[c])?.into_data();
        }
    }
    Ok(())
}
