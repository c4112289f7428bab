#![allow(dead_code)]
pub mod quant_props;
pub mod gradcheck;
pub mod preservation;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tinyptq_core::engine::{Block, ConvSpec, Graph, Layer, NodeId, Op, Padding};
use tinyptq_core::models::randomize;
use tinyptq_core::Tensor;

pub fn normal_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| n.sample(&mut rng)).collect()).unwrap()
}

pub fn conv_spec(k: usize, cin: usize, cout: usize, stride: usize) -> ConvSpec {
    ConvSpec {
        kernel: (k, k),
        stride,
        padding: Padding::Same,
        in_channels: cin,
        out_channels: cout,
    }
}

fn weighted(name: &str, op: Op, input: NodeId) -> Layer {
    let mut l = Layer::new(name, op.clone(), vec![input]);
    l.weight = Some(Tensor::zeros(&op.weight_shape().unwrap()));
    l.bias = Some(Tensor::zeros(&[op.out_channels().unwrap()]));
    l
}

/// conv3x3 -> relu -> conv3x3 -> relu -> avgpool -> flatten -> fc, 8x8x3 input.
pub fn three_layer_net(seed: u64) -> Graph {
    let mut g = Graph::new("tiny", vec![8, 8, 3]);
    let x = g.push(weighted("conv1", Op::Conv2d(conv_spec(3, 3, 6, 1)), NodeId::INPUT));
    let x = g.push(Layer::new("relu1", Op::Relu, vec![x]));
    let x = g.push(weighted("conv2", Op::Conv2d(conv_spec(3, 6, 8, 2)), x));
    let x = g.push(Layer::new("relu2", Op::Relu, vec![x]));
    let x = g.push(Layer::new(
        "pool",
        Op::AvgPool(tinyptq_core::engine::PoolSpec { kernel: (4, 4), stride: 4 }),
        vec![x],
    ));
    let x = g.push(Layer::new("flatten", Op::Flatten, vec![x]));
    g.push(weighted(
        "fc",
        Op::Dense {
            in_features: 8,
            out_features: 5,
        },
        x,
    ));
    g.blocks = vec![
        Block { name: "b1".into(), first: 0, last: 1 },
        Block { name: "b2".into(), first: 2, last: 3 },
        Block { name: "head".into(), first: 4, last: 6 },
    ];
    randomize(&mut g, seed);
    g.validate().unwrap();
    g
}

/// A single fully connected layer.
pub fn fc_net(inputs: usize, outputs: usize, seed: u64) -> Graph {
    let mut g = Graph::new("fc", vec![inputs]);
    g.push(weighted(
        "fc",
        Op::Dense {
            in_features: inputs,
            out_features: outputs,
        },
        NodeId::INPUT,
    ));
    g.blocks = vec![Block { name: "fc".into(), first: 0, last: 0 }];
    randomize(&mut g, seed);
    g
}

pub fn rel_l2(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    diff.sqrt() / b.l2_norm().max(1e-300)
}
