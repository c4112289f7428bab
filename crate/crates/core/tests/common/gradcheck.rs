//! Central finite-difference oracles for the engine backward pass and the
//! gradient surrogates of the reconstruction strategies. Shared by the
//! gradient tests and the acceptance sweep.

use super::{conv_spec, normal_tensor};
use tinyptq_core::engine::{backward, forward, BatchNorm, ConvSpec, Graph, Layer, NodeId, NoHooks, Op, Padding, PoolSpec, Wrt};
use tinyptq_core::models::randomize;
use tinyptq_core::quant::{
    adaround_reg, adaround_reg_grad, init_minmax, lsq_grad_scale, lsq_scale_grad, lsq_zero_point_grad, softround_grad,
    ste_weight_grad, QuantSpec, QuantizerState, RoundingVars,
};
use tinyptq_core::Tensor;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|)` over whole gradient vectors.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` around `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn weighted(name: &str, op: Op, inputs: Vec<NodeId>) -> Layer {
    let mut l = Layer::new(name, op.clone(), inputs);
    l.weight = Some(Tensor::zeros(&op.weight_shape().unwrap()));
    l.bias = Some(Tensor::zeros(&[op.out_channels().unwrap()]));
    l
}

fn single(kind: &str, input: Vec<usize>, layer: Layer) -> (String, Graph) {
    let mut g = Graph::new(kind, input);
    g.push(layer);
    (kind.to_string(), g)
}

/// Small graphs exercising every layer kind, each with a random input.
pub fn layer_cases(seed: u64) -> Vec<(String, Graph, Tensor)> {
    let valid = ConvSpec {
        padding: Padding::Valid,
        ..conv_spec(3, 2, 3, 2)
    };
    let dw = ConvSpec {
        out_channels: 3,
        ..conv_spec(3, 3, 3, 1)
    };
    let c1 = ConvSpec {
        kernel: (3, 1),
        stride: 1,
        padding: Padding::Valid,
        in_channels: 2,
        out_channels: 4,
    };
    let pool = PoolSpec { kernel: (2, 2), stride: 2 };
    let mut cases = vec![
        single("conv2d same", vec![5, 5, 2], weighted("c", Op::Conv2d(conv_spec(3, 2, 3, 1)), vec![NodeId::INPUT])),
        single("conv2d same stride 2", vec![5, 6, 2], weighted("c", Op::Conv2d(conv_spec(3, 2, 3, 2)), vec![NodeId::INPUT])),
        single("conv2d valid stride 2", vec![6, 7, 2], weighted("c", Op::Conv2d(valid), vec![NodeId::INPUT])),
        single("conv2d 4x10 stride 2", vec![10, 12, 1], weighted("c", Op::Conv2d(ConvSpec { kernel: (4, 10), ..conv_spec(1, 1, 2, 2) }), vec![NodeId::INPUT])),
        single("dwconv2d", vec![5, 5, 3], weighted("d", Op::DepthwiseConv2d(dw.clone()), vec![NodeId::INPUT])),
        single("dwconv2d stride 2", vec![6, 6, 3], weighted("d", Op::DepthwiseConv2d(ConvSpec { stride: 2, ..dw }), vec![NodeId::INPUT])),
        single("conv1d", vec![9, 2], weighted("c", Op::Conv1d(c1), vec![NodeId::INPUT])),
        single("fc", vec![7], weighted("fc", Op::Dense { in_features: 7, out_features: 4 }, vec![NodeId::INPUT])),
        single("avgpool", vec![4, 6, 2], Layer::new("p", Op::AvgPool(pool.clone()), vec![NodeId::INPUT])),
        single("maxpool", vec![4, 6, 2], Layer::new("p", Op::MaxPool(pool), vec![NodeId::INPUT])),
        single("maxpool 1d", vec![8, 3], Layer::new("p", Op::MaxPool(PoolSpec { kernel: (2, 1), stride: 2 }), vec![NodeId::INPUT])),
        single("relu", vec![3, 4], Layer::new("r", Op::Relu, vec![NodeId::INPUT])),
        single("batchnorm", vec![3, 3, 4], Layer::new("bn", Op::BatchNorm(BatchNorm::identity(4, 1e-3)), vec![NodeId::INPUT])),
        single("flatten", vec![2, 3, 2], Layer::new("f", Op::Flatten, vec![NodeId::INPUT])),
    ];
    // add of the input and a pointwise conv of it
    let mut g = Graph::new("add", vec![4, 4, 3]);
    let y = g.push(weighted("pw", Op::Conv2d(conv_spec(1, 3, 3, 1)), vec![NodeId::INPUT]));
    g.push(Layer::new("add", Op::Add, vec![NodeId::INPUT, y]));
    cases.push(("add".into(), g));
    // two conv layers with a nonlinearity in between
    let mut g = Graph::new("net", vec![6, 6, 2]);
    let y = g.push(weighted("c1", Op::Conv2d(conv_spec(3, 2, 4, 1)), vec![NodeId::INPUT]));
    let y = g.push(Layer::new("r", Op::Relu, vec![y]));
    g.push(weighted("c2", Op::Conv2d(conv_spec(3, 4, 3, 2)), vec![y]));
    cases.push(("conv-relu-conv".into(), g));

    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, mut g))| {
            randomize(&mut g, seed + i as u64);
            g.validate().unwrap();
            let mut shape = vec![2];
            shape.extend(&g.input_shape);
            let mut x = normal_tensor(&shape, seed + 100 + i as u64);
            if name.starts_with("maxpool") || name == "relu" {
                // keep values away from ties and the ReLU kink
                spread(&mut x);
            }
            (name, g, x)
        })
        .collect()
}

/// Replaces values by a shuffled ladder with gaps well above the FD step.
fn spread(x: &mut Tensor) {
    let n = x.numel();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x.data()[a].total_cmp(&x.data()[b]));
    let data = x.data_mut();
    for (rank, &i) in order.iter().enumerate() {
        data[i] = (rank as f64 - n as f64 / 2.0 + 0.5) * 0.1;
    }
}

fn weighted_loss(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error of input, weight and bias gradients of
/// `sum(r * forward(g, x))` against central differences.
pub fn check_graph(g: &Graph, x: &Tensor, seed: u64) -> f64 {
    let trace = forward(g, x, true).unwrap();
    let r = normal_tensor(trace.output().shape(), seed);
    let grads = backward(g, &trace, &r, Wrt::ALL, &NoHooks).unwrap();
    let loss_of = |g: &Graph, x: &Tensor| weighted_loss(&forward(g, x, false).unwrap().into_output(), &r);

    let mut worst = 0.0f64;
    let gx = &grads.inputs[&NodeId::INPUT];
    let num = numeric_grad(x.data(), |v| loss_of(g, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap()));
    worst = worst.max(rel_err(gx.data(), &num));
    for (i, layer) in g.layers.iter().enumerate() {
        for (param, analytic) in [(&layer.weight, &grads.weights[i]), (&layer.bias, &grads.biases[i])] {
            let Some(p) = param else { continue };
            let analytic = analytic.as_ref().expect("gradient for every parameter");
            let is_weight = std::ptr::eq(param, &layer.weight);
            let num = numeric_grad(p.data(), |v| {
                let mut h = g.clone();
                let t = Tensor::new(p.shape().to_vec(), v.to_vec()).unwrap();
                if is_weight {
                    h.layers[i].weight = Some(t);
                } else {
                    h.layers[i].bias = Some(t);
                }
                loss_of(&h, x)
            });
            worst = worst.max(rel_err(analytic.data(), &num));
        }
    }
    worst
}

/// A conv layer with a 4-bit per-channel weight quantizer, an input batch and
/// the weighted-sum loss used by the surrogate checks.
pub struct SurrogateCase {
    pub graph: Graph,
    pub x: Tensor,
    pub r: Tensor,
    pub q: QuantizerState,
}

impl SurrogateCase {
    pub fn new(seed: u64) -> Self {
        Self::with_spec(seed, QuantSpec::weight(4, 4))
    }

    /// Same layer with an asymmetric per-tensor quantizer (nonzero zero point),
    /// as used for activations.
    pub fn asymmetric(seed: u64) -> Self {
        Self::with_spec(seed, QuantSpec::activation(4))
    }

    fn with_spec(seed: u64, spec: QuantSpec) -> Self {
        let mut g = Graph::new("sur", vec![5, 5, 3]);
        g.push(weighted("c", Op::Conv2d(conv_spec(3, 3, 4, 1)), vec![NodeId::INPUT]));
        randomize(&mut g, seed);
        let w = g.layers[0].weight.clone().unwrap();
        // shrink the range so a few weights fall outside the grid
        let mut q = init_minmax(std::slice::from_ref(&w), &spec).unwrap();
        for p in &mut q.params {
            p.scale *= 0.8;
        }
        let x = normal_tensor(&[2, 5, 5, 3], seed + 1);
        let r = normal_tensor(&[2, 5, 5, 4], seed + 2);
        Self { graph: g, x, r, q }
    }

    pub fn weight(&self) -> &Tensor {
        self.graph.layers[0].weight.as_ref().unwrap()
    }

    /// Loss with the layer weight replaced by `w`.
    pub fn loss(&self, w: &Tensor) -> f64 {
        let mut g = self.graph.clone();
        g.layers[0].weight = Some(w.clone());
        weighted_loss(&forward(&g, &self.x, false).unwrap().into_output(), &self.r)
    }

    /// Gradient of the loss wrt the layer weight, evaluated at weight `w`.
    pub fn weight_grad(&self, w: &Tensor) -> Tensor {
        let mut g = self.graph.clone();
        g.layers[0].weight = Some(w.clone());
        let trace = forward(&g, &self.x, true).unwrap();
        let grads = backward(&g, &trace, &self.r, Wrt::WEIGHTS, &NoHooks).unwrap();
        grads.weights[0].clone().unwrap()
    }

    /// Straight-through surrogate of the fake-quantized weight: the rounding
    /// residual and the clipping decision are frozen at the base point, so the
    /// remaining map is smooth in the weight, the scales and continuous zero points.
    fn surrogate_weight(&self, w: &Tensor, scales: &[f64], zeros: &[f64]) -> Tensor {
        let gi = self.q.grouping(w.shape());
        let w0 = self.weight();
        let mut out = w.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let g = &self.q.params[gi.group(i)];
            let k = gi.group(i);
            let u0 = w0.data()[i] / g.scale;
            let code0 = u0.round_ties_even() + g.zero_point as f64;
            let code = if code0 < g.qmin as f64 {
                g.qmin as f64
            } else if code0 > g.qmax as f64 {
                g.qmax as f64
            } else {
                *v / scales[k] + (u0.round_ties_even() - u0) + zeros[k]
            };
            *v = scales[k] * (code - zeros[k]);
        }
        out
    }

    fn base_qparams(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.q.params.iter().map(|p| p.scale).collect(),
            self.q.params.iter().map(|p| p.zero_point as f64).collect(),
        )
    }

    /// Learned-step-size scale and zero-point gradients (with their count
    /// scaling removed) against the frozen-residual surrogate.
    pub fn check_qparam(&self) -> f64 {
        let w = self.weight();
        let wq = self.q.quantize(w).unwrap();
        let upstream = self.weight_grad(&wq);
        let count = w.numel() / self.q.params.len();
        let unscale = 1.0 / lsq_grad_scale(count, self.q.params[0].qmax);
        let ds: Vec<f64> = lsq_scale_grad(w, &self.q, &upstream).unwrap().iter().map(|g| g * unscale).collect();
        let dz: Vec<f64> = lsq_zero_point_grad(w, &self.q, &upstream).unwrap().iter().map(|g| g * unscale).collect();
        let (s0, z0) = self.base_qparams();
        let num_s = numeric_grad(&s0, |s| self.loss(&self.surrogate_weight(w, s, &z0)));
        let num_z = numeric_grad(&z0, |z| self.loss(&self.surrogate_weight(w, &s0, z)));
        rel_err(&ds, &num_s).max(rel_err(&dz, &num_z))
    }

    /// Straight-through weight gradient against the frozen-residual surrogate.
    pub fn check_weights(&self) -> f64 {
        let w = self.weight();
        let upstream = self.weight_grad(&self.q.quantize(w).unwrap());
        let analytic = ste_weight_grad(w, &self.q, &upstream).unwrap();
        let (s0, z0) = self.base_qparams();
        let num = numeric_grad(w.data(), |v| {
            let t = Tensor::new(w.shape().to_vec(), v.to_vec()).unwrap();
            self.loss(&self.surrogate_weight(&t, &s0, &z0))
        });
        rel_err(analytic.data(), &num)
    }

    /// Gradient of the soft-rounding objective `loss + lambda * reg` wrt `V`.
    pub fn check_round(&self, beta: f64) -> f64 {
        let w = self.weight();
        let mut rv = RoundingVars::init(w, &self.q).unwrap();
        // move V off its initial saturated values
        for (i, v) in rv.v.data_mut().iter_mut().enumerate() {
            *v = 0.8 * ((i as f64) * 0.61).sin();
        }
        let objective = |rv: &RoundingVars| {
            let h = rv.soft();
            self.loss(&rv.weight_with(w, &self.q, &h).unwrap()) + rv.lambda * adaround_reg(&h, beta)
        };
        let h = rv.soft();
        let upstream = self.weight_grad(&rv.weight_with(w, &self.q, &h).unwrap());
        let mut analytic = rv.v_grad(w, &self.q, &upstream).unwrap();
        let reg = adaround_reg_grad(&h, beta);
        for (i, g) in analytic.iter_mut().enumerate() {
            *g += rv.lambda * reg[i] * softround_grad(rv.v.data()[i], rv.zeta, rv.gamma);
        }
        let v0 = rv.v.data().to_vec();
        let num = numeric_grad(&v0, |v| {
            let mut probe = rv.clone();
            probe.v.data_mut().copy_from_slice(v);
            objective(&probe)
        });
        rel_err(&analytic, &num)
    }
}

/// The bit-level objective of one channel, `s^2 q'Gq - 2 s q'r`, against the
/// engine: loss differences between two code vectors must equal differences
/// of the layer's true squared output error, and its scale derivative must
/// match central differences.
pub fn check_bits(kind: &str, seed: u64) -> f64 {
    use tinyptq_core::pipeline::bits::channel_problems;
    let (_, g, x) = layer_cases(seed)
        .into_iter()
        .find(|(name, _, _)| name == kind)
        .expect("known layer case");
    let layer = &g.layers[0];
    let w_shape = layer.weight.as_ref().unwrap().shape().to_vec();
    let channels = *w_shape.last().unwrap();
    let target = normal_tensor(forward(&g, &x, false).unwrap().output().shape(), seed + 7);
    let problems = channel_problems(&layer.op, &x, &target, layer.bias.as_ref()).unwrap();
    assert_eq!(problems.len(), channels);

    let n_w: usize = w_shape.iter().product();
    let codes_of = |salt: i64| -> Vec<i64> { (0..n_w as i64).map(|i| ((i * 7 + salt) % 15) - 7).collect() };
    let scales: Vec<f64> = (0..channels).map(|c| 0.05 + 0.01 * c as f64).collect();
    let channel_sse = |codes: &[i64]| -> Vec<f64> {
        let mut h = g.clone();
        let w: Vec<f64> = codes.iter().enumerate().map(|(i, &q)| scales[i % channels] * q as f64).collect();
        h.layers[0].weight = Some(Tensor::new(w_shape.clone(), w).unwrap());
        let y = forward(&h, &x, false).unwrap().into_output();
        let mut sse = vec![0.0; channels];
        for (i, (a, b)) in y.data().iter().zip(target.data()).enumerate() {
            sse[i % channels] += (a - b) * (a - b);
        }
        sse
    };
    let per_channel = |codes: &[i64], c: usize| -> Vec<i64> { codes.iter().skip(c).step_by(channels).copied().collect() };

    let (a, b) = (codes_of(1), codes_of(4));
    let (sse_a, sse_b) = (channel_sse(&a), channel_sse(&b));
    let mut worst = 0.0f64;
    for (c, p) in problems.iter().enumerate() {
        let (qa, qb) = (per_channel(&a, c), per_channel(&b, c));
        let quad = p.loss(&qa, scales[c]) - p.loss(&qb, scales[c]);
        let truth = sse_a[c] - sse_b[c];
        worst = worst.max((quad - truth).abs() / truth.abs().max(1e-12));

        let quad_term: f64 = (0..p.dim)
            .map(|i| qa[i] as f64 * (0..p.dim).map(|j| p.gram[i * p.dim + j] * qa[j] as f64).sum::<f64>())
            .sum();
        let lin_term: f64 = (0..p.dim).map(|i| qa[i] as f64 * p.rhs[i]).sum();
        let analytic = 2.0 * scales[c] * quad_term - 2.0 * lin_term;
        let num = numeric_grad(&[scales[c]], |s| p.loss(&qa, s[0]));
        worst = worst.max(rel_err(&[analytic], &num));
    }
    worst
}
