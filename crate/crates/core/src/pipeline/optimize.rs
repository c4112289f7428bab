//! Unit-by-unit reconstruction optimization.
//!
//! Each unit (one weighted layer, or one block) reads its inputs from the
//! quantized chain of already frozen units and is fitted to the float model's
//! output at the same point. The best checkpoint is kept and the unit frozen.

use super::adam::Adam;
use super::attach::{collect_nodes, STREAM_CHUNK};
use super::bits;
use super::config::{PipelineConfig, Strategy, UnitGranularity};
use super::qgraph::{QuantHooks, QuantizedGraph, StrategyState};
use super::{LogEntry, RunLog, UnitSummary};
use crate::engine::{backward, run_span, span_inputs, Graph, Hooks, NoHooks, NodeId, Wrt};
use crate::error::{Error, Result};
use crate::quant::{adaround_reg, adaround_reg_grad, lsq_scale_grad, lsq_zero_point_grad, softround_grad};
use crate::quant::{ste_weight_grad, RoundingVars, Scheme};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::ops::RangeInclusive;

/// A contiguous span of layers optimized together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub name: String,
    pub span: RangeInclusive<usize>,
}

impl Unit {
    pub fn layers(&self) -> impl Iterator<Item = usize> {
        self.span.clone()
    }
}

/// Units in topological order.
pub fn units(graph: &Graph, granularity: UnitGranularity) -> Vec<Unit> {
    match granularity {
        UnitGranularity::Layer => graph
            .weighted_layers()
            .into_iter()
            .map(|i| Unit {
                name: graph.layers[i].name.clone(),
                span: i..=i,
            })
            .collect(),
        UnitGranularity::Block => graph
            .blocks
            .iter()
            .filter(|b| b.range().any(|i| graph.layers[i].op.is_weighted()))
            .map(|b| Unit {
                name: b.name.clone(),
                span: b.range(),
            })
            .collect(),
    }
}

/// Calibration inputs (quantized chain) and float targets of a unit.
#[derive(Debug, Clone)]
pub struct UnitData {
    pub inputs: BTreeMap<NodeId, Tensor>,
    pub target: Tensor,
}

impl UnitData {
    pub fn len(&self) -> usize {
        self.target.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> (BTreeMap<NodeId, Tensor>, Tensor) {
        let inputs = self
            .inputs
            .iter()
            .map(|(&n, t)| (n, t.gather_batch(indices)))
            .collect();
        (inputs, self.target.gather_batch(indices))
    }

    fn slice(&self, start: usize, end: usize) -> (BTreeMap<NodeId, Tensor>, Tensor) {
        let inputs = self
            .inputs
            .iter()
            .map(|(&n, t)| (n, t.slice_batch(start, end)))
            .collect();
        (inputs, self.target.slice_batch(start, end))
    }
}

/// Gathers a unit's inputs from `qgraph` and its target from `fp`.
pub fn unit_data(qgraph: &QuantizedGraph, fp: &Graph, unit: &Unit, calib: &Tensor) -> Result<UnitData> {
    let nodes = span_inputs(&qgraph.graph, &unit.span);
    let hooks = qgraph.hooks_for(0..*unit.span.start())?;
    let inputs = collect_nodes(&qgraph.graph, &hooks, calib, &nodes)?;
    let end = NodeId::of_layer(*unit.span.end());
    let mut target = collect_nodes(fp, &NoHooks, calib, &[end])?;
    Ok(UnitData {
        inputs,
        target: target.remove(&end).expect("target node"),
    })
}

/// Mean squared error of the unit's output against its target over all of `data`.
pub fn unit_mse(graph: &Graph, unit: &Unit, data: &UnitData, hooks: &dyn Hooks) -> Result<f64> {
    let n = data.len();
    let mut sse = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + STREAM_CHUNK).min(n);
        let (inputs, target) = data.slice(start, end);
        let trace = run_span(graph, unit.span.clone(), inputs, hooks, false)?;
        sse += trace.output().mse(&target) * target.numel() as f64;
        start = end;
    }
    Ok(sse / data.target.numel().max(1) as f64)
}

/// Cyclic minibatches over a seeded permutation, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            pos: 0,
            batch: batch.clamp(1, len.max(1)),
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Unit-local hooks: weights of the unit's layers come from `weights` when
/// given, otherwise from the quantized graph.
fn unit_hooks<'a>(
    q: &'a QuantizedGraph,
    unit: &Unit,
    weights: &BTreeMap<usize, Tensor>,
) -> Result<QuantHooks<'a>> {
    let mut hooks = q.hooks_for(unit.layers().filter(|i| !weights.contains_key(i)))?;
    for (&i, w) in weights {
        hooks.weights[i] = Some(w.clone());
    }
    Ok(hooks)
}

/// Forward and backward on one minibatch. Returns the mean squared error and
/// gradients; `upstream_scale` multiplies `2 * (y - t)`.
fn unit_grads(
    graph: &Graph,
    unit: &Unit,
    hooks: &QuantHooks<'_>,
    inputs: BTreeMap<NodeId, Tensor>,
    target: &Tensor,
    upstream_scale: f64,
    wrt: Wrt,
) -> Result<(f64, crate::engine::Trace, crate::engine::Gradients)> {
    let trace = run_span(graph, unit.span.clone(), inputs, hooks, true)?;
    let y = trace.output();
    let mse = y.mse(target);
    let mut up = y.clone();
    for (u, t) in up.data_mut().iter_mut().zip(target.data()) {
        *u = 2.0 * (*u - t) * upstream_scale;
    }
    let grads = backward(graph, &trace, &up, wrt, hooks)?;
    Ok((mse, trace, grads))
}

fn weighted_quantized(q: &QuantizedGraph, unit: &Unit) -> Vec<usize> {
    unit.layers()
        .filter(|&i| q.weight_q[i].is_some() && !q.frozen[i] && q.graph.layers[i].weight.is_some())
        .collect()
}

/// Activation quantizers a unit owns: on its external inputs and on interior
/// nodes, excluding already frozen ones.
fn unit_act_nodes(q: &QuantizedGraph, unit: &Unit) -> Vec<NodeId> {
    let mut nodes = span_inputs(&q.graph, &unit.span);
    nodes.extend(unit.layers().filter(|&i| i != *unit.span.end()).map(NodeId::of_layer));
    nodes.sort();
    nodes.dedup();
    nodes
        .into_iter()
        .filter(|n| q.act_q.contains_key(n) && !q.frozen_acts.contains(n))
        .collect()
}

trait UnitStep {
    /// One update on a minibatch; returns the training loss.
    fn step(&mut self, q: &mut QuantizedGraph, inputs: BTreeMap<NodeId, Tensor>, target: &Tensor, it: usize) -> Result<f64>;
}

struct QparamStep {
    unit: Unit,
    layers: Vec<usize>,
    acts: Vec<NodeId>,
    /// Continuous zero points of the activation quantizers.
    zero: Vec<f64>,
    opt: Adam,
}

impl QparamStep {
    fn new(q: &QuantizedGraph, unit: &Unit, lr: f64) -> Self {
        let layers = weighted_quantized(q, unit);
        let acts = unit_act_nodes(q, unit);
        let zero: Vec<f64> = acts.iter().map(|n| q.act_q[n].params[0].zero_point as f64).collect();
        let len = layers.iter().map(|&i| q.weight_q[i].as_ref().map_or(0, |s| s.params.len())).sum::<usize>()
            + 2 * acts.len();
        Self {
            unit: unit.clone(),
            layers,
            acts,
            zero,
            opt: Adam::new(lr, len),
        }
    }

    fn is_empty(&self) -> bool {
        self.layers.is_empty() && self.acts.is_empty()
    }
}

impl UnitStep for QparamStep {
    fn step(&mut self, q: &mut QuantizedGraph, inputs: BTreeMap<NodeId, Tensor>, target: &Tensor, _it: usize) -> Result<f64> {
        let numel = target.numel() as f64;
        let hooks = unit_hooks(q, &self.unit, &BTreeMap::new())?;
        let wrt = Wrt {
            inputs: true,
            weights: true,
            biases: false,
        };
        let (mse, trace, grads) = unit_grads(&q.graph, &self.unit, &hooks, inputs, target, 1.0 / numel, wrt)?;
        drop(hooks);

        let mut params = Vec::new();
        let mut g = Vec::new();
        for &i in &self.layers {
            let wq = q.weight_q[i].as_ref().expect("quantized layer");
            let w = q.graph.layers[i].weight.as_ref().expect("weighted layer");
            let gw = grads.weights[i].as_ref().ok_or_else(|| Error::State("missing weight gradient".into()))?;
            params.extend(wq.scales());
            g.extend(lsq_scale_grad(w, wq, gw)?);
        }
        for (k, node) in self.acts.iter().enumerate() {
            let aq = &q.act_q[node];
            params.push(aq.params[0].scale);
            params.push(self.zero[k]);
            match (trace.pre_value(*node), grads.nodes.get(node.0).and_then(Option::as_ref)) {
                (Some(x), Some(gy)) => {
                    g.push(lsq_scale_grad(x, aq, gy)?[0]);
                    g.push(lsq_zero_point_grad(x, aq, gy)?[0]);
                }
                _ => g.extend([0.0, 0.0]),
            }
        }
        self.opt.step(&mut params, &g);

        let mut it = params.into_iter();
        for &i in &self.layers {
            let wq = q.weight_q[i].as_mut().expect("quantized layer");
            for p in &mut wq.params {
                p.scale = it.next().expect("scale").max(f64::MIN_POSITIVE.sqrt());
            }
        }
        for (k, node) in self.acts.iter().enumerate() {
            let aq = q.act_q.get_mut(node).expect("activation quantizer");
            let p = &mut aq.params[0];
            p.scale = it.next().expect("scale").max(f64::MIN_POSITIVE.sqrt());
            let z = it.next().expect("zero point").clamp(p.qmin as f64, p.qmax as f64);
            self.zero[k] = z;
            if aq.spec.scheme == Scheme::Asymmetric {
                p.zero_point = z.round_ties_even() as i64;
            }
        }
        Ok(mse)
    }
}

struct WeightsStep {
    unit: Unit,
    layers: Vec<usize>,
    opts: Vec<Adam>,
}

impl WeightsStep {
    fn new(q: &QuantizedGraph, unit: &Unit, lr: f64) -> Self {
        let layers: Vec<usize> = unit
            .layers()
            .filter(|&i| !q.frozen[i] && q.graph.layers[i].weight.is_some())
            .collect();
        let opts = layers
            .iter()
            .map(|&i| Adam::new(lr, q.graph.layers[i].weight.as_ref().map_or(0, Tensor::numel)))
            .collect();
        Self {
            unit: unit.clone(),
            layers,
            opts,
        }
    }
}

impl UnitStep for WeightsStep {
    fn step(&mut self, q: &mut QuantizedGraph, inputs: BTreeMap<NodeId, Tensor>, target: &Tensor, _it: usize) -> Result<f64> {
        let numel = target.numel() as f64;
        let hooks = unit_hooks(q, &self.unit, &BTreeMap::new())?;
        let (mse, _, grads) = unit_grads(&q.graph, &self.unit, &hooks, inputs, target, 1.0 / numel, Wrt::WEIGHTS)?;
        drop(hooks);
        for (&i, opt) in self.layers.iter().zip(&mut self.opts) {
            let gw = grads.weights[i].as_ref().ok_or_else(|| Error::State("missing weight gradient".into()))?;
            let w = q.graph.layers[i].weight.as_ref().expect("weighted layer");
            let g = match &q.weight_q[i] {
                Some(wq) => ste_weight_grad(w, wq, gw)?,
                None => gw.clone(),
            };
            let w = q.graph.layers[i].weight.as_mut().expect("weighted layer");
            opt.step(w.data_mut(), g.data());
        }
        Ok(mse)
    }
}

struct RoundStep {
    unit: Unit,
    layers: Vec<usize>,
    opts: Vec<Adam>,
    iters: usize,
}

impl RoundStep {
    fn new(q: &mut QuantizedGraph, unit: &Unit, lr: f64, iters: usize) -> Result<Self> {
        let layers = weighted_quantized(q, unit);
        let mut opts = Vec::new();
        for &i in &layers {
            let w = q.graph.layers[i].weight.as_ref().expect("weighted layer");
            let rv = RoundingVars::init(w, q.weight_q[i].as_ref().expect("quantized layer"))?;
            opts.push(Adam::new(lr, rv.v.numel()));
            q.strategy_state[i] = Some(StrategyState::Rounding(rv));
        }
        Ok(Self {
            unit: unit.clone(),
            layers,
            opts,
            iters,
        })
    }
}

fn rounding(q: &QuantizedGraph, i: usize) -> &RoundingVars {
    match &q.strategy_state[i] {
        Some(StrategyState::Rounding(rv)) => rv,
        _ => unreachable!("rounding state attached at start"),
    }
}

impl UnitStep for RoundStep {
    fn step(&mut self, q: &mut QuantizedGraph, inputs: BTreeMap<NodeId, Tensor>, target: &Tensor, it: usize) -> Result<f64> {
        let batch = target.batch().max(1) as f64;
        let mut soft = BTreeMap::new();
        for &i in &self.layers {
            let rv = rounding(q, i);
            let w = q.graph.layers[i].weight.as_ref().expect("weighted layer");
            soft.insert(i, rv.weight_with(w, q.weight_q[i].as_ref().expect("quantized"), &rv.soft())?);
        }
        let hooks = unit_hooks(q, &self.unit, &soft)?;
        let (mse, _, grads) = unit_grads(&q.graph, &self.unit, &hooks, inputs, target, 1.0 / batch, Wrt::WEIGHTS)?;
        drop(hooks);
        // per-sample squared error summed over outputs, averaged over the batch
        let mut loss = mse * target.numel() as f64 / batch;
        for (&i, opt) in self.layers.iter().zip(&mut self.opts) {
            let gw = grads.weights[i].as_ref().ok_or_else(|| Error::State("missing weight gradient".into()))?;
            let w = q.graph.layers[i].weight.as_ref().expect("weighted layer");
            let wq = q.weight_q[i].as_ref().expect("quantized");
            let rv = rounding(q, i);
            let beta = rv.beta_at(it, self.iters);
            let h = rv.soft();
            loss += rv.lambda * adaround_reg(&h, beta);
            let reg = adaround_reg_grad(&h, beta);
            let mut g = rv.v_grad(w, wq, gw)?;
            for ((g, r), &v) in g.iter_mut().zip(&reg).zip(rv.v.data()) {
                *g += rv.lambda * r * softround_grad(v, rv.zeta, rv.gamma);
            }
            let Some(StrategyState::Rounding(rv)) = q.strategy_state[i].as_mut() else {
                unreachable!("rounding state attached at start")
            };
            opt.step(rv.v.data_mut(), &g);
        }
        Ok(loss)
    }
}

/// Reconstruction optimization of every unit in order. With `iters == 0` the
/// quantizers are left as initialized (units are still frozen).
pub fn optimize(
    qgraph: &QuantizedGraph,
    fp: &Graph,
    calib: &Tensor,
    config: &PipelineConfig,
    log: &mut RunLog,
) -> Result<QuantizedGraph> {
    config.validate()?;
    if fp.layers.len() != qgraph.graph.layers.len() {
        return Err(Error::Config("float graph does not match the quantized graph".into()));
    }
    let mut q = qgraph.clone();
    for (k, unit) in units(&q.graph, config.granularity).iter().enumerate() {
        let summary = optimize_unit(&mut q, fp, unit, calib, config, k as u64, log)?;
        log.units.push(summary);
    }
    Ok(q)
}

fn freeze(q: &mut QuantizedGraph, unit: &Unit) {
    for i in unit.layers() {
        q.frozen[i] = true;
    }
    for n in unit_act_nodes(q, unit) {
        q.frozen_acts.insert(n);
    }
}

/// Optimizes one unit in place, keeping the best checkpoint, then freezes it.
pub fn optimize_unit(
    q: &mut QuantizedGraph,
    fp: &Graph,
    unit: &Unit,
    calib: &Tensor,
    config: &PipelineConfig,
    stream: u64,
    log: &mut RunLog,
) -> Result<UnitSummary> {
    let data = unit_data(q, fp, unit, calib)?;
    let eval = |q: &QuantizedGraph| -> Result<f64> {
        let hooks = q.hooks_for(unit.layers())?;
        unit_mse(&q.graph, unit, &data, &hooks)
    };
    let initial = eval(q)?;
    log.entries.push(LogEntry::new("optimize", &unit.name, 0, initial));
    let mut summary = UnitSummary {
        unit: unit.name.clone(),
        initial_mse: initial,
        final_mse: initial,
        best_iteration: 0,
    };
    if config.iters == 0 {
        freeze(q, unit);
        return Ok(summary);
    }

    if config.strategy == Strategy::Bits {
        let best = bits::optimize_bits(q, unit, &data, config, &eval, log)?;
        summary.final_mse = best.0;
        summary.best_iteration = best.1;
        freeze(q, unit);
        return Ok(summary);
    }

    let lr = config.lr();
    let mut runner: Box<dyn UnitStep> = match config.strategy {
        Strategy::Qparam => {
            let s = QparamStep::new(q, unit, lr);
            if s.is_empty() {
                freeze(q, unit);
                return Ok(summary);
            }
            Box::new(s)
        }
        Strategy::Weights => Box::new(WeightsStep::new(q, unit, lr)),
        Strategy::Round => {
            if weighted_quantized(q, unit).is_empty() {
                freeze(q, unit);
                return Ok(summary);
            }
            Box::new(RoundStep::new(q, unit, lr, config.iters)?)
        }
        Strategy::Bits => unreachable!("handled above"),
    };

    let mut best = (initial, 0usize, q.clone());
    let mut sampler = BatchSampler::new(data.len(), config.batch_size, config.seed, 1 + stream);
    let every = config.checkpoint_every();
    for it in 0..config.iters {
        let idx = sampler.next_batch();
        let (inputs, target) = data.batch(&idx);
        let loss = runner.step(q, inputs, &target, it)?;
        if !loss.is_finite() {
            return Err(Error::State(format!("non-finite loss in unit `{}`", unit.name)));
        }
        if (it + 1) % every == 0 || it + 1 == config.iters {
            let mse = eval(q)?;
            log.entries.push(LogEntry::new("optimize", &unit.name, it + 1, mse));
            if mse < best.0 {
                best = (mse, it + 1, q.clone());
            }
        }
    }
    *q = best.2;
    summary.final_mse = best.0;
    summary.best_iteration = best.1;
    freeze(q, unit);
    Ok(summary)
}
