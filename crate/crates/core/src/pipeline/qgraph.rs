use crate::engine::{forward_with, Graph, Hooks, NodeId};
use crate::error::Result;
use crate::quant::{QuantizerState, RoundingVars};
use crate::tensor::Tensor;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{DefaultHasher, Hash, Hasher};

/// Strategy-specific state kept for a layer after optimization.
#[derive(Debug, Clone, PartialEq)]
pub enum StrategyState {
    Rounding(RoundingVars),
    /// Integer codes of the weight.
    Codes(Vec<i64>),
}

/// A float graph with simulated quantization attached.
///
/// Weight quantizers are symmetric per-channel; activation quantizers sit on
/// every node feeding a weighted layer and are asymmetric per-tensor.
#[derive(Debug, Clone)]
pub struct QuantizedGraph {
    pub graph: Graph,
    /// Per layer; `None` for unweighted layers or full-precision weights.
    pub weight_q: Vec<Option<QuantizerState>>,
    pub act_q: BTreeMap<NodeId, QuantizerState>,
    pub frozen: Vec<bool>,
    pub frozen_acts: BTreeSet<NodeId>,
    pub strategy_state: Vec<Option<StrategyState>>,
}

impl QuantizedGraph {
    /// Deployed weight of `layer`: fake-quantized, or rebuilt from learned
    /// rounding / codes when the strategy keeps such state. Unquantized
    /// layers return their raw weight.
    pub fn effective_weight(&self, layer: usize) -> Result<Option<Tensor>> {
        let Some(w) = &self.graph.layers[layer].weight else {
            return Ok(None);
        };
        let Some(q) = &self.weight_q[layer] else {
            return Ok(Some(w.clone()));
        };
        match &self.strategy_state[layer] {
            Some(StrategyState::Rounding(rv)) => Ok(Some(rv.weight_with(w, q, &rv.hard())?)),
            Some(StrategyState::Codes(codes)) => {
                let gi = q.grouping(w.shape());
                let mut out = w.clone();
                for (i, (v, &c)) in out.data_mut().iter_mut().zip(codes).enumerate() {
                    let g = &q.params[gi.group(i)];
                    *v = g.scale * (c - g.zero_point) as f64;
                }
                Ok(Some(out))
            }
            None => Ok(Some(q.quantize(w)?)),
        }
    }

    /// Integer weight codes of `layer`, if its weight is quantized.
    pub fn weight_codes(&self, layer: usize) -> Result<Option<Vec<i64>>> {
        let (Some(w), Some(q)) = (&self.graph.layers[layer].weight, &self.weight_q[layer]) else {
            return Ok(None);
        };
        if let Some(StrategyState::Codes(c)) = &self.strategy_state[layer] {
            return Ok(Some(c.clone()));
        }
        let deployed = self.effective_weight(layer)?.unwrap_or_else(|| w.clone());
        Ok(Some(q.codes(&deployed)?))
    }

    pub fn hooks(&self) -> Result<QuantHooks<'_>> {
        self.hooks_for(0..self.graph.layers.len())
    }

    /// Hooks that only substitute weights of layers in `layers`.
    pub fn hooks_for(&self, layers: impl IntoIterator<Item = usize>) -> Result<QuantHooks<'_>> {
        let mut weights = vec![None; self.graph.layers.len()];
        for i in layers {
            if self.weight_q[i].is_some() {
                weights[i] = self.effective_weight(i)?;
            }
        }
        Ok(QuantHooks {
            weights,
            biases: Vec::new(),
            acts: &self.act_q,
            overrides: BTreeMap::new(),
        })
    }

    /// Simulated-quantization forward pass returning the final output.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let hooks = self.hooks()?;
        Ok(forward_with(&self.graph, input, false, &hooks)?.into_output())
    }

    /// Hash of a layer's quantized weight, bias-free, and its quantizer.
    pub fn layer_fingerprint(&self, layer: usize) -> Result<u64> {
        let mut h = DefaultHasher::new();
        if let Some(w) = self.effective_weight(layer)? {
            for v in w.data() {
                v.to_bits().hash(&mut h);
            }
        }
        if let Some(q) = &self.weight_q[layer] {
            for g in &q.params {
                g.scale.to_bits().hash(&mut h);
                g.zero_point.hash(&mut h);
            }
        }
        Ok(h.finish())
    }

    pub fn act_fingerprint(&self, node: NodeId) -> u64 {
        let mut h = DefaultHasher::new();
        if let Some(q) = self.act_q.get(&node) {
            for g in &q.params {
                g.scale.to_bits().hash(&mut h);
                g.zero_point.hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Hooks that substitute quantized weights and quantize activations.
pub struct QuantHooks<'a> {
    pub weights: Vec<Option<Tensor>>,
    /// Optional bias replacements, indexed by layer.
    pub biases: Vec<Option<Tensor>>,
    pub acts: &'a BTreeMap<NodeId, QuantizerState>,
    /// Activation quantizers that take precedence over `acts`.
    pub overrides: BTreeMap<NodeId, QuantizerState>,
}

impl QuantHooks<'_> {
    fn act(&self, node: NodeId) -> Option<&QuantizerState> {
        self.overrides.get(&node).or_else(|| self.acts.get(&node))
    }
}

impl Hooks for QuantHooks<'_> {
    fn weight(&self, layer: usize) -> Option<&Tensor> {
        self.weights.get(layer).and_then(Option::as_ref)
    }

    fn bias(&self, layer: usize) -> Option<&Tensor> {
        self.biases.get(layer).and_then(Option::as_ref)
    }

    fn activation(&self, node: NodeId, x: &Tensor) -> Option<Tensor> {
        self.act(node).map(|q| q.quantize(x).expect("per-tensor quantizer fits any tensor"))
    }

    fn activation_grad(&self, node: NodeId, pre: &Tensor, grad: &Tensor) -> Option<Tensor> {
        let q = self.act(node)?;
        let g = &q.params[0];
        let mut out = grad.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(pre.data()) {
            if !g.in_range(x) {
                *o = 0.0;
            }
        }
        Some(out)
    }
}
