//! End-to-end bias tuning.

use super::adam::Adam;
use super::attach::{collect_nodes, STREAM_CHUNK};
use super::config::PipelineConfig;
use super::optimize::BatchSampler;
use super::qgraph::QuantizedGraph;
use super::{LogEntry, RunLog};
use crate::engine::{backward, forward_with, Graph, NoHooks, Wrt};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stream id of the bias-tuning minibatch sampler.
const BIAS_STREAM: u64 = 1 << 32;

fn output_mse(q: &QuantizedGraph, calib: &Tensor, target: &Tensor) -> Result<f64> {
    let hooks = q.hooks()?;
    let n = calib.batch();
    let mut sse = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + STREAM_CHUNK).min(n);
        let y = forward_with(&q.graph, &calib.slice_batch(start, end), false, &hooks)?.into_output();
        let t = target.slice_batch(start, end);
        sse += y.mse(&t) * t.numel() as f64;
        start = end;
    }
    Ok(sse / target.numel().max(1) as f64)
}

/// Tunes every bias vector so the quantized model's final output matches the
/// float model's on `calib`. Weights and quantizers are left untouched and
/// the best checkpoint is kept.
pub fn bias_tune(
    qgraph: &QuantizedGraph,
    fp: &Graph,
    calib: &Tensor,
    config: &PipelineConfig,
    log: &mut RunLog,
) -> Result<QuantizedGraph> {
    let mut q = qgraph.clone();
    let out = fp.output_node();
    let target = collect_nodes(fp, &NoHooks, calib, &[out])?
        .remove(&out)
        .expect("output node");
    let initial = output_mse(&q, calib, &target)?;
    log.entries.push(LogEntry::new("bias_tune", "model", 0, initial));
    log.bias = Some((initial, initial));
    let layers: Vec<usize> = (0..q.graph.layers.len())
        .filter(|&i| q.graph.layers[i].bias.is_some())
        .collect();
    if config.iters == 0 || layers.is_empty() || initial == 0.0 {
        return Ok(q);
    }
    let mut opts: Vec<Adam> = layers
        .iter()
        .map(|&i| Adam::new(config.bias_lr, q.graph.layers[i].bias.as_ref().map_or(0, Tensor::numel)))
        .collect();
    let mut sampler = BatchSampler::new(calib.batch(), config.batch_size, config.seed, BIAS_STREAM);
    let mut best = (initial, q.clone());
    let every = config.checkpoint_every();
    for it in 0..config.iters {
        let idx = sampler.next_batch();
        let x = calib.gather_batch(&idx);
        let t = target.gather_batch(&idx);
        let grads = {
            let hooks = q.hooks()?;
            let trace = forward_with(&q.graph, &x, true, &hooks)?;
            let y = trace.output();
            let scale = 2.0 / t.numel() as f64;
            let mut up = y.clone();
            for (u, tv) in up.data_mut().iter_mut().zip(t.data()) {
                *u = (*u - tv) * scale;
            }
            backward(&q.graph, &trace, &up, Wrt::BIASES, &hooks)?
        };
        for (&i, opt) in layers.iter().zip(&mut opts) {
            let g = grads.biases[i]
                .as_ref()
                .ok_or_else(|| Error::State(format!("missing bias gradient for `{}`", q.graph.layers[i].name)))?;
            let b = q.graph.layers[i].bias.as_mut().expect("bias");
            opt.step(b.data_mut(), g.data());
        }
        if (it + 1) % every == 0 || it + 1 == config.iters {
            let mse = output_mse(&q, calib, &target)?;
            log.entries.push(LogEntry::new("bias_tune", "model", it + 1, mse));
            if !mse.is_finite() {
                return Err(Error::State("non-finite loss during bias tuning".into()));
            }
            if mse < best.0 {
                best = (mse, q.clone());
            }
        }
    }
    log.bias = Some((initial, best.0));
    Ok(best.1)
}
