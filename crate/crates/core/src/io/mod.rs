//! File formats: parameter sets, datasets and quantized models, all stored
//! in the binary tensor container.

mod container;

pub use container::{Container, Entry, TensorData, MAGIC, VERSION};

use crate::engine::{fold_batchnorm, NodeId};
use crate::error::{Error, Result};
use crate::models::{build_model, load_params, ParamSet};
use crate::pipeline::{QuantizedGraph, StrategyState};
use crate::quant::{QParams, QuantSpec, QuantizerState, Scheme};
use crate::tensor::Tensor;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

fn f32_entry(name: String, t: &Tensor) -> Entry {
    Entry::new(
        name,
        t.shape().to_vec(),
        TensorData::F32(t.data().iter().map(|&v| v as f32).collect()),
    )
}

fn i32_entry(name: String, values: &[i64]) -> Result<Entry> {
    let data = values
        .iter()
        .map(|&v| i32::try_from(v).map_err(|_| Error::Config(format!("`{name}`: value {v} exceeds i32"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Entry::new(name, vec![values.len()], TensorData::I32(data)))
}

fn entry_tensor(e: &Entry) -> Result<Tensor> {
    Tensor::new(e.dims.clone(), e.data.to_f64())
}

/// Parameter set from container entries (every entry is read as a tensor).
pub fn params_from_container(c: &Container) -> Result<ParamSet> {
    c.entries.iter().map(|e| Ok((e.name.clone(), entry_tensor(e)?))).collect()
}

/// Loads a parameter set; values are widened from f32.
pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamSet> {
    params_from_container(&Container::load(path)?)
}

/// Saves a parameter set as f32 entries in name order.
pub fn save_weights(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::default();
    for (name, t) in params {
        c.push(f32_entry(name.clone(), t))?;
    }
    c.save(path)
}

/// Inputs with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Option<Vec<i64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loads the first `limit` samples (all when `None`) of a dataset file with
/// entries `inputs` and, optionally, `labels`.
pub fn load_dataset(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Dataset> {
    dataset_from_container(&Container::load(path)?, limit)
}

pub fn dataset_from_container(c: &Container, limit: Option<usize>) -> Result<Dataset> {
    let inputs = c
        .get("inputs")
        .ok_or_else(|| Error::format(0, "dataset has no `inputs` entry"))?;
    if inputs.dims.is_empty() {
        return Err(Error::format(inputs.offset, "`inputs` must have a batch axis"));
    }
    let n = inputs.dims[0];
    let labels = match c.get("labels") {
        None => None,
        Some(l) => {
            if l.dims.len() != 1 || l.dims[0] != n {
                return Err(Error::format(
                    l.offset,
                    format!("`labels` has shape {:?}, expected [{n}]", l.dims),
                ));
            }
            let TensorData::I32(v) = &l.data else {
                return Err(Error::format(l.offset, "`labels` must be i32"));
            };
            Some(v.iter().map(|&x| x as i64).collect::<Vec<i64>>())
        }
    };
    let keep = limit.map_or(n, |l| l.min(n));
    let item: usize = inputs.dims[1..].iter().product();
    let mut dims = inputs.dims.clone();
    dims[0] = keep;
    let values = inputs.data.to_f64();
    let inputs = Tensor::new(dims, values[..keep * item].to_vec())?;
    Ok(Dataset {
        inputs,
        labels: labels.map(|mut l| {
            l.truncate(keep);
            l
        }),
    })
}

pub fn save_dataset(path: impl AsRef<Path>, inputs: &Tensor, labels: Option<&[i64]>) -> Result<()> {
    let mut c = Container::default();
    c.push(f32_entry("inputs".into(), inputs))?;
    if let Some(l) = labels {
        if l.len() != inputs.batch() {
            return Err(Error::Shape {
                expected: vec![inputs.batch()],
                got: vec![l.len()],
            });
        }
        c.push(i32_entry("labels".into(), l)?)?;
    }
    c.save(path)
}

/// Entry-name prefix of the activation quantizer on `node`.
pub fn activation_key(q: &QuantizedGraph, node: NodeId) -> String {
    match node.layer() {
        None => "act.input".to_string(),
        Some(l) => format!("act.{}", q.graph.layers[l].name),
    }
}

fn params_entries(c: &mut Container, prefix: &str, q: &QuantizerState) -> Result<()> {
    let scales = Tensor::from_vec(q.scales());
    c.push(f32_entry(format!("{prefix}.scale"), &scales))?;
    let zp: Vec<i64> = q.params.iter().map(|p| p.zero_point).collect();
    c.push(i32_entry(format!("{prefix}.zero_point"), &zp)?)?;
    c.push(i32_entry(format!("{prefix}.bits"), &[q.bits() as i64])?)?;
    Ok(())
}

/// Serializes a quantized model: deployed weights and float biases of the
/// folded graph, per-channel weight scales, zero points and integer codes,
/// and the activation quantizers.
pub fn quantized_container(q: &QuantizedGraph) -> Result<Container> {
    let mut c = Container::default();
    for (i, layer) in q.graph.layers.iter().enumerate() {
        let prefix = format!("{}.weight", layer.name);
        match (&q.weight_q[i], q.weight_codes(i)?) {
            (Some(wq), Some(codes)) => {
                // rebuild from the stored (f32) scales so a reload reproduces the file
                let shape = layer.weight.as_ref().expect("quantized layers have weights").shape().to_vec();
                let gi = wq.grouping(&shape);
                let w: Vec<f64> = codes
                    .iter()
                    .enumerate()
                    .map(|(k, &code)| {
                        let g = &wq.params[gi.group(k)];
                        (g.scale as f32 as f64) * (code - g.zero_point) as f64
                    })
                    .collect();
                c.push(f32_entry(prefix.clone(), &Tensor::new(shape.clone(), w)?))?;
                if let Some(b) = &layer.bias {
                    c.push(f32_entry(format!("{}.bias", layer.name), b))?;
                }
                params_entries(&mut c, &prefix, wq)?;
                let mut e = i32_entry(format!("{prefix}.codes"), &codes)?;
                e.dims = shape;
                c.push(e)?;
            }
            _ => {
                if let Some(w) = q.effective_weight(i)? {
                    c.push(f32_entry(prefix, &w))?;
                }
                if let Some(b) = &layer.bias {
                    c.push(f32_entry(format!("{}.bias", layer.name), b))?;
                }
            }
        }
    }
    for (node, aq) in &q.act_q {
        params_entries(&mut c, &activation_key(q, *node), aq)?;
    }
    Ok(c)
}

pub fn save_quantized(q: &QuantizedGraph, path: impl AsRef<Path>) -> Result<()> {
    quantized_container(q)?.save(path)
}

/// True when the container carries quantizer entries.
pub fn is_quantized(c: &Container) -> bool {
    c.entries.iter().any(|e| e.name.ends_with(".scale"))
}

fn read_quantizer(c: &Container, prefix: &str, scheme: Scheme, per_channel_axis: Option<usize>) -> Result<Option<QuantizerState>> {
    let Some(scale) = c.get(&format!("{prefix}.scale")) else {
        return Ok(None);
    };
    let zp = c
        .get(&format!("{prefix}.zero_point"))
        .ok_or_else(|| Error::format(scale.offset, format!("`{prefix}` has a scale but no zero point")))?;
    let bits = c
        .get(&format!("{prefix}.bits"))
        .ok_or_else(|| Error::format(scale.offset, format!("`{prefix}` has no bit width")))?;
    let bits = bits.data.to_f64().first().copied().unwrap_or(0.0) as u32;
    let scales = scale.data.to_f64();
    let zps = zp.data.to_f64();
    if scales.len() != zps.len() {
        return Err(Error::format(zp.offset, format!("`{prefix}`: scale/zero point count mismatch")));
    }
    let spec = match per_channel_axis {
        Some(axis) => QuantSpec {
            granularity: crate::quant::Granularity::PerChannel { axis },
            ..QuantSpec::weight(bits, axis + 1)
        },
        None => QuantSpec::activation(bits),
    };
    debug_assert_eq!(spec.scheme, scheme);
    let (qmin, qmax) = spec.grid();
    let params = scales
        .iter()
        .zip(&zps)
        .map(|(&s, &z)| QParams {
            scale: s,
            zero_point: z as i64,
            qmin,
            qmax,
            degenerate: false,
        })
        .collect();
    QuantizerState::new(spec, params)
        .map(Some)
        .map_err(|e| Error::format(scale.offset, format!("`{prefix}`: {e}")))
}

/// Rebuilds a quantized model of architecture `model` from a container
/// written by [`save_quantized`]. Every layer and quantizer comes back frozen.
pub fn quantized_from_container(model: &str, c: &Container) -> Result<QuantizedGraph> {
    let mut graph = fold_batchnorm(&build_model(model, None, 0)?)?;
    let params = params_from_container(c)?;
    let weights: ParamSet = params
        .into_iter()
        .filter(|(k, _)| k.ends_with(".weight") || k.ends_with(".bias"))
        .collect();
    load_params(&mut graph, &weights)?;
    let n = graph.layers.len();
    let mut q = QuantizedGraph {
        graph,
        weight_q: vec![None; n],
        act_q: BTreeMap::new(),
        frozen: vec![true; n],
        frozen_acts: BTreeSet::new(),
        strategy_state: vec![None; n],
    };
    for i in 0..n {
        let Some(w) = q.graph.layers[i].weight.as_ref() else { continue };
        let prefix = format!("{}.weight", q.graph.layers[i].name);
        let Some(wq) = read_quantizer(c, &prefix, Scheme::Symmetric, Some(w.rank() - 1))? else {
            continue;
        };
        let codes = c
            .get(&format!("{prefix}.codes"))
            .ok_or_else(|| Error::format(0, format!("`{prefix}` has no codes")))?;
        if codes.dims != w.shape() {
            return Err(Error::format(codes.offset, format!("`{prefix}.codes` has shape {:?}", codes.dims)));
        }
        let codes: Vec<i64> = codes.data.to_f64().into_iter().map(|v| v as i64).collect();
        q.weight_q[i] = Some(wq);
        q.strategy_state[i] = Some(StrategyState::Codes(codes));
    }
    for node in q.graph.quantized_activation_nodes() {
        let key = activation_key(&q, node);
        if let Some(aq) = read_quantizer(c, &key, Scheme::Asymmetric, None)? {
            q.act_q.insert(node, aq);
            q.frozen_acts.insert(node);
        }
    }
    Ok(q)
}

pub fn load_quantized(model: &str, path: impl AsRef<Path>) -> Result<QuantizedGraph> {
    quantized_from_container(model, &Container::load(path)?)
}
