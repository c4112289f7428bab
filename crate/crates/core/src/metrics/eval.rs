//! Top-1 accuracy.

use crate::engine::{forward, Graph};
use crate::error::{Error, Result};
use crate::pipeline::QuantizedGraph;
use crate::tensor::Tensor;

/// Anything that maps a batch of inputs to a batch of logits.
pub trait Predictor {
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

impl Predictor for Graph {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(forward(self, x, false)?.into_output())
    }
}

impl Predictor for QuantizedGraph {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

const EVAL_CHUNK: usize = 128;

/// Index of the first maximum of each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.item_len().max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of samples whose top-1 prediction equals the label, in input order.
pub fn evaluate(model: &dyn Predictor, inputs: &Tensor, labels: &[i64]) -> Result<f64> {
    let n = inputs.batch();
    if labels.len() != n {
        return Err(Error::Shape {
            expected: vec![n],
            got: vec![labels.len()],
        });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let logits = model.predict(&inputs.slice_batch(start, end))?;
        let classes = logits.item_len() as i64;
        for (pred, &label) in argmax_rows(&logits).into_iter().zip(&labels[start..end]) {
            if !(0..classes).contains(&label) {
                return Err(Error::Config(format!("label {label} outside 0..{classes}")));
            }
            correct += (pred as i64 == label) as usize;
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}
