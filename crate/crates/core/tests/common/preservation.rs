//! Function-preservation checks for batchnorm folding and cross-layer
//! equalization on the reference models.

use super::normal_tensor;
use tinyptq_core::engine::{fold_batchnorm, forward, Graph, Op};
use tinyptq_core::models::build_model;
use tinyptq_core::pipeline::{cle_equalize, eligible_pairs, input_channel_ranges, output_channel_ranges};
use tinyptq_core::Tensor;

pub const SAMPLES: usize = 32;

/// Largest per-sample relative L2 deviation between two graphs' outputs.
pub fn max_rel_deviation(a: &Graph, b: &Graph, x: &Tensor) -> f64 {
    let ya = forward(a, x, false).unwrap().into_output();
    let yb = forward(b, x, false).unwrap().into_output();
    let k = ya.item_len();
    ya.data()
        .chunks(k)
        .zip(yb.data().chunks(k))
        .map(|(p, q)| {
            let diff: f64 = p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            let norm: f64 = p.iter().map(|u| u * u).sum::<f64>().sqrt();
            diff / norm.max(1e-300)
        })
        .fold(0.0, f64::max)
}

pub fn random_inputs(g: &Graph, seed: u64) -> Tensor {
    let mut shape = vec![SAMPLES];
    shape.extend(&g.input_shape);
    normal_tensor(&shape, seed)
}

pub struct Preservation {
    pub fold: f64,
    pub cle: f64,
    /// Largest `|r1'_i - r2'_i|` over every equalized pair.
    pub range_gap: f64,
    pub pairs: usize,
}

pub fn check_model(name: &str, seed: u64) -> Preservation {
    let g = build_model(name, None, seed).unwrap();
    let x = random_inputs(&g, seed + 1);
    let folded = fold_batchnorm(&g).unwrap();
    assert!(folded.layers.iter().all(|l| !matches!(l.op, Op::BatchNorm(_))));
    let (eq, report) = cle_equalize(&folded);
    let mut range_gap = 0.0f64;
    for (a, b) in eligible_pairs(&folded) {
        let r1 = output_channel_ranges(eq.layers[a].weight.as_ref().unwrap());
        let r2 = input_channel_ranges(&eq.layers[b].op, eq.layers[b].weight.as_ref().unwrap());
        for (u, v) in r1.iter().zip(&r2) {
            range_gap = range_gap.max((u - v).abs());
        }
    }
    Preservation {
        fold: max_rel_deviation(&g, &folded, &x),
        cle: max_rel_deviation(&folded, &eq, &x),
        range_gap,
        pairs: report.pairs.len(),
    }
}
