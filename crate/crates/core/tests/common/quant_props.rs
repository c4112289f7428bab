//! Quantizer invariants checked on a single tensor. Shared by the property
//! tests and the acceptance sweep.

use tinyptq_core::quant::{init_minmax, init_mse, reconstruction_sse, Granularity, QuantSpec, QuantizerState, Scheme};
use tinyptq_core::Tensor;

pub const GRID_STEPS: usize = 100;

/// Invariant names, in report order.
pub const PROPERTIES: [&str; 6] = [
    "idempotence",
    "grid membership",
    "monotonicity",
    "clamp bounds",
    "mse <= minmax",
    "per-channel <= per-tensor",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub property: &'static str,
    pub detail: String,
}

fn ulp(v: f64) -> f64 {
    let a = v.abs();
    if a == 0.0 {
        f64::from_bits(1)
    } else {
        f64::from_bits(a.to_bits() + 1) - a
    }
}

fn spec(bits: u32, scheme: Scheme, per_channel: bool, rank: usize) -> QuantSpec {
    QuantSpec {
        scheme,
        granularity: if per_channel {
            Granularity::PerChannel { axis: rank - 1 }
        } else {
            Granularity::PerTensor
        },
        bits,
    }
}

fn check_quantizer(x: &Tensor, q: &QuantizerState, label: &str, out: &mut Vec<Violation>) {
    let mut push = |property, detail: String| out.push(Violation { property, detail: format!("{label}: {detail}") });
    let xq = q.quantize(x).unwrap();
    let xqq = q.quantize(&xq).unwrap();
    if xq != xqq {
        push("idempotence", "Q(Q(x)) != Q(x)".into());
    }
    let gi = q.grouping(x.shape());
    let mut groups: Vec<Vec<(f64, f64)>> = vec![Vec::new(); q.params.len()];
    for (i, (&v, &y)) in x.data().iter().zip(xq.data()).enumerate() {
        let g = &q.params[gi.group(i)];
        let z = g.zero_point as f64;
        let k = (y / g.scale).round_ties_even() + z;
        let on_grid = (y - g.scale * (k - z)).abs() <= ulp(y);
        if !on_grid || k < g.qmin as f64 || k > g.qmax as f64 {
            push("grid membership", format!("{y} is not on the grid of {g:?}"));
        }
        let (lo, hi) = (g.scale * (g.qmin as f64 - z), g.scale * (g.qmax as f64 - z));
        if y < lo || y > hi {
            push("clamp bounds", format!("{y} outside [{lo}, {hi}]"));
        }
        groups[gi.group(i)].push((v, y));
    }
    for mut pairs in groups {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = pairs.windows(2).find(|w| w[1].1 < w[0].1) {
            push("monotonicity", format!("x {} <= {} but Q {} > {}", w[0].0, w[1].0, w[0].1, w[1].1));
        }
    }
}

/// Checks every invariant for one tensor at one bitwidth and scheme, over both
/// granularities (channels on the last axis) and both initializations.
pub fn check_tensor(x: &Tensor, bits: u32, scheme: Scheme) -> Vec<Violation> {
    let mut out = Vec::new();
    let samples = std::slice::from_ref(x);
    let mut sse = [[0.0; 2]; 2];
    for (gi, per_channel) in [false, true].into_iter().enumerate() {
        let s = spec(bits, scheme, per_channel, x.rank());
        let mm = init_minmax(samples, &s).unwrap();
        let mse = init_mse(samples, &s, GRID_STEPS).unwrap();
        let gran = if per_channel { "per-channel" } else { "per-tensor" };
        check_quantizer(x, &mm, &format!("{gran} minmax b={bits} {scheme:?}"), &mut out);
        check_quantizer(x, &mse, &format!("{gran} mse b={bits} {scheme:?}"), &mut out);
        sse[gi] = [reconstruction_sse(samples, &mm).unwrap(), reconstruction_sse(samples, &mse).unwrap()];
        if sse[gi][1] > sse[gi][0] {
            out.push(Violation {
                property: "mse <= minmax",
                detail: format!("{gran} b={bits} {scheme:?}: {} > {}", sse[gi][1], sse[gi][0]),
            });
        }
    }
    for (k, init) in ["minmax", "mse"].into_iter().enumerate() {
        if sse[1][k] > sse[0][k] {
            out.push(Violation {
                property: "per-channel <= per-tensor",
                detail: format!("{init} b={bits} {scheme:?}: {} > {}", sse[1][k], sse[0][k]),
            });
        }
    }
    out
}
