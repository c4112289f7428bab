//! Backward passes and strategy surrogates against central finite differences.

mod common;

use common::gradcheck::{check_bits, check_graph, layer_cases, SurrogateCase, TOLERANCE};
use tinyptq_core::engine::{backward, forward, NodeId, NoHooks, Wrt};
use tinyptq_core::Error;

#[test]
fn every_layer_kind_matches_finite_differences() {
    let mut failures = Vec::new();
    for (name, g, x) in layer_cases(11) {
        let err = check_graph(&g, &x, 5);
        if !(err <= TOLERANCE) {
            failures.push(format!("{name}: {err:.3e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn strategy_surrogates_match_finite_differences() {
    for seed in [1, 2, 3] {
        let asym = SurrogateCase::asymmetric(seed);
        assert!(asym.q.params[0].zero_point != 0);
        assert!(asym.check_qparam() <= TOLERANCE, "asymmetric qparam {}", asym.check_qparam());
        let case = SurrogateCase::new(seed);
        assert!(case.check_qparam() <= TOLERANCE, "qparam {}", case.check_qparam());
        assert!(case.check_weights() <= TOLERANCE, "weights {}", case.check_weights());
        for beta in [20.0, 2.0] {
            assert!(case.check_round(beta) <= TOLERANCE, "round beta {beta}: {}", case.check_round(beta));
        }
    }
}

#[test]
fn bit_objective_matches_engine() {
    for kind in ["conv2d same", "conv2d valid stride 2", "dwconv2d stride 2", "conv1d", "fc"] {
        let err = check_bits(kind, 3);
        assert!(err <= 1e-9, "{kind}: {err:.3e}");
    }
}

#[test]
fn dense_bias_gradient_is_unit_vector() {
    let g = common::fc_net(5, 3, 0);
    let x = common::normal_tensor(&[1, 5], 1);
    let trace = forward(&g, &x, true).unwrap();
    let upstream = tinyptq_core::Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
    let grads = backward(&g, &trace, &upstream, Wrt::BIASES, &NoHooks).unwrap();
    assert_eq!(grads.biases[0].as_ref().unwrap().data(), &[1.0, 0.0, 0.0]);
    assert!(grads.weights[0].is_none());
}

#[test]
fn avgpool_spreads_gradient_uniformly() {
    let (_, g, x) = layer_cases(0).into_iter().find(|(n, _, _)| n == "avgpool").unwrap();
    let trace = forward(&g, &x, true).unwrap();
    let ones = tinyptq_core::Tensor::full(trace.output().shape(), 1.0);
    let grads = backward(&g, &trace, &ones, Wrt::INPUTS, &NoHooks).unwrap();
    assert!(grads.inputs[&NodeId::INPUT].data().iter().all(|&v| v == 0.25));
}

#[test]
fn backward_needs_a_recorded_forward() {
    let g = common::fc_net(4, 2, 0);
    let x = common::normal_tensor(&[1, 4], 0);
    let trace = forward(&g, &x, false).unwrap();
    let up = tinyptq_core::Tensor::zeros(&[1, 2]);
    assert!(matches!(backward(&g, &trace, &up, Wrt::ALL, &NoHooks), Err(Error::State(_))));
}
