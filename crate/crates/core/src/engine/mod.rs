//! Minimal deterministic CNN engine.

mod exec;
mod fold;
mod graph;
pub mod kernels;

pub use exec::{apply, backward, forward, forward_with, run_span, span_inputs, Gradients, Hooks, NoHooks, Trace, Wrt};
pub use fold::fold_batchnorm;
pub use graph::{BatchNorm, Block, ConvSpec, Graph, Layer, NodeId, Op, Padding, PoolSpec};
