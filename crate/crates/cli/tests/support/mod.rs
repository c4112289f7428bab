//! On-disk fixtures shared by the CLI test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use tinyptq_core::io;
use tinyptq_core::metrics::{argmax_rows, Predictor};
use tinyptq_core::models::{build_model, graph_params};
use tinyptq_core::Tensor;

pub fn inputs(model: &str, n: usize, phase: f64) -> Tensor {
    let g = build_model(model, None, 0).unwrap();
    let mut shape = vec![n];
    shape.extend(&g.input_shape);
    let len: usize = shape.iter().product();
    let data = (0..len).map(|i| ((i as f64) * 0.37 + phase).sin() * 1.5).collect();
    Tensor::new(shape, data).unwrap()
}

pub struct Fixture {
    pub _dir: tempfile::TempDir,
    pub root: PathBuf,
    pub weights: PathBuf,
    pub calib: PathBuf,
    pub test: PathBuf,
}

/// Random-weight model saved to disk, an unlabeled calibration set and a test
/// set labelled by the float model itself.
pub fn fixture(model: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let graph = build_model(model, None, 7).unwrap();
    let weights = root.join("weights.tpt");
    io::save_weights(&graph_params(&graph), &weights).unwrap();
    let calib = root.join("calib.tpt");
    io::save_dataset(&calib, &inputs(model, 16, 0.0), None).unwrap();
    let x = inputs(model, 24, 1.0);
    let labels: Vec<i64> = argmax_rows(&graph.predict(&x).unwrap()).into_iter().map(|v| v as i64).collect();
    let test = root.join("test.tpt");
    io::save_dataset(&test, &x, Some(&labels)).unwrap();
    Fixture {
        _dir: dir,
        root,
        weights,
        calib,
        test,
    }
}

pub fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}
