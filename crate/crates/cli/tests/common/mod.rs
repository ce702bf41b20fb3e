#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use bqn_core::bits::BitTensor;
use bqn_core::network::{serialize, BinarizedNetwork, Layer, Shape3, WeightedParams};
use bqn_core::tensorfile::write_tensors;

pub fn bqn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bqn")).args(args).env_remove("BQN_SEED").output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dense(signs: &[i8], rows: usize, scales: &[f32]) -> Layer {
    let bits = BitTensor::from_signs(&[rows, signs.len() / rows], signs).unwrap();
    Layer::Dense { params: WeightedParams { bits, scales: scales.to_vec(), latent: None } }
}

/// `y0 = x0 − x1`, `y1 = x1 − x0` over a 1×1×2 input.
pub fn difference_net() -> BinarizedNetwork {
    BinarizedNetwork::new(Shape3::new(1, 1, 2), vec![dense(&[1, -1, -1, 1], 2, &[1.0, 1.0])]).unwrap()
}

/// Fixed 3-input network with one hidden sign layer, used for golden files.
pub fn toy_net() -> BinarizedNetwork {
    let layers = vec![
        dense(&[1, -1, 1, -1, -1, 1], 2, &[0.5, 0.75]),
        Layer::ScaleShift { scale: vec![2.0, 1.5], bias: vec![-0.25, 0.125] },
        Layer::Sign,
        dense(&[1, -1, -1, 1, 1, 1], 3, &[1.0, 0.5, 0.25]),
    ];
    BinarizedNetwork::new(Shape3::flat(3), layers).unwrap()
}

pub fn write_model(net: &BinarizedNetwork, path: &Path) {
    std::fs::write(path, serialize(net)).unwrap();
}

pub fn write_states(shape: Shape3, states: &[Vec<f32>], path: &Path) {
    write_tensors(path, shape, states).unwrap();
}

/// Column `name` of a CSV text, header excluded.
pub fn csv_column(text: &str, name: &str) -> Vec<String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(k).unwrap().to_string()).collect()
}
