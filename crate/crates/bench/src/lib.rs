//! Shared fixtures for the criterion benchmarks.

use acceltran_core::model::{build_op_graph, generate_input, generate_weights, ModelConfig, Weights};
use acceltran_core::numerics::{FixedTensor, DEFAULT_FORMAT};
use acceltran_core::OpGraph;

/// bert-tiny at a short sequence length, small enough for quick iteration.
pub fn tiny_fixture(seq_len: usize) -> (ModelConfig, OpGraph, Weights, FixedTensor) {
    let mut cfg = ModelConfig::preset("bert-tiny").unwrap();
    cfg.seq_len = seq_len;
    let graph = build_op_graph(&cfg);
    let weights = generate_weights(&cfg, &graph, DEFAULT_FORMAT, 42);
    let input = generate_input(&cfg, DEFAULT_FORMAT, 42);
    (cfg, graph, weights, input)
}

/// Deterministic pseudo-random activations in roughly [-1, 1].
pub fn random_activations(batch: usize, rows: usize, cols: usize, seed: u64) -> FixedTensor {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let vals: Vec<f64> = (0..batch * rows * cols)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        })
        .collect();
    FixedTensor::from_f64((batch, rows, cols), &vals, DEFAULT_FORMAT)
}
