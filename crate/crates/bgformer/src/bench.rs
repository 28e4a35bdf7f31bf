//! Sparse-versus-dense aggregation micro-benchmark backing the CLI `bench`
//! command: identical random inputs through both aggregation kernels, with
//! exact multiply-add counts and wall-clock timing.

use std::hint::black_box;
use std::time::Instant;

use crate::batch_graph::{knn_visual_adjacency, minmax_normalize, similarity};
use crate::error::{Error, Result};
use crate::numerics::matrix::matmul;
use crate::numerics::rng::Rng;

#[derive(Debug, Clone, Copy)]
pub struct BenchReport {
    pub batch_size: usize,
    pub neighbors: usize,
    pub dim: usize,
    pub iters: usize,
    pub dense_madds_per_iter: u64,
    pub sparse_madds_per_iter: u64,
    pub dense_secs_per_iter: f64,
    pub sparse_secs_per_iter: f64,
    pub max_deviation: f64,
}

impl BenchReport {
    /// Counted aggregation multiply-add ratio; K/B by construction.
    pub fn madd_ratio(&self) -> f64 {
        self.sparse_madds_per_iter as f64 / self.dense_madds_per_iter as f64
    }

    pub fn speedup(&self) -> f64 {
        self.dense_secs_per_iter / self.sparse_secs_per_iter
    }
}

/// Build a B-node k-NN adjacency from random features, densify it, and run
/// both aggregation kernels `iters` times over one random B x C input.
pub fn run_aggregation_bench(
    b: usize,
    k: usize,
    c: usize,
    iters: usize,
    seed: u64,
) -> Result<BenchReport> {
    if k >= b {
        return Err(Error::contract(format!(
            "neighbor count K={k} must be below the batch size B={b}"
        )));
    }
    if b < 2 || c == 0 || iters == 0 {
        return Err(Error::contract(format!(
            "bench needs B >= 2, C >= 1, iters >= 1 (got B={b}, C={c}, iters={iters})"
        )));
    }
    let mut rng = Rng::new(seed);
    let sim_feats = rng.normal_matrix(b, 16, 1.0);
    let adj = minmax_normalize(&knn_visual_adjacency(&similarity(&sim_feats), k)?)?;
    let dense = adj.to_dense();
    let x = rng.normal_matrix(b, c, 1.0);

    let mut sparse_madds = 0u64;
    let start = Instant::now();
    let mut sparse_out = adj.aggregate(&x, &mut sparse_madds)?;
    black_box(&sparse_out);
    for _ in 1..iters {
        sparse_out = adj.aggregate(&x, &mut sparse_madds)?;
        black_box(&sparse_out);
    }
    let sparse_secs = start.elapsed().as_secs_f64() / iters as f64;

    let dense_madds = (b * b * c) as u64 * iters as u64;
    let start = Instant::now();
    let mut dense_out = matmul(&dense, &x)?;
    black_box(&dense_out);
    for _ in 1..iters {
        dense_out = matmul(&dense, &x)?;
        black_box(&dense_out);
    }
    let dense_secs = start.elapsed().as_secs_f64() / iters as f64;

    let max_deviation = sparse_out
        .data()
        .iter()
        .zip(dense_out.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    Ok(BenchReport {
        batch_size: b,
        neighbors: k,
        dim: c,
        iters,
        dense_madds_per_iter: dense_madds / iters as u64,
        sparse_madds_per_iter: sparse_madds / iters as u64,
        dense_secs_per_iter: dense_secs,
        sparse_secs_per_iter: sparse_secs,
        max_deviation,
    })
}
