//! Synthetic node features on Zachary's karate club graph.
//!
//! Each faction has its own Gaussian over node features. A pattern fixes two
//! random weight matrices and pushes per-sample Gaussian draws through a
//! two-layer graph convolution over the true graph, so the observations
//! carry the graph's structure.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::graph::{adjacency_from_edges, load_edge_list, parse_edge_list, GraphDataset};
use crate::error::Result;
use crate::tensor::Tensor;

pub const KARATE_NODES: usize = 34;
pub const KARATE_EDGES_CSV: &str = include_str!("../../data/karate-edges.csv");

/// Members who sided with the instructor after the split (label 0); the
/// rest followed the administrator (label 1).
pub const INSTRUCTOR_FACTION: [usize; 17] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12, 13, 16, 17, 19, 21];

pub fn karate_labels() -> Vec<usize> {
    (0..KARATE_NODES)
        .map(|i| usize::from(!INSTRUCTOR_FACTION.contains(&i)))
        .collect()
}

pub fn karate_adjacency() -> Tensor {
    let edges = parse_edge_list(KARATE_EDGES_CSV, "karate-edges.csv").expect("bundled list parses");
    adjacency_from_edges(KARATE_NODES, &edges).expect("bundled list is valid")
}

#[derive(Clone, Debug, PartialEq)]
pub struct KarateConfig {
    pub n_patterns: usize,
    pub samples_per_pattern: usize,
    /// Feature width per node.
    pub d: usize,
    /// Standard deviation of the per-class mean vectors.
    pub mean_std: f64,
}

impl Default for KarateConfig {
    fn default() -> Self {
        Self {
            n_patterns: 5,
            samples_per_pattern: 250,
            d: 8,
            mean_std: 2.0,
        }
    }
}

/// One dataset per pattern on the bundled graph.
pub fn gen_karate_synthetic(seed: u64, cfg: &KarateConfig) -> Vec<GraphDataset> {
    generate(karate_adjacency(), seed, cfg).expect("bundled graph is valid")
}

/// As [`gen_karate_synthetic`], reading the edge list from `edges`.
pub fn gen_karate_from_file(edges: &Path, seed: u64, cfg: &KarateConfig) -> Result<Vec<GraphDataset>> {
    let list = load_edge_list(edges)?;
    let adjacency = adjacency_from_edges(KARATE_NODES, &list)?;
    generate(adjacency, seed, cfg)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn generate(adjacency: Tensor, seed: u64, cfg: &KarateConfig) -> Result<Vec<GraphDataset>> {
    let n = adjacency.shape()[0];
    let d = cfg.d;
    let labels = karate_labels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..d).map(|_| cfg.mean_std * normal(&mut rng)).collect())
        .collect();
    let a_norm = normalized(&adjacency);
    let w_scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(cfg.n_patterns);
    for _ in 0..cfg.n_patterns {
        let w1 = Tensor::from_fn(&[d, d], |_| w_scale * normal(&mut rng));
        let w2 = Tensor::from_fn(&[d, d], |_| w_scale * normal(&mut rng));
        let mut feats = Vec::with_capacity(cfg.samples_per_pattern * n * d);
        for _ in 0..cfg.samples_per_pattern {
            let h0 = Tensor::from_fn(&[n, d], |i| means[labels[i / d]][i % d] + normal(&mut rng));
            let h1 = matmul(&matmul(&a_norm, &h0), &w1).map(f64::tanh);
            let x = matmul(&matmul(&a_norm, &h1), &w2);
            feats.extend_from_slice(x.data());
        }
        let features = Tensor::new(&[cfg.samples_per_pattern, n, d], feats)?;
        out.push(GraphDataset::new(features, adjacency.clone(), Some(labels.clone()))?);
    }
    Ok(out)
}

fn normalized(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let deg: Vec<f64> = (0..n).map(|s| 1.0 + a.row(s).iter().sum::<f64>()).collect();
    Tensor::from_fn(&[n, n], |i| {
        let (s, t) = (i / n, i % n);
        let hat = a.get(&[s, t]) + f64::from(s == t);
        hat / (deg[s] * deg[t]).sqrt()
    })
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (p, q) = (a.shape()[0], a.shape()[1]);
    let r = b.shape()[1];
    let mut c = Tensor::zeros(&[p, r]);
    let cd = c.data_mut();
    for i in 0..p {
        for k in 0..q {
            let aik = a.data()[i * q + k];
            for j in 0..r {
                cd[i * r + j] += aik * b.data()[k * r + j];
            }
        }
    }
    c
}
