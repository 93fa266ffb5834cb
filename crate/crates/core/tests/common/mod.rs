//! Loop-based reference implementations shared by the integration tests.
//!
//! Everything here is written directly from the definitions, one scalar at a
//! time, and never calls into the tensor or autodiff code it is checked
//! against.

#![allow(dead_code)]

use gapnet::attention::HeadParams;
use gapnet::dataset::synth::Generator;
use gapnet::dataset::PointCloud;
use gapnet::nn::Dense;
use gapnet::params::ParamStore;
use gapnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SLOPE: f64 = 0.2;

pub fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        SLOPE * v
    }
}

/// Self first, then the `k - 1` nearest other rows ordered by
/// `(squared distance, index)` after a full sort.
pub fn knn_full_sort(points: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, j)
                })
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            std::iter::once(i).chain(others.into_iter().take(k - 1).map(|(_, j)| j)).collect()
        })
        .collect()
}

pub fn rows_of<T: gapnet::Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
}

/// `x · W + b` for one row, reading `W` as `[in, out]`.
pub fn dense_row(store: &ParamStore<f64>, layer: &Dense, x: &[f64]) -> Vec<f64> {
    let w = store.value(layer.weight).data();
    let b = store.value(layer.bias).data();
    let out = layer.out_features;
    (0..out)
        .map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + o]).sum::<f64>())
        .collect()
}

pub struct HeadReference {
    /// `[N][F']`
    pub attention: Vec<Vec<f64>>,
    /// `[N][k]`
    pub coefficients: Vec<Vec<f64>>,
    /// `[N][k][F']`
    pub encoded_edges: Vec<Vec<Vec<f64>>>,
}

/// One attention head evaluated point by point and neighbour by neighbour.
pub fn head_reference(
    store: &ParamStore<f64>,
    head: &HeadParams,
    nodes: &[Vec<f64>],
    neighbors: &[Vec<usize>],
    constant: bool,
) -> HeadReference {
    let mut out = HeadReference {
        attention: Vec::new(),
        coefficients: Vec::new(),
        encoded_edges: Vec::new(),
    };
    for (i, row) in neighbors.iter().enumerate() {
        let xi: Vec<f64> = dense_row(store, &head.node_encoder, &nodes[i]).into_iter().map(leaky).collect();
        let s = dense_row(store, &head.self_proj, &xi)[0];
        let edges: Vec<Vec<f64>> = row
            .iter()
            .map(|&j| {
                let e: Vec<f64> = nodes[i].iter().zip(&nodes[j]).map(|(a, b)| a - b).collect();
                dense_row(store, &head.edge_encoder, &e).into_iter().map(leaky).collect()
            })
            .collect();
        let alpha: Vec<f64> = if constant {
            vec![1.0 / row.len() as f64; row.len()]
        } else {
            let scores: Vec<f64> = edges.iter().map(|y| leaky(s + dense_row(store, &head.edge_proj, y)[0])).collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|c| (c - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        };
        let width = head.out_channels();
        let attention = (0..width)
            .map(|f| edges.iter().zip(&alpha).map(|(y, a)| a * y[f]).sum::<f64>().max(0.0))
            .collect();
        out.attention.push(attention);
        out.coefficients.push(alpha);
        out.encoded_edges.push(edges);
    }
    out
}

/// Per-channel maximum over each point's neighbours.
pub fn pooling_reference(graph_features: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    graph_features
        .iter()
        .map(|edges| {
            (0..edges[0].len())
                .map(|c| edges.iter().map(|e| e[c]).fold(f64::NEG_INFINITY, f64::max))
                .collect()
        })
        .collect()
}

pub fn max_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn random_rows(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn tensor_of(rows: &[Vec<f64>]) -> Tensor<f64> {
    let c = rows[0].len();
    Tensor::new(vec![rows.len(), c], rows.iter().flatten().copied().collect()).unwrap()
}

/// Balanced in-memory classification set: cloud `i` is class `i mod shapes.len()`.
pub fn classification_set(shapes: &[Generator], count: usize, points: usize, seed: u64) -> Vec<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let class = i % shapes.len();
            let mut c = shapes[class].generate(points, &mut rng).unwrap();
            c.label = Some(class);
            c
        })
        .collect()
}

/// Dumbbells with per-point part labels, all in category 0.
pub fn dumbbell_set(count: usize, points: usize, seed: u64) -> Vec<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut c = Generator::Dumbbell.generate(points, &mut rng).unwrap();
            c.category = Some(0);
            c
        })
        .collect()
}

pub const FOUR_SHAPES: [Generator; 4] = [Generator::Sphere, Generator::Cube, Generator::Plane, Generator::Dumbbell];
