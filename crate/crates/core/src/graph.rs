//! Directed k-nearest-neighbour graphs over point sets.
//!
//! Each point is its own first neighbour. The remaining `k − 1` slots hold the
//! nearest other points by Euclidean distance, ties broken by ascending index.

use std::cmp::Ordering;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    n: usize,
    k: usize,
    /// Row-major `[n, k]`.
    indices: Vec<usize>,
}

impl KnnGraph {
    pub fn from_indices(n: usize, k: usize, indices: Vec<usize>) -> Result<Self> {
        if k == 0 || indices.len() != n * k {
            return Err(Error::dim("knn graph", &[n, k], &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::domain(format!("neighbor index {bad} out of range for {n} points")));
        }
        Ok(Self { n, k, indices })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Same graph after relabelling points: new point `p` is old point `perm[p]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let indices = perm
            .iter()
            .flat_map(|&old| self.row(old).iter().map(|&j| inverse[j]))
            .collect();
        Self {
            n: self.n,
            k: self.k,
            indices,
        }
    }
}

pub(crate) fn squared_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Brute-force O(N²) kNN graph over the rows of `points` (`[N, C]`).
pub fn knn_build<T: Real>(points: &Tensor<T>, k: usize) -> Result<KnnGraph> {
    if points.ndim() != 2 {
        return Err(Error::dim("knn_build", points.shape(), &[0, 3]));
    }
    let (n, c) = (points.shape()[0], points.shape()[1]);
    if k == 0 || k > n {
        return Err(Error::domain(format!("k = {k} must be in [1, {n}]")));
    }
    let data = points.data();
    let rows: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let pi = &data[i * c..(i + 1) * c];
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(pi, &data[j * c..(j + 1) * c]), j))
                .collect();
            let by_dist = |a: &(f64, usize), b: &(f64, usize)| {
                a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
            };
            let keep = k - 1;
            if keep > 0 && keep < cand.len() {
                cand.select_nth_unstable_by(keep - 1, by_dist);
                cand.truncate(keep);
            }
            cand.truncate(keep);
            cand.sort_unstable_by(by_dist);
            std::iter::once(i).chain(cand.into_iter().map(|(_, j)| j)).collect()
        })
        .collect();
    Ok(KnnGraph {
        n,
        k,
        indices: rows.into_iter().flatten().collect(),
    })
}

/// `out[i][j] = features[i] − features[graph.row(i)[j]]`, shape `[N, k, C]`.
pub fn edge_features<T: Real>(features: &Tensor<T>, graph: &KnnGraph) -> Result<Tensor<T>> {
    if features.ndim() != 2 || features.shape()[0] != graph.n() {
        return Err(Error::dim("edge_features", features.shape(), &[graph.n(), graph.k()]));
    }
    let c = features.shape()[1];
    let fd = features.data();
    let mut data = Vec::with_capacity(graph.n() * graph.k() * c);
    for i in 0..graph.n() {
        let center = &fd[i * c..(i + 1) * c];
        for &j in graph.row(i) {
            data.extend(center.iter().zip(&fd[j * c..(j + 1) * c]).map(|(&a, &b)| a - b));
        }
    }
    Tensor::new(vec![graph.n(), graph.k(), c], data)
}

/// Graphs for a batch of equally sized clouds, with indices into the
/// flattened `[B·N]` row space.
#[derive(Debug, Clone)]
pub struct BatchGraph {
    batch: usize,
    n: usize,
    k: usize,
    neighbors: Arc<[usize]>,
}

impl BatchGraph {
    pub fn new(graphs: &[KnnGraph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::Usage("empty graph batch".into()))?;
        let (n, k) = (first.n(), first.k());
        let mut neighbors = Vec::with_capacity(graphs.len() * n * k);
        for (b, g) in graphs.iter().enumerate() {
            if g.n() != n || g.k() != k {
                return Err(Error::dim("batch graph", &[n, k], &[g.n(), g.k()]));
            }
            neighbors.extend(g.indices().iter().map(|&j| b * n + j));
        }
        Ok(Self {
            batch: graphs.len(),
            n,
            k,
            neighbors: neighbors.into(),
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self) -> Arc<[usize]> {
        Arc::clone(&self.neighbors)
    }
}
