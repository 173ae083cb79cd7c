use std::collections::BTreeMap;

use rayon::prelude::*;

use super::SpreadParams;
use crate::error::{Error, Result};
use crate::reduce::{squared_distance, FeatureMatrix};

/// Sparse symmetric affinity `W` (zero diagonal) with the normalised
/// propagation matrix `S = D^-1/2 W D^-1/2` stored alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    normalized: Vec<f64>,
    degree: Vec<f64>,
}

impl AffinityGraph {
    /// Build from undirected edges `(i, j, w)`; duplicate pairs keep the last weight.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut sym: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidConfig(format!("edge ({i},{j}) outside {n} nodes")));
            }
            if !(w >= 0.0) {
                return Err(Error::InvalidConfig(format!("edge ({i},{j}) has weight {w}")));
            }
            if i == j {
                continue;
            }
            sym.insert((i, j), w);
            sym.insert((j, i), w);
        }
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(sym.len());
        let mut weights = Vec::with_capacity(sym.len());
        for (&(i, j), &w) in &sym {
            row_ptr[i + 1] += 1;
            cols.push(j);
            weights.push(w);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let degree: Vec<f64> = (0..n)
            .map(|i| weights[row_ptr[i]..row_ptr[i + 1]].iter().sum())
            .collect();
        let inv_sqrt: Vec<f64> = degree
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        let mut normalized = Vec::with_capacity(weights.len());
        for i in 0..n {
            for e in row_ptr[i]..row_ptr[i + 1] {
                normalized.push(inv_sqrt[i] * weights[e] * inv_sqrt[cols[e]]);
            }
        }
        Ok(Self {
            n,
            row_ptr,
            cols,
            weights,
            normalized,
            degree,
        })
    }

    /// From a dense symmetric matrix; the diagonal is ignored.
    pub fn from_dense(w: &[Vec<f64>]) -> Result<Self> {
        let n = w.len();
        let mut edges = Vec::new();
        for i in 0..n {
            if w[i].len() != n {
                return Err(Error::shape("dense affinity row", &[n], &[w[i].len()]));
            }
            for j in i + 1..n {
                if (w[i][j] - w[j][i]).abs() > 1e-12 {
                    return Err(Error::InvalidConfig(format!("affinity not symmetric at ({i},{j})")));
                }
                if w[i][j] != 0.0 {
                    edges.push((i, j, w[i][j]));
                }
            }
        }
        Self::from_edges(n, edges)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.degree[i]
    }

    /// Neighbours of `i` with their `W` and `S` entries.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1])
            .map(move |e| (self.cols[e], self.weights[e], self.normalized[e]))
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.neighbors(i)
            .find(|&(c, _, _)| c == j)
            .map_or(0.0, |(_, w, _)| w)
    }

    pub fn dense_weights(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, w, _) in self.neighbors(i) {
                row[j] = w;
            }
        }
        out
    }

    pub fn dense_normalized(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, _, s) in self.neighbors(i) {
                row[j] = s;
            }
        }
        out
    }

    /// `out = S * f` for a row-major `n x k` matrix.
    pub(crate) fn propagate(&self, f: &[f64], k: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let dst = &mut out[i * k..(i + 1) * k];
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                let s = self.normalized[e];
                let src = &f[self.cols[e] * k..(self.cols[e] + 1) * k];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += s * v;
                }
            }
        }
    }
}

/// Symmetric k-NN graph (union of directed neighbour lists) with RBF weights
/// `exp(-gamma * d^2)`. The automatic `gamma` is `1 / (2 * median)` of the
/// nonzero squared k-NN edge lengths.
pub fn build_graph(x: &FeatureMatrix, params: &SpreadParams) -> Result<AffinityGraph> {
    let n = x.rows;
    if n < 2 {
        return Err(Error::InvalidConfig(format!("graph needs at least 2 points, got {n}")));
    }
    let k = params.k_neighbors.clamp(1, n - 1);

    let neighbor_lists: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(x.row(i), x.row(j)), j))
                .collect();
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().map(|(d, j)| (j, d)).collect()
        })
        .collect();

    let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, list) in neighbor_lists.iter().enumerate() {
        for &(j, d2) in list {
            pairs.insert((i.min(j), i.max(j)), d2);
        }
    }

    let gamma = match params.rbf_gamma {
        Some(g) => g,
        None => {
            let mut nz: Vec<f64> = pairs.values().copied().filter(|&d| d > 0.0).collect();
            if nz.is_empty() {
                1.0
            } else {
                nz.sort_by(f64::total_cmp);
                let m = nz.len();
                let median = if m % 2 == 1 {
                    nz[m / 2]
                } else {
                    0.5 * (nz[m / 2 - 1] + nz[m / 2])
                };
                1.0 / (2.0 * median)
            }
        }
    };
    AffinityGraph::from_edges(
        n,
        pairs
            .into_iter()
            .map(|((i, j), d2)| (i, j, (-gamma * d2).exp())),
    )
}
