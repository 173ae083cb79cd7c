use serde::{Deserialize, Serialize};

use super::{argmax_lowest, build_graph, AffinityGraph, PredictionSet, SeedSet};
use crate::error::{Error, Result};
use crate::reduce::FeatureMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpreadParams {
    /// Weight on the propagated term; `1 - alpha` pulls back to the seeds.
    pub alpha: f64,
    pub k_neighbors: usize,
    /// `None` selects gamma from the data (see [`build_graph`]).
    pub rbf_gamma: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SpreadParams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            k_neighbors: 7,
            rbf_gamma: None,
            max_iter: 1000,
            tol: 1e-6,
        }
    }
}

impl SpreadParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if self.k_neighbors == 0 {
            return Err(Error::InvalidConfig("k_neighbors must be >= 1".into()));
        }
        if let Some(g) = self.rbf_gamma {
            if !(g > 0.0) {
                return Err(Error::InvalidConfig("rbf_gamma must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpreadOutcome {
    pub predictions: PredictionSet,
    /// Final `F`, row-major `n x num_classes`.
    pub scores: Vec<f64>,
    pub iterations: usize,
}

pub fn label_spreading(
    x: &FeatureMatrix,
    seeds: &SeedSet,
    num_classes: usize,
    params: &SpreadParams,
) -> Result<PredictionSet> {
    params.validate()?;
    seeds.validate(x.rows, num_classes)?;
    let graph = build_graph(x, params)?;
    Ok(label_spreading_on_graph(&graph, seeds, num_classes, params)?.predictions)
}

/// Iterate `F <- alpha S F + (1 - alpha) Y` from `F = Y` until the largest
/// entry change is at most `tol`.
///
/// Rows that receive no mass (isolated nodes or seedless components) take
/// the seed-majority class with confidence 0.
pub fn label_spreading_on_graph(
    graph: &AffinityGraph,
    seeds: &SeedSet,
    num_classes: usize,
    params: &SpreadParams,
) -> Result<SpreadOutcome> {
    params.validate()?;
    let n = graph.len();
    seeds.validate(n, num_classes)?;
    let k = num_classes;
    let alpha = params.alpha;

    let mut y = vec![0.0f64; n * k];
    for (r, c) in seeds.iter() {
        y[r * k + c] = 1.0;
    }
    let mut f = y.clone();
    let mut next = vec![0.0f64; n * k];
    let mut iterations = 0;
    while iterations < params.max_iter {
        graph.propagate(&f, k, &mut next);
        let mut delta = 0.0f64;
        for idx in 0..n * k {
            let v = alpha * next[idx] + (1.0 - alpha) * y[idx];
            delta = delta.max((v - f[idx]).abs());
            next[idx] = v;
        }
        std::mem::swap(&mut f, &mut next);
        iterations += 1;
        if delta <= params.tol {
            break;
        }
    }

    let fallback = seeds.majority_class(num_classes);
    let mut labels = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for i in 0..n {
        let row = &f[i * k..(i + 1) * k];
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            let best = argmax_lowest(row.iter().copied());
            labels.push(best);
            confidence.push((row[best] / total).clamp(0.0, 1.0));
        } else {
            labels.push(fallback);
            confidence.push(0.0);
        }
    }
    let mut predictions = PredictionSet { labels, confidence };
    predictions.clamp_seeds(seeds);
    Ok(SpreadOutcome {
        predictions,
        scores: f,
        iterations,
    })
}
