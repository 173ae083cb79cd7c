use serde::{Deserialize, Serialize};

use super::{PredictionSet, SeedSet};
use crate::error::{Error, Result};
use crate::reduce::{squared_distance, FeatureMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmeansParams {
    pub max_iter: usize,
    /// Stop once no centroid moves further than this (Euclidean).
    pub tol: f64,
}

impl Default for KmeansParams {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmeansOutcome {
    pub predictions: PredictionSet,
    /// Sum of squared distances to the assigned centroid, one entry per assignment step.
    pub objective_history: Vec<f64>,
    /// Centroid updates computed, including the one that triggered the stop.
    pub iterations: usize,
    pub centroids: Vec<Vec<f64>>,
}

/// Nearest centroid per row, plus `1 - d1/d2` with Euclidean distances.
fn assign(x: &FeatureMatrix, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, f64) {
    let mut labels = Vec::with_capacity(x.rows);
    let mut confidence = Vec::with_capacity(x.rows);
    let mut objective = 0.0;
    for i in 0..x.rows {
        let row = x.row(i);
        let mut best = (f64::INFINITY, 0usize);
        let mut second = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let d = squared_distance(row, centroid);
            if d < best.0 {
                second = best.0;
                best = (d, c);
            } else if d < second {
                second = d;
            }
        }
        objective += best.0;
        labels.push(best.1);
        let conf = if second.is_finite() && second > 0.0 {
            1.0 - (best.0 / second).sqrt()
        } else {
            1.0
        };
        confidence.push(conf.clamp(0.0, 1.0));
    }
    (labels, confidence, objective)
}

/// Lloyd iterations with cluster `c` initialised at the mean of the class-`c`
/// seeds, so the cluster-to-class mapping is fixed.
///
/// The returned labels are the assignment against the final centroids seen
/// before the stopping update; with a huge `tol` that is the nearest
/// seed-mean assignment.
pub fn seeded_kmeans(
    x: &FeatureMatrix,
    seeds: &SeedSet,
    num_classes: usize,
    params: &KmeansParams,
) -> Result<KmeansOutcome> {
    seeds.validate(x.rows, num_classes)?;
    if !(params.tol >= 0.0) {
        return Err(Error::InvalidConfig("kmeans tol must be non-negative".into()));
    }
    let d = x.cols;
    let mut centroids = vec![vec![0.0f64; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (r, c) in seeds.iter() {
        counts[c] += 1;
        for (acc, v) in centroids[c].iter_mut().zip(x.row(r)) {
            *acc += v;
        }
    }
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidSeeds(format!("class {missing} has no seeds")));
    }
    for (centroid, &n) in centroids.iter_mut().zip(&counts) {
        centroid.iter_mut().for_each(|v| *v /= n as f64);
    }

    let mut objective_history = Vec::new();
    let mut iterations = 0;
    let (mut labels, mut confidence, objective) = assign(x, &centroids);
    objective_history.push(objective);
    while iterations < params.max_iter {
        let mut sums = vec![vec![0.0f64; d]; num_classes];
        let mut sizes = vec![0usize; num_classes];
        for (i, &c) in labels.iter().enumerate() {
            sizes[c] += 1;
            for (acc, v) in sums[c].iter_mut().zip(x.row(i)) {
                *acc += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..num_classes {
            if sizes[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|v| v / sizes[c] as f64).collect();
            shift = shift.max(squared_distance(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        iterations += 1;
        if shift <= params.tol {
            break;
        }
        let (l, conf, obj) = assign(x, &centroids);
        labels = l;
        confidence = conf;
        objective_history.push(obj);
    }

    let mut predictions = PredictionSet { labels, confidence };
    predictions.clamp_seeds(seeds);
    Ok(KmeansOutcome {
        predictions,
        objective_history,
        iterations,
        centroids,
    })
}
