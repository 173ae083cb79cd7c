use rayon::prelude::*;

use super::{PredictionSet, SeedSet};
use crate::error::Result;
use crate::reduce::{squared_distance, FeatureMatrix};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnnVote {
    pub label: usize,
    /// Fraction of the `k` neighbours voting for `label`.
    pub confidence: f64,
}

/// Majority vote of the `k` nearest labelled rows (Euclidean).
///
/// Neighbours are ordered by distance, then row index. A vote tie goes to
/// the tied class owning the nearest neighbour.
pub fn knn_vote(
    x: &FeatureMatrix,
    labeled: &[(usize, usize)],
    query: &[f64],
    k: usize,
    num_classes: usize,
) -> KnnVote {
    let k = k.min(labeled.len()).max(1);
    let mut cand: Vec<(f64, usize, usize)> = labeled
        .iter()
        .map(|&(r, c)| (squared_distance(x.row(r), query), r, c))
        .collect();
    let order = |a: &(f64, usize, usize), b: &(f64, usize, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_by(order);

    let mut counts = vec![0usize; num_classes];
    for &(_, _, c) in &cand {
        counts[c] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0);
    let label = cand
        .iter()
        .map(|&(_, _, c)| c)
        .find(|&c| counts[c] == top)
        .unwrap_or(0);
    KnnVote {
        label,
        confidence: top as f64 / k as f64,
    }
}

pub(crate) fn effective_k(k: usize, available: usize) -> usize {
    if k > available {
        log::warn!("k = {k} exceeds the {available} labelled samples; clipping");
        available
    } else {
        k
    }
}

/// Supervised k-NN using only the seeds.
pub fn knn_baseline(
    x: &FeatureMatrix,
    seeds: &SeedSet,
    num_classes: usize,
    k: usize,
) -> Result<PredictionSet> {
    seeds.validate(x.rows, num_classes)?;
    let labeled: Vec<(usize, usize)> = seeds.iter().collect();
    let k = effective_k(k.max(1), labeled.len());
    let votes: Vec<KnnVote> = (0..x.rows)
        .into_par_iter()
        .map(|i| knn_vote(x, &labeled, x.row(i), k, num_classes))
        .collect();
    let mut out = PredictionSet {
        labels: votes.iter().map(|v| v.label).collect(),
        confidence: votes.iter().map(|v| v.confidence).collect(),
    };
    out.clamp_seeds(seeds);
    Ok(out)
}
