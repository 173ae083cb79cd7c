use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::knn::{effective_k, knn_vote};
use super::svm::{linear_svm_ovr, softmax, LinearSvm, SvmParams};
use super::{argmax_lowest, PredictionSet, SeedSet};
use crate::error::{Error, Result};
use crate::reduce::FeatureMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainParams {
    pub confidence_threshold: f64,
    pub max_rounds: usize,
}

impl Default for SelfTrainParams {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.8,
            max_rounds: 10,
        }
    }
}

impl SelfTrainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_threshold > 0.5 && self.confidence_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence_threshold must be in (0.5,1], got {}",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfTrainOutcome {
    pub predictions: PredictionSet,
    /// Rows promoted to pseudo-labels in each completed round.
    pub promoted_per_round: Vec<usize>,
}

/// Generic loop: fit on the labelled pool, predict the rest, promote every
/// prediction at or above the threshold, repeat. Promoted rows keep their
/// pseudo-labels; rows never promoted take the last round's prediction.
fn self_train<F>(
    x: &FeatureMatrix,
    seeds: &SeedSet,
    params: &SelfTrainParams,
    predict: F,
) -> Result<SelfTrainOutcome>
where
    F: Fn(&[(usize, usize)], &[usize]) -> Result<Vec<(usize, f64)>>,
{
    params.validate()?;
    let mut labels = vec![0usize; x.rows];
    let mut confidence = vec![0.0f64; x.rows];
    let mut labeled: Vec<(usize, usize)> = seeds.iter().collect();
    let mut unlabeled: Vec<usize> = (0..x.rows).filter(|&r| seeds.get(r).is_none()).collect();
    let mut promoted_per_round = Vec::new();
    for _ in 0..params.max_rounds.max(1) {
        if unlabeled.is_empty() {
            break;
        }
        let preds = predict(&labeled, &unlabeled)?;
        let mut keep = Vec::with_capacity(unlabeled.len());
        for (&r, &(label, conf)) in unlabeled.iter().zip(&preds) {
            labels[r] = label;
            confidence[r] = conf.clamp(0.0, 1.0);
            if conf >= params.confidence_threshold {
                labeled.push((r, label));
            } else {
                keep.push(r);
            }
        }
        let promoted = unlabeled.len() - keep.len();
        unlabeled = keep;
        promoted_per_round.push(promoted);
        if promoted == 0 {
            break;
        }
    }
    let mut predictions = PredictionSet { labels, confidence };
    predictions.clamp_seeds(seeds);
    Ok(SelfTrainOutcome {
        predictions,
        promoted_per_round,
    })
}

pub fn self_train_knn(
    x: &FeatureMatrix,
    seeds: &SeedSet,
    num_classes: usize,
    k: usize,
    params: &SelfTrainParams,
) -> Result<SelfTrainOutcome> {
    seeds.validate(x.rows, num_classes)?;
    // Warn once; the vote itself clips k to the current pool size.
    effective_k(k.max(1), seeds.len());
    let k = k.max(1);
    self_train(x, seeds, params, |labeled, queries| {
        Ok(queries
            .par_iter()
            .map(|&q| {
                let v = knn_vote(x, labeled, x.row(q), k, num_classes);
                (v.label, v.confidence)
            })
            .collect())
    })
}

/// With a single seeded class there is nothing to separate: every row gets
/// that class.
pub fn self_train_svm(
    x: &FeatureMatrix,
    seeds: &SeedSet,
    num_classes: usize,
    svm: &SvmParams,
    params: &SelfTrainParams,
) -> Result<SelfTrainOutcome> {
    seeds.validate(x.rows, num_classes)?;
    svm.validate()?;
    self_train(x, seeds, params, |labeled, queries| {
        let first = labeled[0].1;
        if labeled.iter().all(|&(_, c)| c == first) {
            return Ok(vec![(first, 1.0); queries.len()]);
        }
        let (rows, ys): (Vec<usize>, Vec<usize>) = labeled.iter().copied().unzip();
        let model: LinearSvm = linear_svm_ovr(x, &rows, &ys, num_classes, svm)?;
        Ok(queries
            .iter()
            .map(|&q| {
                let scores = model.scores(x.row(q));
                let label = argmax_lowest(scores.iter().copied());
                (label, softmax(&scores)[label])
            })
            .collect())
    })
}
