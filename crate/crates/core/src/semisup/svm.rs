use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce::FeatureMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmParams {
    pub c: f64,
    pub epochs: usize,
    /// Step size at epoch 1; epoch `t` uses `learning_rate / t`.
    pub learning_rate: f64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            epochs: 50,
            learning_rate: 0.1,
        }
    }
}

impl SvmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::InvalidConfig("SVM C must be positive".into()));
        }
        if self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("SVM epochs and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One-vs-rest linear margins. Classes absent from training score `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    pub num_classes: usize,
    pub dim: usize,
    /// `num_classes x dim`, zero rows for absent classes.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub present: Vec<bool>,
}

/// Full-batch subgradient descent on `0.5 |w|^2 + C * mean(hinge)` per class,
/// step `lr / t`, returning the average of all iterates.
///
/// Using the mean hinge makes the objective invariant to duplicating every
/// training point.
pub fn linear_svm_ovr(
    x: &FeatureMatrix,
    rows: &[usize],
    labels: &[usize],
    num_classes: usize,
    params: &SvmParams,
) -> Result<LinearSvm> {
    params.validate()?;
    if rows.len() != labels.len() {
        return Err(Error::shape("SVM labels", &[rows.len()], &[labels.len()]));
    }
    let mut present = vec![false; num_classes];
    for &c in labels {
        if c >= num_classes {
            return Err(Error::InvalidSeeds(format!("class {c} out of range")));
        }
        present[c] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidSeeds("SVM needs at least two classes".into()));
    }
    let d = x.cols;
    let n = rows.len() as f64;
    let mut weights = vec![0.0f64; num_classes * d];
    let mut bias = vec![0.0f64; num_classes];

    for class in (0..num_classes).filter(|&c| present[c]) {
        let mut w = vec![0.0f64; d];
        let mut b = 0.0f64;
        let mut w_avg = vec![0.0f64; d];
        let mut b_avg = 0.0f64;
        let mut grad = vec![0.0f64; d];
        for t in 1..=params.epochs {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0f64;
            for (&r, &label) in rows.iter().zip(labels) {
                let y = if label == class { 1.0 } else { -1.0 };
                let xi = x.row(r);
                let margin = y * (dot(&w, xi) + b);
                if margin < 1.0 {
                    for (g, v) in grad.iter_mut().zip(xi) {
                        *g -= y * v;
                    }
                    grad_b -= y;
                }
            }
            let lr = params.learning_rate / t as f64;
            let scale = params.c / n;
            for (wk, gk) in w.iter_mut().zip(&grad) {
                *wk -= lr * (*wk + scale * gk);
            }
            b -= lr * scale * grad_b;
            for (a, v) in w_avg.iter_mut().zip(&w) {
                *a += v;
            }
            b_avg += b;
        }
        let inv = 1.0 / params.epochs as f64;
        for (dst, v) in weights[class * d..(class + 1) * d].iter_mut().zip(&w_avg) {
            *dst = v * inv;
        }
        bias[class] = b_avg * inv;
    }
    Ok(LinearSvm {
        num_classes,
        dim: d,
        weights,
        bias,
        present,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearSvm {
    pub fn scores(&self, row: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| {
                if self.present[c] {
                    dot(&self.weights[c * self.dim..(c + 1) * self.dim], row) + self.bias[c]
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }

    /// Signed margins, `x.rows x num_classes`.
    pub fn predict(&self, x: &FeatureMatrix) -> Vec<Vec<f64>> {
        (0..x.rows).map(|i| self.scores(x.row(i))).collect()
    }
}

/// Softmax over margins; absent classes get zero mass.
pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
