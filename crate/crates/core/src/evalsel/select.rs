use std::cmp::Ordering;

use serde::Serialize;

use super::experiment::Candidate;
use crate::backbone::CircuitSpec;
use crate::error::{Error, Result};
use crate::semisup::Method;

/// A selected `(circuit, method)` with the validation score that won.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Choice {
    pub circuit: CircuitSpec,
    pub method: Method,
    pub val_score: f64,
}

/// Tie order: Standard first, then shorter span, lower entry layer, method name.
fn tie_key(circuit: &CircuitSpec, method: Method) -> (bool, usize, usize, &'static str) {
    let entry = circuit.bounds().map_or(0, |(i, _)| i);
    (!circuit.is_standard(), circuit.span(), entry, method.name())
}

fn prefer(score_a: f64, a: &Candidate, score_b: f64, b: &Candidate) -> Ordering {
    score_a
        .total_cmp(&score_b)
        .reverse()
        .then_with(|| tie_key(&a.circuit, a.method).cmp(&tie_key(&b.circuit, b.method)))
}

fn best_by<F: Fn(&Candidate) -> f64>(candidates: &[Candidate], score: F) -> Result<Choice> {
    let best = candidates
        .iter()
        .min_by(|a, b| prefer(score(a), a, score(b), b))
        .ok_or_else(|| Error::Evaluation("no candidates to select from".into()))?;
    Ok(Choice {
        circuit: best.circuit,
        method: best.method,
        val_score: score(best),
    })
}

/// Highest validation macro F1.
pub fn select_global(candidates: &[Candidate]) -> Result<Choice> {
    best_by(candidates, |c| c.val.macro_f1)
}

/// Highest validation F1 for each class independently.
pub fn select_per_class(candidates: &[Candidate], num_classes: usize) -> Result<Vec<Choice>> {
    (0..num_classes)
        .map(|k| best_by(candidates, |c| c.val.per_class_f1[k]))
        .collect()
}

/// Test-set scores where each class is read off its own selected configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassSpecificReport {
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    /// Support-weighted mean of per-class recall.
    pub accuracy: f64,
}

pub fn assemble_class_specific_report(candidates: &[Candidate], choices: &[Choice]) -> Result<ClassSpecificReport> {
    let mut per_class_f1 = Vec::with_capacity(choices.len());
    let mut hits = 0.0;
    let mut total = 0usize;
    for (k, choice) in choices.iter().enumerate() {
        let cand = candidates
            .iter()
            .find(|c| c.circuit == choice.circuit && c.method == choice.method)
            .ok_or_else(|| {
                Error::Evaluation(format!(
                    "no test report for circuit {} with {}",
                    choice.circuit, choice.method
                ))
            })?;
        per_class_f1.push(cand.test.per_class_f1[k]);
        hits += cand.test.per_class_recall[k] * cand.test.support[k] as f64;
        total += cand.test.support[k];
    }
    let macro_f1 = if per_class_f1.is_empty() {
        0.0
    } else {
        per_class_f1.iter().sum::<f64>() / per_class_f1.len() as f64
    };
    Ok(ClassSpecificReport {
        per_class_f1,
        macro_f1,
        accuracy: if total == 0 { 0.0 } else { hits / total as f64 },
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StrategyBreakdown {
    pub baseline_best: usize,
    pub global_best: usize,
    pub unique_best: usize,
}

/// Classify each per-class winner: Standard circuit, the global winner's
/// circuit, or something else (checked in that order).
pub fn strategy_breakdown(per_class: &[Choice], global: &Choice) -> StrategyBreakdown {
    let mut out = StrategyBreakdown::default();
    for choice in per_class {
        if choice.circuit.is_standard() {
            out.baseline_best += 1;
        } else if choice.circuit == global.circuit {
            out.global_best += 1;
        } else {
            out.unique_best += 1;
        }
    }
    out
}
