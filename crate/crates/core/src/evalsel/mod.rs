//! Three-pool evaluation: pool carving, label budgets, metrics and
//! circuit selection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::ingest::{ClassIndex, Record, Split};

mod experiment;
mod report;
mod select;

pub use experiment::{
    evaluate_trial, run_experiment, BudgetOutcome, Candidate, CircuitSpace, EvalContext, ExperimentConfig,
    ExperimentResult, Target, TrialRecord,
};
pub use report::{
    write_breakdown_csv, write_plot_data, write_run_artifacts, write_selections_csv, write_summary_json,
    write_trials_csv, ReferenceScores, RunArtifacts, ARTIFACT_FILES,
};
pub use select::{
    assemble_class_specific_report, select_global, select_per_class, strategy_breakdown, Choice,
    ClassSpecificReport, StrategyBreakdown,
};

/// Disjoint id pools. `labels` holds the class of every id in any pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub val_ids: Vec<usize>,
    pub seedpool_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub labels: BTreeMap<usize, usize>,
}

impl SplitPlan {
    pub fn num_classes(&self) -> usize {
        self.labels.values().max().map_or(0, |&c| c + 1)
    }
}

/// Stratified validation carve-out from the train split.
///
/// Per class, `round_half_up(val_fraction * n)` ids (clamped to `[1, n-1]`)
/// go to validation and the rest to the seed pool.
pub fn carve_pools(records: &[Record], classes: &ClassIndex, val_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Split(format!(
            "val_fraction must be in (0,1), got {val_fraction}"
        )));
    }
    let mut labels = BTreeMap::new();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes.len()];
    let mut test_ids = Vec::new();
    for r in records {
        let c = classes
            .id(&r.class_name)
            .ok_or_else(|| Error::Split(format!("class `{}` not in the class index", r.class_name)))?;
        labels.insert(r.id, c);
        match r.split {
            Split::Train => per_class[c].push(r.id),
            Split::Test => test_ids.push(r.id),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_ids = Vec::new();
    let mut seedpool_ids = Vec::new();
    for (c, ids) in per_class.iter_mut().enumerate() {
        let n = ids.len();
        if n < 2 {
            return Err(Error::Split(format!(
                "class `{}` has {n} train samples; at least 2 are needed",
                classes.name(c)
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n_val = round_half_up(val_fraction * n as f64).clamp(1, n - 1);
        val_ids.extend_from_slice(&ids[..n_val]);
        seedpool_ids.extend_from_slice(&ids[n_val..]);
    }
    val_ids.sort_unstable();
    seedpool_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(SplitPlan {
        val_ids,
        seedpool_ids,
        test_ids,
        labels,
    })
}

fn round_half_up(x: f64) -> usize {
    // The epsilon absorbs representation error such as 0.4 * 5 = 2.0000000000000004.
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Seeds per class: absolute count or share of the class's seed pool.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    PerClass(usize),
    Fraction(f64),
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Budget::PerClass(0) => Err(Error::InvalidConfig("per-class budget must be >= 1".into())),
            Budget::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                Err(Error::InvalidConfig(format!("fractional budget must be in (0,1], got {f}")))
            }
            _ => Ok(()),
        }
    }

    /// Seeds drawn from a class with `available` seed-pool samples.
    pub fn seeds_for(&self, available: usize) -> usize {
        match *self {
            Budget::PerClass(n) => n.min(available),
            Budget::Fraction(f) => ((f * available as f64 - 1e-9).ceil().max(1.0) as usize).min(available),
        }
    }

    /// 5, 10 and 20 per class, then 5, 10, 15 and 100 percent.
    pub fn default_sweep() -> Vec<Budget> {
        vec![
            Budget::PerClass(5),
            Budget::PerClass(10),
            Budget::PerClass(20),
            Budget::Fraction(0.05),
            Budget::Fraction(0.10),
            Budget::Fraction(0.15),
            Budget::Fraction(1.0),
        ]
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Budget::PerClass(n) => write!(f, "{n}"),
            Budget::Fraction(x) => {
                let pct = x * 100.0;
                if (pct - pct.round()).abs() < 1e-9 {
                    write!(f, "{}%", pct.round() as u64)
                } else {
                    write!(f, "{pct}%")
                }
            }
        }
    }
}

impl FromStr for Budget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidConfig(format!("cannot parse budget `{s}` (use `5` or `10%`)"));
        let b = if let Some(p) = s.strip_suffix('%') {
            Budget::Fraction(p.trim().parse::<f64>().map_err(|_| bad())? / 100.0)
        } else {
            Budget::PerClass(s.parse().map_err(|_| bad())?)
        };
        b.validate()?;
        Ok(b)
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => {
                let b = Budget::PerClass(n);
                b.validate().map_err(serde::de::Error::custom)?;
                Ok(b)
            }
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Draw seed ids from the seed pool, independently per class.
pub fn draw_seeds(plan: &SplitPlan, budget: Budget, seed: u64) -> Result<BTreeMap<usize, usize>> {
    budget.validate()?;
    let num_classes = plan.num_classes();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for &id in &plan.seedpool_ids {
        per_class[plan.labels[&id]].push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (c, ids) in per_class.iter_mut().enumerate() {
        ids.sort_unstable();
        let m = budget.seeds_for(ids.len());
        if m < ids.len() {
            ids.shuffle(&mut rng);
        }
        for &id in &ids[..m] {
            out.insert(id, c);
        }
    }
    Ok(out)
}

/// Accuracy and per-class scores over one target pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub support: Vec<usize>,
}

impl MetricReport {
    /// From `confusion[truth][predicted]`. F1 is 0 when a class has no true
    /// and no predicted members.
    pub fn from_confusion(confusion: &[Vec<usize>]) -> Result<Self> {
        let k = confusion.len();
        if let Some(row) = confusion.iter().find(|r| r.len() != k) {
            return Err(Error::shape("confusion row", &[k], &[row.len()]));
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Evaluation("no samples to score".into()));
        }
        let mut per_class_f1 = Vec::with_capacity(k);
        let mut per_class_recall = Vec::with_capacity(k);
        let mut support = Vec::with_capacity(k);
        let mut correct = 0;
        for c in 0..k {
            let tp = confusion[c][c];
            let actual: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|r| r[c]).sum();
            correct += tp;
            support.push(actual);
            let denom = actual + predicted;
            per_class_f1.push(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 });
            per_class_recall.push(if actual == 0 { 0.0 } else { tp as f64 / actual as f64 });
        }
        Ok(Self {
            accuracy: correct as f64 / total as f64,
            macro_f1: per_class_f1.iter().sum::<f64>() / k as f64,
            per_class_f1,
            per_class_recall,
            support,
        })
    }

    /// Element-wise mean over repeats; supports must agree.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Evaluation("no reports to average".into()))?;
        if reports.iter().any(|r| r.support != first.support) {
            return Err(Error::Evaluation("cannot average reports over different pools".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let k = first.per_class_f1.len();
        Ok(Self {
            accuracy: avg(&|r| r.accuracy),
            macro_f1: avg(&|r| r.macro_f1),
            per_class_f1: (0..k).map(|c| avg(&|r| r.per_class_f1[c])).collect(),
            per_class_recall: (0..k).map(|c| avg(&|r| r.per_class_recall[c])).collect(),
            support: first.support.clone(),
        })
    }
}

/// Score `predicted[k]` against `truth[k]` over `num_classes` classes.
pub fn compute_metrics(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<MetricReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} samples",
            predicted.len(),
            truth.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Evaluation(format!("label out of range ({t} -> {p})")));
        }
        confusion[t][p] += 1;
    }
    MetricReport::from_confusion(&confusion)
}
