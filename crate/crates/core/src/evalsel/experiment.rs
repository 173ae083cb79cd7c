use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use super::select::{
    assemble_class_specific_report, select_global, select_per_class, strategy_breakdown, Choice,
    ClassSpecificReport, StrategyBreakdown,
};
use super::{carve_pools, compute_metrics, draw_seeds, Budget, MetricReport, SplitPlan};
use crate::backbone::CircuitSpec;
use crate::error::{Error, Result};
use crate::ingest::{ClassIndex, DatasetManifest, EmbeddingStore};
use crate::reduce::{fit_pca, FeatureMatrix};
use crate::semisup::{build_graph, classify, AffinityGraph, ClassifierParams, Method, SeedSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Val,
    Test,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Val => "val",
            Target::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub pca_out_dim: usize,
    pub methods: Vec<Method>,
    pub budgets: Vec<Budget>,
    pub repeat_seeds: Vec<u64>,
    pub val_fraction: f64,
    pub split_seed: u64,
    /// Fit PCA on the train split only instead of every embedding.
    pub inductive_pca: bool,
    pub classifier: ClassifierParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pca_out_dim: 128,
            methods: Method::ALL.to_vec(),
            budgets: Budget::default_sweep(),
            repeat_seeds: vec![0, 1, 2],
            val_fraction: 0.4,
            split_seed: 0,
            inductive_pca: false,
            classifier: ClassifierParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pca_out_dim == 0 {
            return Err(Error::InvalidConfig("pca_out_dim must be >= 1".into()));
        }
        if self.methods.is_empty() || self.budgets.is_empty() || self.repeat_seeds.is_empty() {
            return Err(Error::InvalidConfig("methods, budgets and repeat_seeds must be nonempty".into()));
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return Err(Error::InvalidConfig("methods contain duplicates".into()));
        }
        for b in &self.budgets {
            b.validate()?;
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        self.classifier.validate()
    }
}

/// Pools and labels shared by every circuit, in a common row order.
#[derive(Clone, Debug)]
pub struct EvalContext {
    pub plan: SplitPlan,
    /// Record id of each feature row.
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub params: ClassifierParams,
    row_of: BTreeMap<usize, usize>,
    val_rows: Vec<usize>,
    test_rows: Vec<usize>,
}

impl EvalContext {
    pub fn new(plan: SplitPlan, ids: Vec<usize>, num_classes: usize, params: ClassifierParams) -> Result<Self> {
        let row_of: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        let lookup = |id: &usize| {
            row_of
                .get(id)
                .copied()
                .ok_or_else(|| Error::Evaluation(format!("pool id {id} has no feature row")))
        };
        let val_rows = plan.val_ids.iter().map(lookup).collect::<Result<Vec<_>>>()?;
        let test_rows = plan.test_ids.iter().map(lookup).collect::<Result<Vec<_>>>()?;
        for id in &plan.seedpool_ids {
            lookup(id)?;
        }
        let labels = ids
            .iter()
            .map(|id| {
                plan.labels
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Evaluation(format!("row id {id} is not in any pool")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            plan,
            ids,
            labels,
            num_classes,
            params,
            row_of,
            val_rows,
            test_rows,
        })
    }

    pub fn rows(&self, target: Target) -> &[usize] {
        match target {
            Target::Val => &self.val_rows,
            Target::Test => &self.test_rows,
        }
    }

    fn seeds(&self, budget: Budget, repeat_seed: u64) -> Result<SeedSet> {
        let drawn = draw_seeds(&self.plan, budget, repeat_seed)?;
        Ok(SeedSet::from_pairs(drawn.into_iter().map(|(id, c)| (self.row_of[&id], c))))
    }

    fn score(&self, predicted: &[usize], target: Target) -> Result<MetricReport> {
        let rows = self.rows(target);
        let p: Vec<usize> = rows.iter().map(|&r| predicted[r]).collect();
        let t: Vec<usize> = rows.iter().map(|&r| self.labels[r]).collect();
        compute_metrics(&p, &t, self.num_classes)
    }
}

/// One circuit's reduced feature space.
#[derive(Clone, Debug)]
pub struct CircuitSpace {
    pub circuit: CircuitSpec,
    pub features: FeatureMatrix,
    /// Prebuilt label-spreading graph, shared by all trials on this circuit.
    pub graph: Option<AffinityGraph>,
}

impl CircuitSpace {
    /// Align `store` to the context rows, fit PCA and optionally build the graph.
    pub fn prepare(
        store: &EmbeddingStore,
        ctx: &EvalContext,
        out_dim: usize,
        inductive: bool,
        with_graph: bool,
    ) -> Result<(Self, Vec<String>)> {
        let store_row: BTreeMap<usize, usize> = store.ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let mut data = Vec::with_capacity(ctx.ids.len() * store.dim);
        for id in &ctx.ids {
            let k = store_row.get(id).ok_or_else(|| {
                Error::Evaluation(format!("store for circuit {} lacks id {id}", store.key.circuit))
            })?;
            data.extend(store.row(*k).iter().map(|&v| v as f64));
        }
        let x = FeatureMatrix::new(ctx.ids.len(), store.dim, data)?;
        let fit_rows: Vec<usize> = if inductive {
            let train: BTreeSet<usize> = ctx.plan.val_ids.iter().chain(&ctx.plan.seedpool_ids).copied().collect();
            (0..x.rows).filter(|&r| train.contains(&ctx.ids[r])).collect()
        } else {
            (0..x.rows).collect()
        };
        let mut warnings = Vec::new();
        let max_dim = (fit_rows.len().saturating_sub(1)).min(x.cols);
        let dim = out_dim.min(max_dim);
        if dim < out_dim {
            warnings.push(format!(
                "circuit {}: PCA dimension clipped from {out_dim} to {dim}",
                store.key.circuit
            ));
        }
        let pca = fit_pca(&x.select_rows(&fit_rows), dim)?;
        let features = pca.transform(&x)?;
        let graph = if with_graph {
            Some(build_graph(&features, &ctx.params.spreading)?)
        } else {
            None
        };
        Ok((
            Self {
                circuit: store.key.circuit,
                features,
                graph,
            },
            warnings,
        ))
    }
}

/// Train `method` on seeds drawn for `(budget, repeat_seed)` and score the
/// validation and test pools from the same predictions.
pub fn evaluate_trial(
    space: &CircuitSpace,
    ctx: &EvalContext,
    method: Method,
    budget: Budget,
    repeat_seed: u64,
) -> Result<(MetricReport, MetricReport)> {
    let seeds = ctx.seeds(budget, repeat_seed)?;
    let pred = classify(
        method,
        &space.features,
        &seeds,
        ctx.num_classes,
        &ctx.params,
        space.graph.as_ref(),
    )?;
    Ok((ctx.score(&pred.labels, Target::Val)?, ctx.score(&pred.labels, Target::Test)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialRecord {
    pub budget: Budget,
    pub circuit: CircuitSpec,
    pub method: Method,
    pub repeat_seed: u64,
    pub target: Target,
    pub report: MetricReport,
}

/// Repeat-averaged scores of one `(circuit, method)` at one budget.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub circuit: CircuitSpec,
    pub method: Method,
    pub val: MetricReport,
    pub test: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetOutcome {
    pub budget: Budget,
    pub candidates: Vec<Candidate>,
    /// Best Standard configuration by validation macro F1.
    pub baseline: Choice,
    pub baseline_test: MetricReport,
    pub global: Choice,
    pub global_test: MetricReport,
    pub class_specific: Vec<Choice>,
    pub class_specific_test: ClassSpecificReport,
    /// Mean of the per-class validation winners' scores.
    pub class_specific_val_macro: f64,
    /// Per-class winners restricted to the Standard circuit.
    pub baseline_per_class: Vec<Choice>,
    pub baseline_per_class_test: ClassSpecificReport,
    pub breakdown: StrategyBreakdown,
}

impl BudgetOutcome {
    pub fn candidate(&self, circuit: CircuitSpec, method: Method) -> Option<&Candidate> {
        self.candidates
            .iter()
            .find(|c| c.circuit == circuit && c.method == method)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub classes: Vec<String>,
    pub circuits: Vec<CircuitSpec>,
    pub methods: Vec<Method>,
    pub plan: SplitPlan,
    pub trials: Vec<TrialRecord>,
    pub budgets: Vec<BudgetOutcome>,
    pub warnings: Vec<String>,
}

/// Full sweep over `stores` (one per circuit, Standard included) for every
/// budget, method and repeat seed, followed by selection.
///
/// Rows present in the manifest but missing from any store are dropped from
/// every pool so all circuits see the same samples.
pub fn run_experiment(
    manifest: &DatasetManifest,
    classes: &ClassIndex,
    stores: &[EmbeddingStore],
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let circuits: Vec<CircuitSpec> = stores.iter().map(|s| s.key.circuit).collect();
    if circuits.iter().collect::<BTreeSet<_>>().len() != circuits.len() {
        return Err(Error::InvalidConfig("duplicate circuit among embedding stores".into()));
    }
    if !circuits.contains(&CircuitSpec::Standard) {
        return Err(Error::InvalidConfig("the standard circuit must be among the candidates".into()));
    }

    let mut warnings = Vec::new();
    let mut common: BTreeSet<usize> = manifest.records.iter().map(|r| r.id).collect();
    for s in stores {
        let ids: BTreeSet<usize> = s.ids.iter().copied().collect();
        common = common.intersection(&ids).copied().collect();
    }
    let dropped = manifest.records.len() - common.len();
    if dropped > 0 {
        warnings.push(format!("{dropped} records lack an embedding in some circuit and were dropped"));
    }
    let records: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| common.contains(&r.id))
        .cloned()
        .collect();
    let plan = carve_pools(&records, classes, cfg.val_fraction, cfg.split_seed)?;
    let ids: Vec<usize> = common.into_iter().collect();
    let ctx = EvalContext::new(plan, ids, classes.len(), cfg.classifier.clone())?;

    let with_graph = cfg.methods.contains(&Method::LabelSpreading);
    let prepared: Vec<(CircuitSpace, Vec<String>)> = stores
        .par_iter()
        .map(|s| CircuitSpace::prepare(s, &ctx, cfg.pca_out_dim, cfg.inductive_pca, with_graph))
        .collect::<Result<_>>()?;
    let mut spaces = Vec::with_capacity(prepared.len());
    for (space, w) in prepared {
        warnings.extend(w);
        spaces.push(space);
    }

    let mut jobs = Vec::new();
    for b in 0..cfg.budgets.len() {
        for s in 0..spaces.len() {
            for &method in &cfg.methods {
                for &seed in &cfg.repeat_seeds {
                    jobs.push((b, s, method, seed));
                }
            }
        }
    }
    let scored: Vec<(MetricReport, MetricReport)> = jobs
        .par_iter()
        .map(|&(b, s, method, seed)| evaluate_trial(&spaces[s], &ctx, method, cfg.budgets[b], seed))
        .collect::<Result<_>>()?;

    let mut trials = Vec::with_capacity(2 * jobs.len());
    for (&(b, s, method, seed), (val, test)) in jobs.iter().zip(&scored) {
        for (target, report) in [(Target::Val, val), (Target::Test, test)] {
            trials.push(TrialRecord {
                budget: cfg.budgets[b],
                circuit: spaces[s].circuit,
                method,
                repeat_seed: seed,
                target,
                report: report.clone(),
            });
        }
    }

    let repeats = cfg.repeat_seeds.len();
    let per_budget = spaces.len() * cfg.methods.len() * repeats;
    let mut budgets = Vec::with_capacity(cfg.budgets.len());
    for (b, &budget) in cfg.budgets.iter().enumerate() {
        let block = &scored[b * per_budget..(b + 1) * per_budget];
        let mut candidates = Vec::with_capacity(spaces.len() * cfg.methods.len());
        for (k, chunk) in block.chunks(repeats).enumerate() {
            let vals: Vec<MetricReport> = chunk.iter().map(|p| p.0.clone()).collect();
            let tests: Vec<MetricReport> = chunk.iter().map(|p| p.1.clone()).collect();
            candidates.push(Candidate {
                circuit: spaces[k / cfg.methods.len()].circuit,
                method: cfg.methods[k % cfg.methods.len()],
                val: MetricReport::mean(&vals)?,
                test: MetricReport::mean(&tests)?,
            });
        }
        budgets.push(summarize_budget(budget, candidates, classes.len())?);
    }

    Ok(ExperimentResult {
        classes: classes.names().to_vec(),
        circuits,
        methods: cfg.methods.clone(),
        plan: ctx.plan,
        trials,
        budgets,
        warnings,
    })
}

fn summarize_budget(budget: Budget, candidates: Vec<Candidate>, num_classes: usize) -> Result<BudgetOutcome> {
    let standard: Vec<Candidate> = candidates
        .iter()
        .filter(|c| c.circuit.is_standard())
        .cloned()
        .collect();
    let test_of = |choice: &Choice| -> Result<MetricReport> {
        candidates
            .iter()
            .find(|c| c.circuit == choice.circuit && c.method == choice.method)
            .map(|c| c.test.clone())
            .ok_or_else(|| Error::Evaluation("selected candidate vanished".into()))
    };
    let baseline = select_global(&standard)?;
    let global = select_global(&candidates)?;
    let class_specific = select_per_class(&candidates, num_classes)?;
    let baseline_per_class = select_per_class(&standard, num_classes)?;
    let class_specific_val_macro = if num_classes == 0 {
        0.0
    } else {
        class_specific.iter().map(|c| c.val_score).sum::<f64>() / num_classes as f64
    };
    Ok(BudgetOutcome {
        budget,
        baseline_test: test_of(&baseline)?,
        global_test: test_of(&global)?,
        class_specific_test: assemble_class_specific_report(&candidates, &class_specific)?,
        baseline_per_class_test: assemble_class_specific_report(&standard, &baseline_per_class)?,
        breakdown: strategy_breakdown(&class_specific, &global),
        baseline,
        global,
        class_specific,
        class_specific_val_macro,
        baseline_per_class,
        candidates,
    })
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            pca_out_dim: 6,
            budgets: vec![Budget::PerClass(2), Budget::Fraction(1.0)],
            repeat_seeds: vec![0, 1],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn runs_and_is_deterministic() {
        let (m, classes) = manifest(3, 12, 6);
        let stores = vec![
            blob_store(&m, &classes, CircuitSpec::Standard, &[1.0, 1.0, 1.0], 8, 1),
            blob_store(&m, &classes, CircuitSpec::duplicated(0, 1), &[1.5, 0.5, 1.0], 8, 2),
        ];
        let cfg = small_config();
        let a = run_experiment(&m, &classes, &stores, &cfg).unwrap();
        let b = run_experiment(&m, &classes, &stores, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials.len(), 2 * 2 * 5 * 2 * 2);
        assert_eq!(a.budgets.len(), 2);
        for out in &a.budgets {
            assert_eq!(out.candidates.len(), 2 * 5);
            assert!(out.baseline.circuit.is_standard());
            assert!(out.global.val_score >= out.baseline.val_score);
            assert!(out.class_specific_val_macro >= out.global.val_score - 1e-12);
            assert!(out.global_test.macro_f1 > 1.0 / 3.0, "{}", out.global_test.macro_f1);
        }
        assert!(a.warnings.is_empty(), "{:?}", a.warnings);
    }

    #[test]
    fn repeat_average_matches_manual_mean() {
        let (m, classes) = manifest(2, 10, 5);
        let stores = vec![blob_store(&m, &classes, CircuitSpec::Standard, &[1.0, 1.0], 5, 3)];
        let cfg = ExperimentConfig {
            pca_out_dim: 4,
            methods: vec![Method::KnnBaseline],
            budgets: vec![Budget::PerClass(2)],
            repeat_seeds: vec![0, 1, 2],
            ..ExperimentConfig::default()
        };
        let res = run_experiment(&m, &classes, &stores, &cfg).unwrap();
        let manual: f64 = res
            .trials
            .iter()
            .filter(|t| t.target == Target::Test)
            .map(|t| t.report.macro_f1)
            .sum::<f64>()
            / 3.0;
        assert!((res.budgets[0].candidates[0].test.macro_f1 - manual).abs() < 1e-15);
    }

    #[test]
    fn requires_standard_circuit() {
        let (m, classes) = manifest(2, 6, 2);
        let stores = vec![blob_store(&m, &classes, CircuitSpec::duplicated(0, 1), &[1.0, 1.0], 4, 0)];
        assert!(matches!(
            run_experiment(&m, &classes, &stores, &small_config()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn missing_rows_are_dropped_everywhere() {
        let (m, classes) = manifest(2, 8, 3);
        let full = blob_store(&m, &classes, CircuitSpec::Standard, &[1.0, 1.0], 4, 0);
        let mut partial = blob_store(&m, &classes, CircuitSpec::duplicated(0, 1), &[1.0, 1.0], 4, 1);
        partial.ids.remove(0);
        partial.data.drain(..4);
        let res = run_experiment(&m, &classes, &[full, partial], &small_config()).unwrap();
        assert_eq!(res.warnings.iter().filter(|w| w.contains("dropped")).count(), 1);
        assert!(!res.plan.labels.contains_key(&0));
    }

    #[test]
    fn inductive_pca_changes_only_the_fit() {
        let (m, classes) = manifest(2, 8, 4);
        let stores = vec![blob_store(&m, &classes, CircuitSpec::Standard, &[1.0, 1.0], 6, 5)];
        let cfg = ExperimentConfig {
            inductive_pca: true,
            ..small_config()
        };
        let res = run_experiment(&m, &classes, &stores, &cfg).unwrap();
        assert_eq!(res.trials.len(), 2 * 5 * 2 * 2);
    }
}
