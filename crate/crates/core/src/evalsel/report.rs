use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::experiment::{BudgetOutcome, ExperimentResult};
use super::select::Choice;
use crate::backbone::CircuitSpec;
use crate::error::Result;

/// Fully supervised per-class scores shipped with the crate, used only for
/// the delta columns in reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceScores {
    pub label: String,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class_f1: BTreeMap<String, f64>,
}

const BUNDLED_REFERENCE: &str = include_str!("../../data/reference_scores.json");

impl ReferenceScores {
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED_REFERENCE).expect("bundled reference scores parse")
    }

    pub fn class(&self, name: &str) -> Option<f64> {
        self.per_class_f1.get(name).copied()
    }
}

/// Every file written by [`write_run_artifacts`], relative to the output directory.
pub const ARTIFACT_FILES: [&str; 8] = [
    "trials.csv",
    "selections.csv",
    "breakdown.csv",
    "summary.json",
    "plot_global_f1.csv",
    "plot_global_accuracy.csv",
    "plot_per_class_f1.csv",
    "plot_strategy_breakdown.csv",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub files: Vec<PathBuf>,
}

fn circuit_columns(c: &CircuitSpec) -> [String; 2] {
    match c.bounds() {
        None => ["standard".into(), "standard".into()],
        Some((i, j)) => [i.to_string(), j.to_string()],
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

pub fn write_trials_csv(path: &Path, result: &ExperimentResult) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = [
        "budget",
        "circuit_i",
        "circuit_j",
        "method",
        "repeat_seed",
        "target",
        "accuracy",
        "macro_f1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(result.classes.iter().map(|c| format!("f1_{c}")));
    w.write_record(&header)?;
    for t in &result.trials {
        let [ci, cj] = circuit_columns(&t.circuit);
        let mut row = vec![
            t.budget.to_string(),
            ci,
            cj,
            t.method.to_string(),
            t.repeat_seed.to_string(),
            t.target.to_string(),
            t.report.accuracy.to_string(),
            t.report.macro_f1.to_string(),
        ];
        row.extend(t.report.per_class_f1.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per selection: `baseline` and `global` (dataset-wide, scored by
/// macro F1) plus `class_specific` and `baseline_class` rows per class.
pub fn write_selections_csv(path: &Path, result: &ExperimentResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "budget",
        "scope",
        "class",
        "circuit_i",
        "circuit_j",
        "method",
        "val_score",
        "test_score",
    ])?;
    for out in &result.budgets {
        let mut emit = |scope: &str, class: &str, choice: &Choice, test: f64| -> Result<()> {
            let [ci, cj] = circuit_columns(&choice.circuit);
            w.write_record([
                out.budget.to_string(),
                scope.to_string(),
                class.to_string(),
                ci,
                cj,
                choice.method.to_string(),
                choice.val_score.to_string(),
                test.to_string(),
            ])?;
            Ok(())
        };
        emit("baseline", "", &out.baseline, out.baseline_test.macro_f1)?;
        emit("global", "", &out.global, out.global_test.macro_f1)?;
        for (k, name) in result.classes.iter().enumerate() {
            emit("class_specific", name, &out.class_specific[k], out.class_specific_test.per_class_f1[k])?;
        }
        for (k, name) in result.classes.iter().enumerate() {
            emit(
                "baseline_class",
                name,
                &out.baseline_per_class[k],
                out.baseline_per_class_test.per_class_f1[k],
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_breakdown_csv(path: &Path, result: &ExperimentResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["budget", "baseline_best", "global_best", "unique_best"])?;
    for out in &result.budgets {
        let b = out.breakdown;
        w.write_record([
            out.budget.to_string(),
            b.baseline_best.to_string(),
            b.global_best.to_string(),
            b.unique_best.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn choice_json(choice: &Choice) -> Value {
    json!({
        "circuit": choice.circuit.to_string(),
        "method": choice.method.name(),
        "val_score": choice.val_score,
    })
}

struct ClassRow<'a> {
    name: &'a str,
    reference: Option<f64>,
    baseline: f64,
    global: f64,
    class_specific: f64,
    choice: &'a Choice,
}

impl ClassRow<'_> {
    /// Against the reference when the class has one, else against the baseline.
    fn delta(&self) -> (f64, &'static str) {
        match self.reference {
            Some(r) => (self.class_specific - r, "reference"),
            None => (self.class_specific - self.baseline, "baseline"),
        }
    }
}

fn class_rows<'a>(result: &'a ExperimentResult, out: &'a BudgetOutcome, reference: &ReferenceScores) -> Vec<ClassRow<'a>> {
    result
        .classes
        .iter()
        .enumerate()
        .map(|(k, name)| ClassRow {
            name,
            reference: reference.class(name),
            baseline: out.baseline_per_class_test.per_class_f1[k],
            global: out.global_test.per_class_f1[k],
            class_specific: out.class_specific_test.per_class_f1[k],
            choice: &out.class_specific[k],
        })
        .collect()
}

/// Mirrors the dataset-level and per-class result tables, one entry per budget.
pub fn write_summary_json(path: &Path, result: &ExperimentResult, reference: &ReferenceScores) -> Result<()> {
    let budgets: Vec<Value> = result
        .budgets
        .iter()
        .map(|out| {
            let per_class: Vec<Value> = class_rows(result, out, reference)
                .iter()
                .map(|row| {
                    json!({
                        "class": row.name,
                        "circuit": row.choice.circuit.to_string(),
                        "method": row.choice.method.name(),
                        "reference_f1": row.reference,
                        "baseline_f1": row.baseline,
                        "global_f1": row.global,
                        "class_specific_f1": row.class_specific,
                        "delta_vs_reference": row.reference.map(|r| row.class_specific - r),
                    })
                })
                .collect();
            let strategy = |macro_f1: f64, accuracy: f64| {
                json!({
                    "macro_f1": macro_f1,
                    "accuracy": accuracy,
                    "delta_macro_f1_vs_reference": macro_f1 - reference.macro_f1,
                    "delta_accuracy_vs_reference": accuracy - reference.accuracy,
                })
            };
            json!({
                "budget": out.budget.to_string(),
                "overall": {
                    "baseline": strategy(out.baseline_test.macro_f1, out.baseline_test.accuracy),
                    "global_circuit": strategy(out.global_test.macro_f1, out.global_test.accuracy),
                    "class_specific": strategy(out.class_specific_test.macro_f1, out.class_specific_test.accuracy),
                },
                "selection": {
                    "baseline": choice_json(&out.baseline),
                    "global_circuit": choice_json(&out.global),
                    "class_specific_val_macro_f1": out.class_specific_val_macro,
                },
                "per_class": per_class,
                "per_class_macro": {
                    "baseline": out.baseline_per_class_test.macro_f1,
                    "global_circuit": out.global_test.macro_f1,
                    "class_specific": out.class_specific_test.macro_f1,
                },
                "breakdown": out.breakdown,
            })
        })
        .collect();
    let doc = json!({
        "classes": result.classes,
        "circuits": result.circuits.iter().map(CircuitSpec::to_string).collect::<Vec<_>>(),
        "methods": result.methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "pools": {
            "val": result.plan.val_ids.len(),
            "seedpool": result.plan.seedpool_ids.len(),
            "test": result.plan.test_ids.len(),
        },
        "reference": reference,
        "budgets": budgets,
        "warnings": result.warnings,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// CSV inputs for the four result figures; rendering is left to the caller.
pub fn write_plot_data(dir: &Path, result: &ExperimentResult, reference: &ReferenceScores) -> Result<()> {
    for (file, column, pick) in [
        (
            "plot_global_f1.csv",
            "macro_f1",
            (|o: &BudgetOutcome| {
                [
                    o.baseline_test.macro_f1,
                    o.global_test.macro_f1,
                    o.class_specific_test.macro_f1,
                ]
            }) as fn(&BudgetOutcome) -> [f64; 3],
        ),
        ("plot_global_accuracy.csv", "accuracy", |o: &BudgetOutcome| {
            [
                o.baseline_test.accuracy,
                o.global_test.accuracy,
                o.class_specific_test.accuracy,
            ]
        }),
    ] {
        let mut w = writer(&dir.join(file))?;
        w.write_record(["budget", "strategy", column])?;
        let reference_value = if column == "macro_f1" {
            reference.macro_f1
        } else {
            reference.accuracy
        };
        for out in &result.budgets {
            let values = pick(out);
            for (strategy, v) in ["baseline", "global_circuit", "class_specific"].iter().zip(values) {
                w.write_record([out.budget.to_string(), strategy.to_string(), v.to_string()])?;
            }
            w.write_record([out.budget.to_string(), "reference".into(), reference_value.to_string()])?;
        }
        w.flush()?;
    }

    let mut w = writer(&dir.join("plot_per_class_f1.csv"))?;
    w.write_record([
        "budget",
        "rank",
        "class",
        "circuit",
        "method",
        "reference_f1",
        "baseline_f1",
        "global_f1",
        "class_specific_f1",
        "delta",
        "delta_basis",
    ])?;
    for out in &result.budgets {
        let mut rows = class_rows(result, out, reference);
        rows.sort_by(|a, b| b.delta().0.total_cmp(&a.delta().0).then_with(|| a.name.cmp(b.name)));
        for (rank, row) in rows.iter().enumerate() {
            let (delta, basis) = row.delta();
            w.write_record([
                out.budget.to_string(),
                rank.to_string(),
                row.name.to_string(),
                row.choice.circuit.to_string(),
                row.choice.method.to_string(),
                row.reference.map_or(String::new(), |r| r.to_string()),
                row.baseline.to_string(),
                row.global.to_string(),
                row.class_specific.to_string(),
                delta.to_string(),
                basis.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = writer(&dir.join("plot_strategy_breakdown.csv"))?;
    w.write_record(["budget", "strategy", "classes"])?;
    for out in &result.budgets {
        let b = out.breakdown;
        for (name, n) in [
            ("baseline", b.baseline_best),
            ("global_circuit", b.global_best),
            ("unique_circuit", b.unique_best),
        ] {
            w.write_record([out.budget.to_string(), name.to_string(), n.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write every file in [`ARTIFACT_FILES`] into `dir`, creating it if needed.
pub fn write_run_artifacts(dir: &Path, result: &ExperimentResult, reference: &ReferenceScores) -> Result<RunArtifacts> {
    std::fs::create_dir_all(dir)?;
    write_trials_csv(&dir.join("trials.csv"), result)?;
    write_selections_csv(&dir.join("selections.csv"), result)?;
    write_breakdown_csv(&dir.join("breakdown.csv"), result)?;
    write_summary_json(&dir.join("summary.json"), result, reference)?;
    write_plot_data(dir, result, reference)?;
    Ok(RunArtifacts {
        files: ARTIFACT_FILES.iter().map(|f| dir.join(f)).collect(),
    })
}
