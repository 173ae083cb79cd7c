//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit on any FAIL.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use circuitdup_core::backbone::{
    embed_image_sweep, embed_patches, enumerate_circuits, forward, CircuitSpec, ModelConfig,
};
use circuitdup_core::cli::{cmd_run, CircuitSelection, RunConfig};
use circuitdup_core::evalsel::{
    carve_pools, compute_metrics, draw_seeds, run_experiment, Budget, ExperimentConfig, ExperimentResult,
};
use circuitdup_core::ingest::{
    compute_embeddings, make_synthetic_dataset, PreprocessSpec, SyntheticParams,
};
use circuitdup_core::model_io::{fingerprint_weights, synthesize_weights, LoadedModel};
use circuitdup_core::reduce::{fit_pca, FeatureMatrix};
use circuitdup_core::semisup::{label_spreading_on_graph, AffinityGraph, SeedSet, SpreadParams};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn all_with_standard(l: usize) -> Vec<CircuitSpec> {
    std::iter::once(CircuitSpec::Standard)
        .chain(enumerate_circuits(l).unwrap())
        .collect()
}

fn path_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = oracle_config();
    let circuits = all_with_standard(cfg.num_layers);
    let mut worst = 0.0f32;
    let mut worst_f64 = 0.0f64;
    for seed in 0..3u64 {
        let w = synthesize_weights(&cfg, seed);
        let img = random_image(cfg.image_side, 100 + seed);
        let tokens = embed_patches(&img, &w, &cfg).unwrap();
        let swept = embed_image_sweep(&img, &w, &cfg, &circuits).unwrap();
        for (c, pooled) in circuits.iter().zip(swept) {
            let path = explicit_path(*c, cfg.num_layers);
            let mut x = tokens.clone();
            for &l in &path {
                x = w.blocks[l].apply(&x, &cfg);
            }
            x.data = w.norm.forward(&x.data, cfg.layernorm_eps);
            let out = forward(&tokens, &w, &cfg, *c).unwrap();
            worst = worst.max(max_abs_diff(&out.data, &x.data));
            let want = fold_blocks(&img, &w, &cfg, &path);
            let pooled = pooled.unwrap();
            worst = worst.max(max_abs_diff(&pooled, &want));
            let f64_ref = naive_embed(&img, &w, &cfg, &path);
            worst_f64 = pooled
                .iter()
                .zip(&f64_ref)
                .map(|(a, b)| (*a as f64 - b).abs())
                .fold(worst_f64, f64::max);
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-6 && elapsed < Duration::from_secs(120) && circuits.len() == 67,
        format!(
            "{} duplicated circuits x 3 models, max dev {worst:.2e}, f64 scalar ref dev {worst_f64:.2e}, {:.2}s",
            circuits.len() - 1,
            elapsed.as_secs_f64()
        ),
    )
}

fn identity_block() -> Outcome {
    let cfg = oracle_config();
    let base = strong_weights(&cfg, 7, 8.0);
    let img = random_image(cfg.image_side, 3);
    let mut worst = 0.0f32;
    let mut n = 0;
    for c in enumerate_circuits(cfg.num_layers).unwrap() {
        let (i, j) = c.bounds().unwrap();
        let mut w = base.clone();
        zero_residual_branches(&mut w, i..=j);
        let e = embed_image_sweep(&img, &w, &cfg, &[CircuitSpec::Standard, c]).unwrap();
        let (s, d) = (e[0].as_ref().unwrap(), e[1].as_ref().unwrap());
        worst = worst.max(max_abs_diff(s, d));
        n += 1;
    }
    check(worst <= 1e-6 && n == 66, format!("{n} circuits, max dev {worst:.2e}"))
}

fn circuit_count() -> Outcome {
    let cs = enumerate_circuits(12).unwrap();
    let distinct: std::collections::BTreeSet<_> = cs.iter().collect();
    let valid = cs.iter().all(|c| c.validate(12).is_ok() && !c.is_standard());
    check(
        cs.len() == 66 && distinct.len() == 66 && valid,
        format!("{} circuits, {} distinct, all valid: {valid}", cs.len(), distinct.len()),
    )
}

fn pca_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst_basis = 0.0f64;
    let mut worst_var = 0.0f64;
    let mut worst_ortho = 0.0f64;
    let mut monotone = true;
    let mut fits = 0;
    for &(n, d) in &[(3, 2), (10, 4), (25, 10), (50, 10), (60, 20), (100, 5), (100, 20)] {
        for _ in 0..3 {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|j| rng.random_range(-1.0..1.0) * (1.0 + 0.5 * j as f64)).collect())
                .collect();
            let (vals, vecs) = jacobi_eigen(&covariance(&rows));
            let k = (n - 1).min(d);
            let pca = fit_pca(&FeatureMatrix::from_rows(&rows).unwrap(), k).unwrap();
            fits += 1;
            for a in 0..k {
                let dot: f64 = pca.component(a).iter().zip(&vecs[a]).map(|(u, v)| u * v).sum();
                for (u, v) in pca.component(a).iter().zip(&vecs[a]) {
                    worst_basis = worst_basis.max((u - dot.signum() * v).abs());
                }
                worst_var = worst_var.max((pca.explained_variance[a] - vals[a]).abs());
                for b in 0..k {
                    let g: f64 = pca.component(a).iter().zip(pca.component(b)).map(|(u, v)| u * v).sum();
                    worst_ortho = worst_ortho.max((g - (a == b) as u8 as f64).abs());
                }
            }
            monotone &= pca.explained_variance.windows(2).all(|w| w[0] >= w[1])
                && pca.explained_variance.iter().all(|v| *v >= 0.0);
        }
    }
    check(
        worst_basis <= 1e-6 && worst_var <= 1e-6 && worst_ortho <= 1e-6 && monotone,
        format!(
            "{fits} fits up to 100x20: basis dev {worst_basis:.2e}, variance dev {worst_var:.2e}, \
             orthonormality dev {worst_ortho:.2e}, monotone {monotone}"
        ),
    )
}

fn spreading_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut graphs = 0;
    for n in 1..=10 {
        for trial in 0..40 {
            let density = [0.25, 0.5, 0.8, 1.0][trial % 4];
            let mut w = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random_bool(density) {
                        let v = rng.random_range(0.01..1.0);
                        w[i][j] = v;
                        w[j][i] = v;
                    }
                }
            }
            let classes = 1 + trial % 4;
            let mut pairs = vec![(rng.random_range(0..n), rng.random_range(0..classes))];
            for r in 0..n {
                if rng.random_bool(0.25) {
                    pairs.push((r, rng.random_range(0..classes)));
                }
            }
            let seeds = SeedSet::from_pairs(pairs);
            let mut y = vec![vec![0.0; classes]; n];
            for (r, c) in seeds.iter() {
                y[r][c] = 1.0;
            }
            let g = AffinityGraph::from_dense(&w).unwrap();
            let params = SpreadParams::default();
            let out = label_spreading_on_graph(&g, &seeds, classes, &params).unwrap();
            let want = closed_form_spreading(&w, &y, params.alpha);
            for i in 0..n {
                for c in 0..classes {
                    worst = worst.max((out.scores[i * classes + c] - want[i][c]).abs());
                }
            }
            graphs += 1;
        }
    }
    check(worst <= 1e-6, format!("{graphs} graphs of 1..=10 nodes at default alpha/tol, max dev {worst:.2e}"))
}

fn from_confusion(conf: &[&[usize]]) -> (Vec<usize>, Vec<usize>) {
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for (t, row) in conf.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            for _ in 0..count {
                truth.push(t);
                pred.push(p);
            }
        }
    }
    (pred, truth)
}

fn metrics() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut expect = |label: &str, got: f64, want: f64| {
        let good = (got - want).abs() <= 1e-12;
        ok &= good;
        if !good {
            notes.push(format!("{label}: got {got}, want {want}"));
        }
    };

    let (p, t) = from_confusion(&[&[1, 1], &[0, 2]]);
    let r = compute_metrics(&p, &t, 2).unwrap();
    expect("2x2 f1[0]", r.per_class_f1[0], 2.0 / 3.0);
    expect("2x2 f1[1]", r.per_class_f1[1], 0.8);
    expect("2x2 macro", r.macro_f1, 11.0 / 15.0);
    expect("2x2 accuracy", r.accuracy, 0.75);

    // Rows are truth. Class 0: TP 2 of 3, predicted 3. Class 1: TP 2 of 2,
    // predicted 3. Class 2: TP 3 of 4, predicted 3.
    let (p, t) = from_confusion(&[&[2, 1, 0], &[0, 2, 0], &[1, 0, 3]]);
    let r = compute_metrics(&p, &t, 3).unwrap();
    expect("3x3 f1[0]", r.per_class_f1[0], 4.0 / 6.0);
    expect("3x3 f1[1]", r.per_class_f1[1], 4.0 / 5.0);
    expect("3x3 f1[2]", r.per_class_f1[2], 6.0 / 7.0);
    expect("3x3 macro", r.macro_f1, (4.0 / 6.0 + 4.0 / 5.0 + 6.0 / 7.0) / 3.0);
    expect("3x3 accuracy", r.accuracy, 7.0 / 9.0);

    // Class 2 never occurs and is never predicted: F1 0, still in the macro mean.
    let (p, t) = from_confusion(&[&[3, 0, 0], &[1, 1, 0], &[0, 0, 0]]);
    let r = compute_metrics(&p, &t, 3).unwrap();
    expect("absent f1[0]", r.per_class_f1[0], 6.0 / 7.0);
    expect("absent f1[1]", r.per_class_f1[1], 2.0 / 3.0);
    expect("absent f1[2]", r.per_class_f1[2], 0.0);
    expect("absent macro", r.macro_f1, (6.0 / 7.0 + 2.0 / 3.0) / 3.0);

    // A class that occurs but is never predicted also scores 0.
    let (p, t) = from_confusion(&[&[2, 0], &[2, 0]]);
    let r = compute_metrics(&p, &t, 2).unwrap();
    expect("unpredicted f1[1]", r.per_class_f1[1], 0.0);
    expect("unpredicted macro", r.macro_f1, (4.0 / 6.0) / 2.0);

    let detail = if notes.is_empty() {
        "2x2 macro 0.733333..., 3x3 and zero-division cases exact to 1e-12".to_string()
    } else {
        notes.join("; ")
    };
    check(ok, detail)
}

fn chain_ok(res: &ExperimentResult, notes: &mut Vec<String>) -> bool {
    let mut ok = true;
    for b in &res.budgets {
        let global = b.candidate(b.global.circuit, b.global.method).unwrap();
        let baseline = b.candidate(b.baseline.circuit, b.baseline.method).unwrap();
        let cs = b.class_specific_val_macro;
        if !(cs + 1e-12 >= global.val.macro_f1 && global.val.macro_f1 >= baseline.val.macro_f1) {
            ok = false;
            notes.push(format!(
                "budget {}: chain {cs:.4} / {:.4} / {:.4}",
                b.budget, global.val.macro_f1, baseline.val.macro_f1
            ));
        }
        if b.candidates.iter().any(|c| c.val.macro_f1 > b.global.val_score) {
            ok = false;
            notes.push(format!("budget {}: global is not the val argmax", b.budget));
        }
        for (k, choice) in b.class_specific.iter().enumerate() {
            if choice.val_score < global.val.per_class_f1[k] {
                ok = false;
                notes.push(format!("budget {} class {k}: per-class {} < global", b.budget, choice.val_score));
            }
        }
    }
    ok
}

fn selection() -> Outcome {
    let mut notes = Vec::new();
    let budgets = vec![Budget::PerClass(2), Budget::PerClass(5), Budget::Fraction(0.5)];

    // End-to-end on rendered images through a 4-layer synthetic model.
    let dir = tempfile::tempdir().unwrap();
    let params = SyntheticParams {
        num_classes: 4,
        per_class_train: 15,
        per_class_test: 6,
        image_side: 32,
        seed: 3,
    };
    let scan = make_synthetic_dataset(dir.path(), &params).unwrap();
    let cfg = ModelConfig {
        num_layers: 4,
        hidden_dim: 32,
        num_heads: 2,
        mlp_hidden_dim: 64,
        patch_size: 8,
        image_side: 32,
        num_register_tokens: 2,
        ..ModelConfig::default()
    };
    let weights = synthesize_weights(&cfg, 1);
    let model = LoadedModel {
        config: cfg.clone(),
        fingerprint: fingerprint_weights(&weights, &cfg).unwrap(),
        weights,
        warnings: vec![],
    };
    let mut circuits = vec![CircuitSpec::Standard];
    circuits.extend(enumerate_circuits(4).unwrap());
    assert_eq!(circuits.len(), 7);
    let spec = PreprocessSpec {
        resize_side: 32,
        ..PreprocessSpec::default()
    };
    let sweep = compute_embeddings(&scan.manifest.records, dir.path(), &model, &circuits, &spec, None).unwrap();
    let stores: Vec<_> = sweep.outcomes.into_iter().map(|o| o.store).collect();
    let classes = scan.manifest.validate().unwrap();
    let exp = ExperimentConfig {
        pca_out_dim: 16,
        budgets: budgets.clone(),
        ..ExperimentConfig::default()
    };
    let real = run_experiment(&scan.manifest, &classes, &stores, &exp).unwrap();
    let real_ok = chain_ok(&real, &mut notes);

    // Injected spaces: class k is separable only under circuit k.
    let manifest = manifest(4, 40, 20);
    let classes = manifest.validate().unwrap();
    let dup = enumerate_circuits(4).unwrap();
    let mut stores = vec![planted_store(&manifest, CircuitSpec::Standard, &[], 8, 0)];
    for (k, c) in dup.iter().enumerate() {
        let sep: Vec<usize> = if k < 4 { vec![k] } else { vec![] };
        stores.push(planted_store(&manifest, *c, &sep, 8, 1 + k as u64));
    }
    let planted = run_experiment(&manifest, &classes, &stores, &exp).unwrap();
    let mut planted_ok = chain_ok(&planted, &mut notes);
    let mut distinct_winners = true;
    for b in &planted.budgets {
        let winners: Vec<CircuitSpec> = b.class_specific.iter().map(|c| c.circuit).collect();
        if winners != dup[..4] {
            planted_ok = false;
            notes.push(format!(
                "budget {}: winners {:?}",
                b.budget,
                winners.iter().map(|c| c.to_string()).collect::<Vec<_>>()
            ));
        }
        distinct_winners &= b.breakdown.unique_best + b.breakdown.global_best == 4;
    }
    let detail = if notes.is_empty() {
        format!(
            "image run ({} candidates x {} budgets) and planted run: val chain holds; planted circuits {} recovered at every budget",
            real.budgets[0].candidates.len(),
            real.budgets.len(),
            dup[..4].iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
        )
    } else {
        notes.join("; ")
    };
    check(real_ok && planted_ok && distinct_winners, detail)
}

fn budget_arithmetic() -> Outcome {
    let manifest = manifest(1, 100, 10);
    let classes = manifest.validate().unwrap();
    let plan = carve_pools(&manifest.records, &classes, 0.4, 0).unwrap();
    let seeds = draw_seeds(&plan, Budget::Fraction(0.10), 0).unwrap();
    let all = draw_seeds(&plan, Budget::Fraction(1.0), 0).unwrap();
    let short = Budget::PerClass(5).seeds_for(3);
    check(
        plan.val_ids.len() == 40
            && plan.seedpool_ids.len() == 60
            && plan.test_ids.len() == 10
            && seeds.len() == 6
            && all.len() == 60
            && short == 3,
        format!(
            "val {} / seedpool {}; 10% draws {} of 60 ({:.0}% of 100 train); 100% draws {}; PerClass(5) of 3 -> {short}",
            plan.val_ids.len(),
            plan.seedpool_ids.len(),
            seeds.len(),
            seeds.len() as f64,
            all.len()
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let params = SyntheticParams {
        num_classes: 3,
        per_class_train: 8,
        per_class_test: 4,
        image_side: 16,
        seed: 5,
    };
    make_synthetic_dataset(&data, &params).unwrap();
    let model_config = ModelConfig {
        num_layers: 4,
        hidden_dim: 16,
        num_heads: 2,
        mlp_hidden_dim: 32,
        patch_size: 8,
        image_side: 16,
        num_register_tokens: 1,
        ..ModelConfig::default()
    };
    let cfg = RunConfig {
        dataset_root: Some(data),
        model_config,
        synthetic_seed: 2,
        preprocess: Some(PreprocessSpec {
            resize_side: 16,
            ..PreprocessSpec::default()
        }),
        circuits: CircuitSelection::All,
        pca_out_dim: 8,
        budgets: vec![Budget::PerClass(1), Budget::Fraction(0.5)],
        output_dir: dir.path().join("out"),
        ..RunConfig::default()
    };
    let snapshot = || -> BTreeMap<String, Vec<u8>> {
        let files = cmd_run(&cfg).unwrap().files;
        files
            .iter()
            .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(f).unwrap()))
            .collect()
    };
    let first = snapshot();
    let second = snapshot();
    let differing: Vec<_> = first.keys().filter(|k| first.get(*k) != second.get(*k)).cloned().collect();
    check(
        differing.is_empty() && first.len() == second.len() && !first.is_empty(),
        if differing.is_empty() {
            format!("{} files byte-identical across two runs", first.len())
        } else {
            format!("differing files: {differing:?}")
        },
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("path-oracle equivalence", path_oracle),
        ("identity-block no-op", identity_block),
        ("circuit count", circuit_count),
        ("pca oracle", pca_oracle),
        ("label-spreading oracle", spreading_oracle),
        ("metrics", metrics),
        ("selection invariants and planted recovery", selection),
        ("budget arithmetic", budget_arithmetic),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match std::panic::catch_unwind(f) {
            Ok(Ok(detail)) => println!("PASS  {name}: {detail}"),
            Ok(Err(detail)) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    println!(
        "SKIP  full-scale reproduction: needs the exported pretrained checkpoint and the real image dataset"
    );
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
