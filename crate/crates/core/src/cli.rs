//! Command-line front end: configuration, orchestration and exit codes.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the JSON
//! document given with `--config`, then individual flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backbone::{enumerate_circuits, CircuitSpec, ImageTensor, ModelConfig};
use crate::error::{Error, Result};
use crate::evalsel::{run_experiment, write_run_artifacts, Budget, ExperimentConfig, ReferenceScores, RunArtifacts};
use crate::ingest::{
    compute_embeddings, make_synthetic_dataset, scan_directory, ClassIndex, DatasetManifest, EmbeddingCache,
    EmbeddingStore, PreprocessSpec, SyntheticParams,
};
use crate::model_io::{
    fingerprint_weights, load_weights, save_weights, synthesize_weights, verify_reference, LoadedModel, ParityReport,
    ReferenceBundle,
};
use crate::semisup::{ClassifierParams, Method};

pub const EXIT_INVALID_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_PARITY: i32 = 4;

/// Environment variable that sets the worker-pool size.
pub const WORKERS_ENV: &str = "CIRCUITDUP_WORKERS";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::Json(_) => EXIT_INVALID_CONFIG,
        _ => EXIT_DATA,
    }
}

/// Which circuits to embed and evaluate. Standard is always included.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum CircuitSelection {
    #[default]
    All,
    StandardOnly,
    Explicit(Vec<CircuitSpec>),
}

impl CircuitSelection {
    pub fn resolve(&self, num_layers: usize) -> Result<Vec<CircuitSpec>> {
        let mut out = vec![CircuitSpec::Standard];
        match self {
            CircuitSelection::All => out.extend(enumerate_circuits(num_layers)?),
            CircuitSelection::StandardOnly => {}
            CircuitSelection::Explicit(list) => {
                for c in list {
                    c.validate(num_layers)?;
                    if !out.contains(c) {
                        out.push(*c);
                    }
                }
            }
        }
        Ok(out)
    }
}

impl std::str::FromStr for CircuitSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(CircuitSelection::All),
            "standard" => Ok(CircuitSelection::StandardOnly),
            list => list
                .split(|c| c == ',' || c == ' ')
                .filter(|t| !t.is_empty())
                .map(str::parse)
                .collect::<Result<Vec<CircuitSpec>>>()
                .map(CircuitSelection::Explicit),
        }
    }
}

impl Serialize for CircuitSelection {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CircuitSelection::All => s.serialize_str("all"),
            CircuitSelection::StandardOnly => s.serialize_str("standard"),
            CircuitSelection::Explicit(list) => list.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for CircuitSelection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            List(Vec<CircuitSpec>),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) => w.parse().map_err(serde::de::Error::custom),
            Raw::List(l) => Ok(CircuitSelection::Explicit(l)),
        }
    }
}

/// The JSON configuration document for `embed` and `run`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    /// Manifest CSV; when absent the dataset root is scanned.
    pub manifest: Option<PathBuf>,
    /// Weight container; when absent weights are synthesized from `synthetic_seed`.
    pub model: Option<PathBuf>,
    pub model_config: ModelConfig,
    pub synthetic_seed: u64,
    /// Defaults to the standard normalisation at the model's image side.
    pub preprocess: Option<PreprocessSpec>,
    pub circuits: CircuitSelection,
    pub pca_out_dim: usize,
    pub methods: Vec<Method>,
    pub budgets: Vec<Budget>,
    pub repeat_seeds: Vec<u64>,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub inductive_pca: bool,
    pub classifier: ClassifierParams,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        Self {
            dataset_root: None,
            manifest: None,
            model: None,
            model_config: ModelConfig::default(),
            synthetic_seed: 0,
            preprocess: None,
            circuits: CircuitSelection::All,
            pca_out_dim: exp.pca_out_dim,
            methods: exp.methods,
            budgets: exp.budgets,
            repeat_seeds: exp.repeat_seeds,
            val_fraction: exp.val_fraction,
            split_seed: exp.split_seed,
            inductive_pca: exp.inductive_pca,
            classifier: exp.classifier,
            output_dir: PathBuf::from("results"),
            cache_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::input(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            pca_out_dim: self.pca_out_dim,
            methods: self.methods.clone(),
            budgets: self.budgets.clone(),
            repeat_seeds: self.repeat_seeds.clone(),
            val_fraction: self.val_fraction,
            split_seed: self.split_seed,
            inductive_pca: self.inductive_pca,
            classifier: self.classifier.clone(),
        }
    }

    pub fn preprocess_spec(&self) -> PreprocessSpec {
        self.preprocess.clone().unwrap_or(PreprocessSpec {
            resize_side: self.model_config.image_side,
            ..PreprocessSpec::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_root.is_none() {
            return Err(Error::InvalidConfig("dataset_root is required".into()));
        }
        self.model_config.validate()?;
        self.preprocess_spec().validate()?;
        self.circuits.resolve(self.model_config.num_layers)?;
        self.experiment().validate()
    }
}

#[derive(Debug, Parser)]
#[command(name = "circuitdup", version, about = "Layer-duplicated ViT embeddings and label-efficient classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan `<root>/{train,test}/<class>/*` and write a manifest CSV.
    Scan {
        root: PathBuf,
        #[arg(long, default_value = "manifest.csv")]
        out: PathBuf,
    },
    /// Write a synthetic image dataset.
    Synth {
        root: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 12)]
        train: usize,
        #[arg(long, default_value_t = 6)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Write synthesized weights and a matching reference bundle.
    SynthModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// ModelConfig JSON; defaults to the base configuration.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Populate the embedding cache for every configured circuit.
    Embed(RunArgs),
    /// Embed, evaluate every trial, select circuits and write reports.
    Run(RunArgs),
    /// Check a weight container against a reference bundle.
    VerifyWeights {
        model: PathBuf,
        bundle: PathBuf,
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Override the bundle's tolerance.
        #[arg(long)]
        tolerance: Option<f32>,
    },
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// ModelConfig JSON, replacing `model_config` from the run configuration.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub synthetic_seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// `all`, `standard`, or a comma list such as `2-5,0-11`.
    #[arg(long)]
    pub circuits: Option<CircuitSelection>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// Comma list such as `5,10,20,5%,100%`.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<Budget>>,
    #[arg(long, value_delimiter = ',')]
    pub repeats: Option<Vec<u64>>,
    #[arg(long)]
    pub pca_dim: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub inductive_pca: bool,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.dataset {
            cfg.dataset_root = Some(v.clone());
        }
        if let Some(v) = &self.manifest {
            cfg.manifest = Some(v.clone());
        }
        if let Some(v) = &self.model {
            cfg.model = Some(v.clone());
        }
        if let Some(p) = &self.model_config {
            cfg.model_config = read_model_config(p)?;
        }
        if let Some(v) = self.synthetic_seed {
            cfg.synthetic_seed = v;
        }
        if let Some(v) = &self.output {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.cache_dir {
            cfg.cache_dir = Some(v.clone());
        }
        if let Some(v) = &self.circuits {
            cfg.circuits = v.clone();
        }
        if let Some(v) = &self.methods {
            cfg.methods = v.clone();
        }
        if let Some(v) = &self.budgets {
            cfg.budgets = v.clone();
        }
        if let Some(v) = &self.repeats {
            cfg.repeat_seeds = v.clone();
        }
        if let Some(v) = self.pca_dim {
            cfg.pca_out_dim = v;
        }
        if let Some(v) = self.val_fraction {
            cfg.val_fraction = v;
        }
        if self.inductive_pca {
            cfg.inductive_pca = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::input(path, e))?;
    let cfg: ModelConfig =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_scan(root: &Path, out: &Path) -> Result<DatasetManifest> {
    let scan = scan_directory(root)?;
    for w in &scan.warnings {
        log::warn!("{w}");
    }
    scan.manifest.write_csv(out)?;
    Ok(scan.manifest)
}

pub fn cmd_synth(root: &Path, params: &SyntheticParams) -> Result<DatasetManifest> {
    let scan = make_synthetic_dataset(root, params)?;
    scan.manifest.write_csv(&root.join("manifest.csv"))?;
    Ok(scan.manifest)
}

/// Synthesized weights plus, optionally, a reference bundle for Standard and
/// up to two duplicated circuits.
pub fn cmd_synth_model(out: &Path, bundle: Option<&Path>, config: &ModelConfig, seed: u64) -> Result<String> {
    config.validate()?;
    let weights = synthesize_weights(config, seed);
    let fp = save_weights(out, &weights, config)?;
    if let Some(path) = bundle {
        let l = config.num_layers;
        let circuits = if l == 12 {
            vec![CircuitSpec::Standard, CircuitSpec::duplicated(2, 5), CircuitSpec::duplicated(0, 11)]
        } else if l / 2 > 1 {
            vec![CircuitSpec::Standard, CircuitSpec::duplicated(1, l / 2), CircuitSpec::duplicated(0, l - 1)]
        } else {
            vec![CircuitSpec::Standard, CircuitSpec::duplicated(0, l - 1)]
        };
        let input = reference_input(config.image_side, seed);
        ReferenceBundle::generate(&weights, config, input, &circuits, 1e-4)?.write(path)?;
    }
    Ok(fp.as_str().to_string())
}

fn reference_input(side: usize, seed: u64) -> ImageTensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    ImageTensor {
        side,
        data: (0..3 * side * side).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
    }
}

fn load_model(cfg: &RunConfig) -> Result<LoadedModel> {
    match &cfg.model {
        Some(path) => load_weights(path, &cfg.model_config),
        None => {
            let weights = synthesize_weights(&cfg.model_config, cfg.synthetic_seed);
            let fingerprint = fingerprint_weights(&weights, &cfg.model_config)?;
            Ok(LoadedModel {
                config: cfg.model_config.clone(),
                weights,
                fingerprint,
                warnings: Vec::new(),
            })
        }
    }
}

fn load_manifest(cfg: &RunConfig) -> Result<(DatasetManifest, ClassIndex)> {
    let root = cfg.dataset_root.as_deref().expect("validated");
    let manifest = match &cfg.manifest {
        Some(p) => DatasetManifest::read_csv(p)?,
        None => {
            let scan = scan_directory(root)?;
            for w in &scan.warnings {
                log::warn!("{w}");
            }
            scan.manifest
        }
    };
    let classes = manifest.validate()?;
    Ok((manifest, classes))
}

#[derive(Clone, Debug)]
pub struct EmbedSummary {
    pub stores: Vec<EmbeddingStore>,
    pub forward_passes: usize,
    pub cache_hits: usize,
    pub failures: usize,
}

fn embed_all(cfg: &RunConfig, manifest: &DatasetManifest, cache: Option<&EmbeddingCache>) -> Result<EmbedSummary> {
    let model = load_model(cfg)?;
    let circuits = cfg.circuits.resolve(model.config.num_layers)?;
    let root = cfg.dataset_root.as_deref().expect("validated");
    let sweep = compute_embeddings(&manifest.records, root, &model, &circuits, &cfg.preprocess_spec(), cache)?;
    let mut failures = 0;
    let mut cache_hits = 0;
    let mut stores = Vec::with_capacity(sweep.outcomes.len());
    for o in sweep.outcomes {
        for (id, msg) in &o.failures {
            log::warn!("record {id} under {}: {msg}", o.store.key.circuit);
        }
        failures += o.failures.len();
        cache_hits += usize::from(o.cache_hit);
        stores.push(o.store);
    }
    Ok(EmbedSummary {
        stores,
        forward_passes: sweep.forward_passes,
        cache_hits,
        failures,
    })
}

/// Embed under every configured circuit; a cache directory is required.
pub fn cmd_embed(cfg: &RunConfig) -> Result<EmbedSummary> {
    let dir = cfg
        .cache_dir
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("cache"));
    let (manifest, _) = load_manifest(cfg)?;
    embed_all(cfg, &manifest, Some(&EmbeddingCache::new(dir)))
}

pub fn cmd_run(cfg: &RunConfig) -> Result<RunArtifacts> {
    let (manifest, classes) = load_manifest(cfg)?;
    let cache = cfg.cache_dir.as_ref().map(EmbeddingCache::new);
    let embedded = embed_all(cfg, &manifest, cache.as_ref())?;
    let result = run_experiment(&manifest, &classes, &embedded.stores, &cfg.experiment())?;
    for w in &result.warnings {
        log::warn!("{w}");
    }
    write_run_artifacts(&cfg.output_dir, &result, &ReferenceScores::bundled())
}

pub fn cmd_verify_weights(
    model: &Path,
    bundle: &Path,
    config: &ModelConfig,
    tolerance: Option<f32>,
) -> Result<ParityReport> {
    let loaded = load_weights(model, config)?;
    let mut bundle = ReferenceBundle::read(bundle)?;
    if let Some(t) = tolerance {
        bundle.tolerance = t;
    }
    let mut report = verify_reference(&loaded.weights, config, &bundle)?;
    report.warnings.extend(loaded.warnings);
    Ok(report)
}

/// Size the global worker pool from [`WORKERS_ENV`], if set.
pub fn init_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{WORKERS_ENV}={v} is not a count")))?;
        // A second initialisation (as in tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Run a parsed command and return the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    init_workers()?;
    match cli.command {
        Command::Scan { root, out } => {
            let m = cmd_scan(&root, &out)?;
            println!("{} records -> {}", m.records.len(), out.display());
        }
        Command::Synth {
            root,
            classes,
            train,
            test,
            side,
            seed,
        } => {
            let params = SyntheticParams {
                num_classes: classes,
                per_class_train: train,
                per_class_test: test,
                image_side: side,
                seed,
            };
            let m = cmd_synth(&root, &params)?;
            println!("{} images under {}", m.records.len(), root.display());
        }
        Command::SynthModel {
            out,
            bundle,
            model_config,
            seed,
        } => {
            let config = match model_config {
                Some(p) => read_model_config(&p)?,
                None => ModelConfig::default(),
            };
            let fp = cmd_synth_model(&out, bundle.as_deref(), &config, seed)?;
            println!("{fp}  {}", out.display());
        }
        Command::Embed(args) => {
            let s = cmd_embed(&args.resolve()?)?;
            println!(
                "{} stores ({} cached), {} forward passes, {} failures",
                s.stores.len(),
                s.cache_hits,
                s.forward_passes,
                s.failures
            );
        }
        Command::Run(args) => {
            let art = cmd_run(&args.resolve()?)?;
            for f in &art.files {
                println!("{}", f.display());
            }
        }
        Command::VerifyWeights {
            model,
            bundle,
            model_config,
            tolerance,
        } => {
            let config = match model_config {
                Some(p) => read_model_config(&p)?,
                None => ModelConfig::default(),
            };
            let report = cmd_verify_weights(&model, &bundle, &config, tolerance)?;
            for w in &report.warnings {
                println!("warning: {w}");
            }
            for c in &report.cases {
                println!(
                    "{:<10} max|dev| = {:.3e}  {}",
                    c.circuit.to_string(),
                    c.max_abs_deviation,
                    if c.pass { "ok" } else { "FAIL" }
                );
            }
            if !report.pass {
                println!("parity FAILED at tolerance {:e}", report.tolerance);
                return Ok(EXIT_PARITY);
            }
            println!("parity ok at tolerance {:e}", report.tolerance);
        }
    }
    Ok(0)
}
