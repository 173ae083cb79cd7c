//! Downstream classifiers over reduced embeddings with a labelled seed set.
//!
//! All methods are deterministic: ties break towards the lowest class id
//! (after any method-specific rule) and no step samples randomly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce::FeatureMatrix;

mod graph;
mod kmeans;
mod knn;
mod selftrain;
mod spreading;
mod svm;

pub use graph::{build_graph, AffinityGraph};
pub use kmeans::{seeded_kmeans, KmeansOutcome, KmeansParams};
pub use knn::{knn_baseline, knn_vote, KnnVote};
pub use selftrain::{self_train_knn, self_train_svm, SelfTrainOutcome, SelfTrainParams};
pub use spreading::{label_spreading, label_spreading_on_graph, SpreadOutcome, SpreadParams};
pub use svm::{linear_svm_ovr, LinearSvm, SvmParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    LabelSpreading,
    SelfTrainKnn,
    SelfTrainSvm,
    SeededKmeans,
    KnnBaseline,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::LabelSpreading,
        Method::SelfTrainKnn,
        Method::SelfTrainSvm,
        Method::SeededKmeans,
        Method::KnnBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::LabelSpreading => "label_spreading",
            Method::SelfTrainKnn => "self_train_knn",
            Method::SelfTrainSvm => "self_train_svm",
            Method::SeededKmeans => "seeded_kmeans",
            Method::KnnBaseline => "knn_baseline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Labelled rows: row index -> class id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SeedSet {
    entries: BTreeMap<usize, usize>,
}

impl SeedSet {
    pub fn new(entries: BTreeMap<usize, usize>) -> Self {
        Self { entries }
    }

    pub fn from_pairs<I: IntoIterator<Item = (usize, usize)>>(pairs: I) -> Self {
        Self {
            entries: pairs.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, row: usize) -> Option<usize> {
        self.entries.get(&row).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().map(|(&r, &c)| (r, c))
    }

    pub fn validate(&self, rows: usize, num_classes: usize) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidSeeds("seed set is empty".into()));
        }
        for (r, c) in self.iter() {
            if r >= rows {
                return Err(Error::InvalidSeeds(format!("seed row {r} out of range ({rows} rows)")));
            }
            if c >= num_classes {
                return Err(Error::InvalidSeeds(format!(
                    "seed class {c} out of range ({num_classes} classes)"
                )));
            }
        }
        Ok(())
    }

    /// Most frequent seed class; lowest id on ties.
    pub fn majority_class(&self, num_classes: usize) -> usize {
        let mut counts = vec![0usize; num_classes];
        for (_, c) in self.iter() {
            counts[c] += 1;
        }
        argmax_lowest(counts.iter().map(|&c| c as f64))
    }
}

/// A label and confidence in [0, 1] for every row.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
}

impl PredictionSet {
    fn clamp_seeds(&mut self, seeds: &SeedSet) {
        for (r, c) in seeds.iter() {
            self.labels[r] = c;
            self.confidence[r] = 1.0;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierParams {
    pub spreading: SpreadParams,
    pub knn_k: usize,
    pub self_training: SelfTrainParams,
    pub svm: SvmParams,
    pub kmeans: KmeansParams,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self {
            spreading: SpreadParams::default(),
            knn_k: 5,
            self_training: SelfTrainParams::default(),
            svm: SvmParams::default(),
            kmeans: KmeansParams::default(),
        }
    }
}

impl ClassifierParams {
    pub fn validate(&self) -> Result<()> {
        self.spreading.validate()?;
        self.self_training.validate()?;
        self.svm.validate()?;
        if self.knn_k == 0 {
            return Err(Error::InvalidConfig("knn_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Run `method` over all rows of `x`. A prebuilt graph, when given, is used
/// by label spreading instead of building one.
pub fn classify(
    method: Method,
    x: &FeatureMatrix,
    seeds: &SeedSet,
    num_classes: usize,
    params: &ClassifierParams,
    graph: Option<&AffinityGraph>,
) -> Result<PredictionSet> {
    match method {
        Method::LabelSpreading => match graph {
            Some(g) => Ok(label_spreading_on_graph(g, seeds, num_classes, &params.spreading)?.predictions),
            None => label_spreading(x, seeds, num_classes, &params.spreading),
        },
        Method::SelfTrainKnn => Ok(self_train_knn(
            x,
            seeds,
            num_classes,
            params.knn_k,
            &params.self_training,
        )?
        .predictions),
        Method::SelfTrainSvm => Ok(self_train_svm(
            x,
            seeds,
            num_classes,
            &params.svm,
            &params.self_training,
        )?
        .predictions),
        Method::SeededKmeans => {
            Ok(seeded_kmeans(x, seeds, num_classes, &params.kmeans)?.predictions)
        }
        Method::KnnBaseline => knn_baseline(x, seeds, num_classes, params.knn_k),
    }
}

/// Index of the maximum; the first one wins ties.
pub(crate) fn argmax_lowest<I: IntoIterator<Item = f64>>(values: I) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    best
}
