//! Dataset discovery, preprocessing, synthetic data and the embedding cache.
//!
//! Datasets live under `root/{train,test}/{class_name}/*.{png,jpg,jpeg}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use image::imageops::FilterType;
use image::{ImageReader, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{embed_image_sweep, CircuitSpec, ImageTensor};
use crate::error::{Error, Result};
use crate::model_io::{LoadedModel, ModelFingerprint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    #[serde(rename = "class")]
    pub class_name: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
}

/// Sorted class names with contiguous ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassIndex {
    names: Vec<String>,
}

impl ClassIndex {
    pub fn new<I: IntoIterator<Item = String>>(names: I) -> Self {
        let set: BTreeSet<String> = names.into_iter().collect();
        Self {
            names: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<ClassIndex> {
        for (k, r) in self.records.iter().enumerate() {
            if r.id != k {
                return Err(Error::Manifest(format!(
                    "record ids must be contiguous from 0; position {k} has id {}",
                    r.id
                )));
            }
        }
        let classes = ClassIndex::new(
            self.records
                .iter()
                .filter(|r| r.split == Split::Train)
                .map(|r| r.class_name.clone()),
        );
        if let Some(r) = self.records.iter().find(|r| classes.id(&r.class_name).is_none()) {
            return Err(Error::Manifest(format!(
                "class `{}` appears only in the test split",
                r.class_name
            )));
        }
        Ok(classes)
    }

    /// Class id of every record, indexed by record id.
    pub fn labels(&self, classes: &ClassIndex) -> Vec<usize> {
        self.records
            .iter()
            .map(|r| classes.id(&r.class_name).expect("manifest validated"))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let records = rd.deserialize().collect::<std::result::Result<Vec<Record>, _>>()?;
        Ok(Self { records })
    }
}

#[derive(Clone, Debug)]
pub struct ScanResult {
    pub manifest: DatasetManifest,
    pub classes: ClassIndex,
    pub warnings: Vec<String>,
    pub skipped: usize,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn readable_image(path: &Path) -> std::result::Result<(), String> {
    ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .into_dimensions()
        .map(|_| ())
        .map_err(|e| e.to_string())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

pub fn scan_directory(root: &Path) -> Result<ScanResult> {
    let mut warnings = Vec::new();
    let mut skipped = 0;
    let mut records = Vec::new();

    for split in [Split::Test, Split::Train] {
        let split_dir = root.join(split.to_string());
        if !split_dir.is_dir() {
            if split == Split::Train {
                return Err(Error::Manifest(format!(
                    "{} has no train/ directory",
                    root.display()
                )));
            }
            continue;
        }
        for class_dir in sorted_entries(&split_dir)? {
            if !class_dir.is_dir() {
                continue;
            }
            let class_name = class_dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Manifest(format!("non-UTF-8 path {}", class_dir.display())))?
                .to_string();
            let mut count = 0;
            for file in sorted_entries(&class_dir)? {
                if !file.is_file() || !is_image_file(&file) {
                    continue;
                }
                if let Err(e) = readable_image(&file) {
                    warnings.push(format!("skipping unreadable {}: {e}", file.display()));
                    skipped += 1;
                    continue;
                }
                let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                records.push(Record {
                    id: 0,
                    path: format!("{split}/{class_name}/{name}"),
                    class_name: class_name.clone(),
                    split,
                });
                count += 1;
            }
            if count == 0 {
                warnings.push(format!("empty class directory {}", class_dir.display()));
            }
        }
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    for (k, r) in records.iter_mut().enumerate() {
        r.id = k;
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let manifest = DatasetManifest { records };
    let classes = manifest.validate()?;
    Ok(ScanResult {
        manifest,
        classes,
        warnings,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    pub resize_side: usize,
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            resize_side: 512,
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resize_side == 0 {
            return Err(Error::InvalidConfig("resize_side must be positive".into()));
        }
        if self.channel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidConfig("channel_std must be positive".into()));
        }
        Ok(())
    }

    /// Short stable digest identifying this preprocessing in cache keys.
    pub fn hash(&self) -> String {
        let canonical = format!(
            "bilinear;{};{:?};{:?}",
            self.resize_side, self.channel_mean, self.channel_std
        );
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }
}

/// Decode, bilinear-resize to `resize_side` square, scale to [0,1], normalize.
pub fn load_and_preprocess(path: &Path, spec: &PreprocessSpec) -> Result<ImageTensor> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::input(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::input(path, e))?
        .decode()
        .map_err(|e| Error::input(path, e))?;
    let side = spec.resize_side as u32;
    let rgb = img.to_rgb32f();
    let resized = if rgb.width() == side && rgb.height() == side {
        rgb
    } else {
        image::imageops::resize(&rgb, side, side, FilterType::Triangle)
    };
    let s = spec.resize_side;
    let mut data = vec![0.0f32; 3 * s * s];
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            let v = (px.0[c] - spec.channel_mean[c]) / spec.channel_std[c];
            data[(c * s + y as usize) * s + x as usize] = v;
        }
    }
    ImageTensor::new(s, data)
}

/// Identity of one embedding space.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StoreKey {
    pub fingerprint: ModelFingerprint,
    pub circuit: CircuitSpec,
    pub preprocess_hash: String,
}

/// Unit-norm embeddings for a set of record ids under one [`StoreKey`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub key: StoreKey,
    pub ids: Vec<usize>,
    pub dim: usize,
    /// Row-major `ids.len() x dim`.
    pub data: Vec<f32>,
}

const CACHE_MAGIC: &[u8; 8] = b"CDUPEMB\0";
const CACHE_VERSION: u32 = 1;

impl EmbeddingStore {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.ids.len() * self.dim {
            return Err(Error::Cache(format!(
                "store has {} values for {} rows of dim {}",
                self.data.len(),
                self.ids.len(),
                self.dim
            )));
        }
        for k in 0..self.len() {
            let n = self.row(k).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::Cache(format!("row {k} has norm {n}")));
            }
        }
        Ok(())
    }

    /// Cache file layout, all integers little-endian:
    /// magic (8) | version u32 | fingerprint (u32 len + utf8) |
    /// circuit (u8 tag, u32 entry, u32 exit) | preprocess hash (u32 len + utf8) |
    /// n u64 | dim u32 | ids n x u64 | data n x dim f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.ids.len() * 8 + self.data.len() * 4);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, self.key.fingerprint.as_str());
        let (tag, entry, exit) = match self.key.circuit {
            CircuitSpec::Standard => (0u8, 0u32, 0u32),
            CircuitSpec::Duplicated { entry, exit } => (1, entry as u32, exit as u32),
        };
        out.push(tag);
        out.extend_from_slice(&entry.to_le_bytes());
        out.extend_from_slice(&exit.to_le_bytes());
        put_str(&mut out, &self.key.preprocess_hash);
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(*id as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        fn take<'a>(b: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
            if b.len() < n {
                return Err(Error::Cache("truncated cache file".into()));
            }
            let (head, tail) = b.split_at(n);
            *b = tail;
            Ok(head)
        }
        fn u32_(b: &mut &[u8]) -> Result<u32> {
            Ok(u32::from_le_bytes(take(b, 4)?.try_into().unwrap()))
        }
        fn u64_(b: &mut &[u8]) -> Result<u64> {
            Ok(u64::from_le_bytes(take(b, 8)?.try_into().unwrap()))
        }
        fn str_(b: &mut &[u8]) -> Result<String> {
            let n = u32_(b)? as usize;
            String::from_utf8(take(b, n)?.to_vec()).map_err(|e| Error::Cache(e.to_string()))
        }

        let b = &mut bytes;
        if take(b, 8)? != CACHE_MAGIC {
            return Err(Error::Cache("bad magic".into()));
        }
        let version = u32_(b)?;
        if version != CACHE_VERSION {
            return Err(Error::Cache(format!("unsupported cache version {version}")));
        }
        let fingerprint = ModelFingerprint(str_(b)?);
        let tag = take(b, 1)?[0];
        let entry = u32_(b)? as usize;
        let exit = u32_(b)? as usize;
        let circuit = match tag {
            0 => CircuitSpec::Standard,
            1 => CircuitSpec::Duplicated { entry, exit },
            t => return Err(Error::Cache(format!("bad circuit tag {t}"))),
        };
        let preprocess_hash = str_(b)?;
        let n = u64_(b)? as usize;
        let dim = u32_(b)? as usize;
        let ids = (0..n).map(|_| u64_(b).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let raw = take(b, n * dim * 4)?;
        if !b.is_empty() {
            return Err(Error::Cache("trailing bytes in cache file".into()));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            key: StoreKey {
                fingerprint,
                circuit,
                preprocess_hash,
            },
            ids,
            dim,
            data,
        })
    }
}

/// Directory of per-circuit store files for one (model, preprocess) pair.
#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    root: PathBuf,
}

impl EmbeddingCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, key: &StoreKey) -> PathBuf {
        let fp = &key.fingerprint.as_str()[..key.fingerprint.as_str().len().min(16)];
        self.root
            .join(format!("{fp}-{}", key.preprocess_hash))
            .join(format!("circuit-{}.emb", key.circuit))
    }

    /// Returns the cached store only when its key and id list match exactly.
    pub fn load(&self, key: &StoreKey, ids: &[usize]) -> Result<Option<EmbeddingStore>> {
        let path = self.path_for(key);
        let mut file = match std::fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let store = EmbeddingStore::from_bytes(&bytes)?;
        Ok((store.key == *key && store.ids == ids).then_some(store))
    }

    /// Write to a temporary file in the target directory, then rename.
    pub fn save(&self, store: &EmbeddingStore) -> Result<PathBuf> {
        let path = self.path_for(&store.key);
        let dir = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&store.to_bytes())?;
        tmp.flush()?;
        tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
        Ok(path)
    }
}

#[derive(Clone, Debug)]
pub struct EmbedOutcome {
    pub store: EmbeddingStore,
    /// Records that failed to decode or produced a degenerate embedding.
    pub failures: Vec<(usize, String)>,
    pub cache_hit: bool,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    /// One outcome per requested circuit, same order.
    pub outcomes: Vec<EmbedOutcome>,
    /// Images pushed through the backbone; zero when every circuit was cached.
    pub forward_passes: usize,
}

/// Embed `records` under every circuit, reusing cached stores where possible.
///
/// Each image is decoded once and pushed through [`embed_image_sweep`] for
/// all uncached circuits. Images run in parallel; results are collected in
/// record order, so the output is schedule-independent.
pub fn compute_embeddings(
    records: &[Record],
    dataset_root: &Path,
    model: &LoadedModel,
    circuits: &[CircuitSpec],
    spec: &PreprocessSpec,
    cache: Option<&EmbeddingCache>,
) -> Result<SweepOutcome> {
    spec.validate()?;
    if spec.resize_side != model.config.image_side {
        return Err(Error::InvalidConfig(format!(
            "preprocess resize_side {} differs from model image_side {}",
            spec.resize_side, model.config.image_side
        )));
    }
    for c in circuits {
        c.validate(model.config.num_layers)?;
    }
    let ids: Vec<usize> = records.iter().map(|r| r.id).collect();
    let preprocess_hash = spec.hash();
    let keys: Vec<StoreKey> = circuits
        .iter()
        .map(|&circuit| StoreKey {
            fingerprint: model.fingerprint.clone(),
            circuit,
            preprocess_hash: preprocess_hash.clone(),
        })
        .collect();

    let mut cached: Vec<Option<EmbeddingStore>> = Vec::with_capacity(keys.len());
    for key in &keys {
        cached.push(match cache {
            Some(c) => c.load(key, &ids)?,
            None => None,
        });
    }
    let missing: Vec<usize> = (0..keys.len()).filter(|&k| cached[k].is_none()).collect();
    let missing_circuits: Vec<CircuitSpec> = missing.iter().map(|&k| circuits[k]).collect();

    let forward_passes = AtomicUsize::new(0);
    let per_image: Vec<std::result::Result<Vec<std::result::Result<Vec<f32>, String>>, String>> =
        if missing.is_empty() || records.is_empty() {
            Vec::new()
        } else {
            records
                .par_iter()
                .map(|r| {
                    let image = load_and_preprocess(&dataset_root.join(&r.path), spec)
                        .map_err(|e| e.to_string())?;
                    forward_passes.fetch_add(1, Ordering::Relaxed);
                    let out = embed_image_sweep(
                        &image,
                        &model.weights,
                        &model.config,
                        &missing_circuits,
                    )
                    .map_err(|e| e.to_string())?;
                    Ok(out.into_iter().map(|e| e.map_err(|e| e.to_string())).collect())
                })
                .collect()
        };

    let dim = model.config.hidden_dim;
    let mut fresh: BTreeMap<usize, EmbedOutcome> = BTreeMap::new();
    for (slot, &k) in missing.iter().enumerate() {
        let mut store = EmbeddingStore {
            key: keys[k].clone(),
            ids: Vec::with_capacity(records.len()),
            dim,
            data: Vec::with_capacity(records.len() * dim),
        };
        let mut failures = Vec::new();
        for (r, result) in records.iter().zip(&per_image) {
            match result {
                Err(e) => failures.push((r.id, e.clone())),
                Ok(per_circuit) => match &per_circuit[slot] {
                    Ok(v) => {
                        store.ids.push(r.id);
                        store.data.extend_from_slice(v);
                    }
                    Err(e) => failures.push((r.id, e.clone())),
                },
            }
        }
        for (id, e) in &failures {
            log::warn!("record {id} under circuit {}: {e}", keys[k].circuit);
        }
        // Stores with failures are not cached: a later run should retry them.
        if let (Some(c), true) = (cache, failures.is_empty()) {
            c.save(&store)?;
        }
        fresh.insert(
            k,
            EmbedOutcome {
                store,
                failures,
                cache_hit: false,
            },
        );
    }

    let outcomes = cached
        .into_iter()
        .enumerate()
        .map(|(k, hit)| match hit {
            Some(store) => EmbedOutcome {
                store,
                failures: Vec::new(),
                cache_hit: true,
            },
            None => fresh.remove(&k).expect("computed above"),
        })
        .collect();
    Ok(SweepOutcome {
        outcomes,
        forward_passes: forward_passes.into_inner(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub image_side: usize,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class_train: 12,
            per_class_test: 6,
            image_side: 64,
            seed: 7,
        }
    }
}

struct ClassPattern {
    color: [f32; 3],
    accent: [f32; 3],
    freq: f32,
    angle: f32,
}

/// Write a class-structured synthetic dataset under `root` and scan it.
///
/// Each class has a base colour, an accent colour and a stripe orientation;
/// every image adds a random phase, a brightness jitter and pixel noise.
pub fn make_synthetic_dataset(root: &Path, params: &SyntheticParams) -> Result<ScanResult> {
    if params.num_classes == 0
        || params.per_class_train == 0
        || params.per_class_test == 0
        || params.image_side == 0
    {
        return Err(Error::InvalidConfig(
            "synthetic dataset parameters must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let patterns: Vec<ClassPattern> = (0..params.num_classes)
        .map(|_| ClassPattern {
            color: [rng.random(), rng.random(), rng.random()],
            accent: [rng.random(), rng.random(), rng.random()],
            freq: rng.random_range(1.0..4.0),
            angle: rng.random_range(0.0..std::f32::consts::PI),
        })
        .collect();
    let noise = Normal::new(0.0f32, 0.08).expect("valid std");
    let side = params.image_side;

    for (split, count) in [
        (Split::Train, params.per_class_train),
        (Split::Test, params.per_class_test),
    ] {
        for (c, pat) in patterns.iter().enumerate() {
            let dir = root.join(split.to_string()).join(format!("class_{c:02}"));
            std::fs::create_dir_all(&dir)?;
            for k in 0..count {
                let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                let jitter: f32 = rng.random_range(-0.12..0.12);
                let (sin, cos) = pat.angle.sin_cos();
                let mut img = RgbImage::new(side as u32, side as u32);
                for (x, y, px) in img.enumerate_pixels_mut() {
                    let u = x as f32 / side as f32;
                    let v = y as f32 / side as f32;
                    let wave = 0.5
                        + 0.5 * (std::f32::consts::TAU * pat.freq * (u * cos + v * sin) + phase).sin();
                    let mut rgb = [0u8; 3];
                    for ch in 0..3 {
                        let base = pat.color[ch] * (1.0 - wave) + pat.accent[ch] * wave;
                        let val = base + jitter + noise.sample(&mut rng);
                        rgb[ch] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                    *px = Rgb(rgb);
                }
                img.save(dir.join(format!("{k:04}.png")))
                    .map_err(|e| Error::input(dir.join(format!("{k:04}.png")), e))?;
            }
        }
    }
    scan_directory(root)
}
