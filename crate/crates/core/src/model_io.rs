//! Frozen weights on disk, synthetic weights, fingerprints and reference parity.
//!
//! The container is the common flat-tensor layout: an 8-byte little-endian
//! header length, a JSON header mapping tensor names to
//! `{dtype, shape, data_offsets}` (plus an optional `__metadata__` string
//! map), then the raw little-endian payload. Tensor names follow
//! `docs/weights_schema.md`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{
    embed_image, BackboneWeights, BlockWeights, CircuitSpec, ImageTensor, LayerNorm, Linear,
    ModelConfig,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

/// In-memory form of a tensor container. All tensors are float32 once loaded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorContainer {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.insert(name.into(), Tensor::new(shape, data));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Schema(name.to_string()))
    }

    /// Serialize with tensors in name order; output bytes are a pure function
    /// of the contents.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert("__metadata__".into(), serde_json::to_value(&self.metadata)?);
        }
        let mut offset = 0usize;
        for (name, tensor) in &self.tensors {
            let len = tensor.data.len() * 4;
            header.insert(
                name.clone(),
                serde_json::json!({
                    "dtype": "F32",
                    "shape": tensor.shape,
                    "data_offsets": [offset, offset + len],
                }),
            );
            offset += len;
        }
        let mut header_bytes = serde_json::to_vec(&header)?;
        header_bytes.resize(header_bytes.len().next_multiple_of(8), b' ');

        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for tensor in self.tensors.values() {
            for v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parsed =
            SafeTensors::deserialize(bytes).map_err(|e| Error::Container(e.to_string()))?;
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Container(e.to_string()))?;
        let metadata = header
            .metadata()
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default();

        let mut tensors = BTreeMap::new();
        for (name, view) in parsed.iter() {
            let data = decode_f32(name, view.dtype(), view.data())?;
            tensors.insert(name.to_string(), Tensor::new(view.shape().to_vec(), data));
        }
        Ok(Self { tensors, metadata })
    }

    pub fn write(&self, path: &Path) -> Result<ModelFingerprint> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(ModelFingerprint::of_bytes(&bytes))
    }

    pub fn read(path: &Path) -> Result<(Self, ModelFingerprint)> {
        let bytes = std::fs::read(path).map_err(|e| Error::input(path, e))?;
        Ok((Self::from_bytes(&bytes)?, ModelFingerprint::of_bytes(&bytes)))
    }
}

fn decode_f32(name: &str, dtype: Dtype, raw: &[u8]) -> Result<Vec<f32>> {
    let out = match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        Dtype::F16 => raw
            .chunks_exact(2)
            .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        Dtype::BF16 => raw
            .chunks_exact(2)
            .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()) as f32)
            .collect(),
        other => {
            return Err(Error::Container(format!(
                "tensor `{name}` has unsupported dtype {other:?}"
            )))
        }
    };
    Ok(out)
}

/// SHA-256 of the container bytes, hex encoded.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelFingerprint(pub String);

impl ModelFingerprint {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModelFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Weights plus provenance, as returned by [`load_weights`].
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub config: ModelConfig,
    pub weights: BackboneWeights,
    pub fingerprint: ModelFingerprint,
    /// Unused tensors present in the container.
    pub warnings: Vec<String>,
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[first..]
}

struct SchemaReader<'a> {
    container: &'a TensorContainer,
    used: Vec<String>,
}

impl<'a> SchemaReader<'a> {
    /// Fetch `name`, accepting extra leading singleton dimensions.
    fn take(&mut self, name: &str, expected: &[usize]) -> Result<Vec<f32>> {
        let tensor = self.container.get(name)?;
        if strip_leading_ones(&tensor.shape) != strip_leading_ones(expected) {
            return Err(Error::shape(name, expected, &tensor.shape));
        }
        self.used.push(name.to_string());
        Ok(tensor.data.clone())
    }

    fn take_optional(&mut self, name: &str, expected: &[usize]) -> Result<Option<Vec<f32>>> {
        if self.container.tensors.contains_key(name) {
            self.take(name, expected).map(Some)
        } else {
            Ok(None)
        }
    }

    fn linear(&mut self, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        Ok(Linear {
            in_dim,
            out_dim,
            weight: self.take(&format!("{prefix}.weight"), &[out_dim, in_dim])?,
            bias: self.take(&format!("{prefix}.bias"), &[out_dim])?,
        })
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            scale: self.take(&format!("{prefix}.weight"), &[dim])?,
            shift: self.take(&format!("{prefix}.bias"), &[dim])?,
        })
    }
}

pub fn weights_from_container(
    container: &TensorContainer,
    config: &ModelConfig,
) -> Result<(BackboneWeights, Vec<String>)> {
    config.validate()?;
    let d = config.hidden_dim;
    let m = config.mlp_hidden_dim;
    let p = config.patch_size;
    let r = config.num_register_tokens;
    let mut rd = SchemaReader {
        container,
        used: Vec::new(),
    };

    let patch_embed = Linear {
        in_dim: config.patch_input_dim(),
        out_dim: d,
        weight: rd.take("patch_embed.weight", &[d, 3, p, p])?,
        bias: rd.take("patch_embed.bias", &[d])?,
    };
    let cls_token = rd.take("cls_token", &[d])?;
    let register_tokens = if r > 0 {
        rd.take("register_tokens", &[r, d])?
    } else {
        Vec::new()
    };
    let pos = container.get("pos_embed")?;
    let pos_rows = if strip_leading_ones(&pos.shape) == [1 + config.num_patches(), d] {
        1 + config.num_patches()
    } else {
        config.num_tokens()
    };
    let pos_embed = rd.take("pos_embed", &[pos_rows, d])?;

    let mut blocks = Vec::with_capacity(config.num_layers);
    for n in 0..config.num_layers {
        let pre = format!("blocks.{n}");
        let (ls1, ls2) = if config.use_layerscale {
            (
                Some(rd.take(&format!("{pre}.ls1"), &[d])?),
                Some(rd.take(&format!("{pre}.ls2"), &[d])?),
            )
        } else {
            (
                rd.take_optional(&format!("{pre}.ls1"), &[d])?,
                rd.take_optional(&format!("{pre}.ls2"), &[d])?,
            )
        };
        blocks.push(BlockWeights {
            norm1: rd.norm(&format!("{pre}.norm1"), d)?,
            qkv: rd.linear(&format!("{pre}.attn.qkv"), d, 3 * d)?,
            proj: rd.linear(&format!("{pre}.attn.proj"), d, d)?,
            norm2: rd.norm(&format!("{pre}.norm2"), d)?,
            fc1: rd.linear(&format!("{pre}.mlp.fc1"), d, m)?,
            fc2: rd.linear(&format!("{pre}.mlp.fc2"), m, d)?,
            ls1,
            ls2,
        });
    }
    let norm = rd.norm("norm", d)?;

    let weights = BackboneWeights {
        patch_embed,
        cls_token,
        register_tokens,
        pos_embed,
        blocks,
        norm,
    };
    weights.validate(config)?;

    let warnings = container
        .tensors
        .keys()
        .filter(|k| !rd.used.contains(k))
        .map(|k| format!("unused tensor `{k}`"))
        .collect();
    Ok((weights, warnings))
}

pub fn weights_to_container(weights: &BackboneWeights, config: &ModelConfig) -> TensorContainer {
    let d = config.hidden_dim;
    let p = config.patch_size;
    let mut c = TensorContainer::default();
    let put_linear = |c: &mut TensorContainer, prefix: &str, l: &Linear| {
        c.insert(
            format!("{prefix}.weight"),
            vec![l.out_dim, l.in_dim],
            l.weight.clone(),
        );
        c.insert(format!("{prefix}.bias"), vec![l.out_dim], l.bias.clone());
    };
    let put_norm = |c: &mut TensorContainer, prefix: &str, n: &LayerNorm| {
        c.insert(format!("{prefix}.weight"), vec![n.scale.len()], n.scale.clone());
        c.insert(format!("{prefix}.bias"), vec![n.shift.len()], n.shift.clone());
    };

    c.insert(
        "patch_embed.weight",
        vec![d, 3, p, p],
        weights.patch_embed.weight.clone(),
    );
    c.insert("patch_embed.bias", vec![d], weights.patch_embed.bias.clone());
    c.insert("cls_token", vec![d], weights.cls_token.clone());
    if config.num_register_tokens > 0 {
        c.insert(
            "register_tokens",
            vec![config.num_register_tokens, d],
            weights.register_tokens.clone(),
        );
    }
    c.insert(
        "pos_embed",
        vec![weights.pos_embed.len() / d, d],
        weights.pos_embed.clone(),
    );
    for (n, b) in weights.blocks.iter().enumerate() {
        let pre = format!("blocks.{n}");
        put_norm(&mut c, &format!("{pre}.norm1"), &b.norm1);
        put_linear(&mut c, &format!("{pre}.attn.qkv"), &b.qkv);
        put_linear(&mut c, &format!("{pre}.attn.proj"), &b.proj);
        put_norm(&mut c, &format!("{pre}.norm2"), &b.norm2);
        put_linear(&mut c, &format!("{pre}.mlp.fc1"), &b.fc1);
        put_linear(&mut c, &format!("{pre}.mlp.fc2"), &b.fc2);
        if let Some(ls) = &b.ls1 {
            c.insert(format!("{pre}.ls1"), vec![d], ls.clone());
        }
        if let Some(ls) = &b.ls2 {
            c.insert(format!("{pre}.ls2"), vec![d], ls.clone());
        }
    }
    put_norm(&mut c, "norm", &weights.norm);
    c
}

pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<LoadedModel> {
    let (container, fingerprint) = TensorContainer::read(path)?;
    let (weights, warnings) = weights_from_container(&container, config)?;
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(LoadedModel {
        config: config.clone(),
        weights,
        fingerprint,
        warnings,
    })
}

pub fn save_weights(
    path: &Path,
    weights: &BackboneWeights,
    config: &ModelConfig,
) -> Result<ModelFingerprint> {
    weights.validate(config)?;
    weights_to_container(weights, config).write(path)
}

/// Fingerprint of the canonical serialization, used for synthetic models
/// that never touch disk.
pub fn fingerprint_weights(weights: &BackboneWeights, config: &ModelConfig) -> Result<ModelFingerprint> {
    let bytes = weights_to_container(weights, config).to_bytes()?;
    Ok(ModelFingerprint::of_bytes(&bytes))
}

const SYNTH_STD: f64 = 0.02;

/// Deterministic Gaussian weights (std 0.02) with unit norms and zero biases.
///
/// Tensors are drawn from one ChaCha8 stream in a fixed order, so the values
/// depend only on `config` and `seed`.
pub fn synthesize_weights(config: &ModelConfig, seed: u64) -> BackboneWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |n: usize| -> Vec<f32> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * SYNTH_STD) as f32
            })
            .collect()
    };
    let d = config.hidden_dim;
    let m = config.mlp_hidden_dim;

    let linear = |gauss: &mut dyn FnMut(usize) -> Vec<f32>, i: usize, o: usize| Linear {
        in_dim: i,
        out_dim: o,
        weight: gauss(i * o),
        bias: vec![0.0; o],
    };

    let patch_embed = linear(&mut gauss, config.patch_input_dim(), d);
    let cls_token = gauss(d);
    let register_tokens = gauss(config.num_register_tokens * d);
    let pos_embed = gauss(config.num_tokens() * d);
    let blocks = (0..config.num_layers)
        .map(|_| BlockWeights {
            norm1: LayerNorm::identity(d),
            qkv: linear(&mut gauss, d, 3 * d),
            proj: linear(&mut gauss, d, d),
            norm2: LayerNorm::identity(d),
            fc1: linear(&mut gauss, d, m),
            fc2: linear(&mut gauss, m, d),
            ls1: config.use_layerscale.then(|| vec![0.1; d]),
            ls2: config.use_layerscale.then(|| vec![0.1; d]),
        })
        .collect();

    BackboneWeights {
        patch_embed,
        cls_token,
        register_tokens,
        pos_embed,
        blocks,
        norm: LayerNorm::identity(d),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceCase {
    pub circuit: CircuitSpec,
    pub embedding: Vec<f32>,
}

/// Fixed input plus expected pooled embeddings, for cross-implementation parity.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceBundle {
    pub input: ImageTensor,
    pub cases: Vec<ReferenceCase>,
    pub tolerance: f32,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    circuits: Vec<CircuitSpec>,
    tolerance: f32,
}

const BUNDLE_META_KEY: &str = "reference";

impl ReferenceBundle {
    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::default();
        let s = self.input.side;
        c.insert("ref.input", vec![3, s, s], self.input.data.clone());
        for (k, case) in self.cases.iter().enumerate() {
            c.insert(
                format!("ref.case.{k}.embedding"),
                vec![case.embedding.len()],
                case.embedding.clone(),
            );
        }
        let meta = BundleMeta {
            circuits: self.cases.iter().map(|c| c.circuit).collect(),
            tolerance: self.tolerance,
        };
        c.metadata
            .insert(BUNDLE_META_KEY.into(), serde_json::to_string(&meta)?);
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let raw = c
            .metadata
            .get(BUNDLE_META_KEY)
            .ok_or_else(|| Error::Schema(format!("__metadata__.{BUNDLE_META_KEY}")))?;
        let meta: BundleMeta = serde_json::from_str(raw)?;

        let input = c.get("ref.input")?;
        let shape = strip_leading_ones(&input.shape);
        if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
            return Err(Error::shape("ref.input", &[3, 0, 0], &input.shape));
        }
        let input = ImageTensor::new(shape[1], input.data.clone())?;

        let mut cases = Vec::with_capacity(meta.circuits.len());
        for (k, circuit) in meta.circuits.into_iter().enumerate() {
            let embedding = c.get(&format!("ref.case.{k}.embedding"))?.data.clone();
            let norm = embedding
                .iter()
                .map(|v| (*v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::Container(format!(
                    "reference case {k} embedding has norm {norm}, expected unit norm"
                )));
            }
            cases.push(ReferenceCase { circuit, embedding });
        }
        Ok(Self {
            input,
            cases,
            tolerance: meta.tolerance,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (c, _) = TensorContainer::read(path)?;
        Self::from_container(&c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)?;
        Ok(())
    }

    /// Bundle produced by this engine itself; mainly for tests and tooling.
    pub fn generate(
        weights: &BackboneWeights,
        config: &ModelConfig,
        input: ImageTensor,
        circuits: &[CircuitSpec],
        tolerance: f32,
    ) -> Result<Self> {
        let cases = circuits
            .iter()
            .map(|&circuit| {
                Ok(ReferenceCase {
                    circuit,
                    embedding: embed_image(&input, weights, config, circuit)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input,
            cases,
            tolerance,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseParity {
    pub circuit: CircuitSpec,
    pub max_abs_deviation: f32,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParityReport {
    pub tolerance: f32,
    pub cases: Vec<CaseParity>,
    pub warnings: Vec<String>,
    pub pass: bool,
}

pub fn verify_reference(
    weights: &BackboneWeights,
    config: &ModelConfig,
    bundle: &ReferenceBundle,
) -> Result<ParityReport> {
    for case in &bundle.cases {
        case.circuit.validate(config.num_layers)?;
    }
    let mut warnings = Vec::new();
    if bundle.cases.is_empty() {
        warnings.push("reference bundle has no cases".to_string());
        log::warn!("reference bundle has no cases");
    }
    let mut cases = Vec::with_capacity(bundle.cases.len());
    for case in &bundle.cases {
        let got = embed_image(&bundle.input, weights, config, case.circuit)?;
        if got.len() != case.embedding.len() {
            return Err(Error::shape(
                format!("reference embedding for {}", case.circuit),
                &[got.len()],
                &[case.embedding.len()],
            ));
        }
        let dev = got
            .iter()
            .zip(&case.embedding)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        cases.push(CaseParity {
            circuit: case.circuit,
            max_abs_deviation: dev,
            pass: dev <= bundle.tolerance,
        });
    }
    let pass = cases.iter().all(|c| c.pass);
    Ok(ParityReport {
        tolerance: bundle.tolerance,
        cases,
        warnings,
        pass,
    })
}
