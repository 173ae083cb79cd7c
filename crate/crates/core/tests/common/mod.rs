//! Independent reference implementations shared by the integration tests
//! and the acceptance runner. Nothing here calls the engine routine it checks.

#![allow(dead_code)]

use circuitdup_core::backbone::{
    embed_patches, pool, Activation, BackboneWeights, BlockWeights, CircuitSpec, ImageTensor, LayerNorm,
    Linear, ModelConfig,
};
use circuitdup_core::ingest::{DatasetManifest, EmbeddingStore, Record, Split, StoreKey};
use circuitdup_core::model_io::ModelFingerprint;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// 12 layers, hidden 32, 2 heads, 8x8 input, patch 4.
pub fn oracle_config() -> ModelConfig {
    ModelConfig {
        num_layers: 12,
        hidden_dim: 32,
        num_heads: 2,
        mlp_hidden_dim: 64,
        patch_size: 4,
        image_side: 8,
        num_register_tokens: 2,
        ..ModelConfig::default()
    }
}

pub fn random_image(side: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * side * side).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    ImageTensor::new(side, data).unwrap()
}

/// Layer order written as a plain loop: run each layer, and right after the
/// exit layer go back and run the entry..=exit range once more.
pub fn explicit_path(circuit: CircuitSpec, num_layers: usize) -> Vec<usize> {
    let mut path = Vec::new();
    for layer in 0..num_layers {
        path.push(layer);
        if let CircuitSpec::Duplicated { entry, exit } = circuit {
            if layer == exit {
                path.extend(entry..=exit);
            }
        }
    }
    path
}

/// Pooled embedding from folding the engine's blocks over `path`.
pub fn fold_blocks(image: &ImageTensor, w: &BackboneWeights, cfg: &ModelConfig, path: &[usize]) -> Vec<f32> {
    let mut x = embed_patches(image, w, cfg).unwrap();
    for &l in path {
        x = w.blocks[l].apply(&x, cfg);
    }
    x.data = w.norm.forward(&x.data, cfg.layernorm_eps);
    pool(&x, cfg).unwrap()
}

/// Zero the attention output and MLP down projections of blocks `range`.
pub fn zero_residual_branches(w: &mut BackboneWeights, range: std::ops::RangeInclusive<usize>) {
    for l in range {
        let b = &mut w.blocks[l];
        b.proj.weight.iter_mut().for_each(|v| *v = 0.0);
        b.proj.bias.iter_mut().for_each(|v| *v = 0.0);
        b.fc2.weight.iter_mut().for_each(|v| *v = 0.0);
        b.fc2.bias.iter_mut().for_each(|v| *v = 0.0);
    }
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

// Scalar f64 transformer.

fn linear64(l: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..l.out_dim)
                .map(|o| {
                    let w = &l.weight[o * l.in_dim..(o + 1) * l.in_dim];
                    l.bias[o] as f64 + w.iter().zip(row).map(|(a, b)| *a as f64 * b).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn layernorm64(n: &LayerNorm, x: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mu = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(k, v)| (v - mu) * inv * n.scale[k] as f64 + n.shift[k] as f64)
                .collect()
        })
        .collect()
}

fn gelu64(act: Activation, x: f64) -> f64 {
    match act {
        Activation::GeluErf => 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt())),
        Activation::GeluTanh => {
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        }
    }
}

fn block64(b: &BlockWeights, x: &[Vec<f64>], cfg: &ModelConfig) -> Vec<Vec<f64>> {
    let eps = cfg.layernorm_eps as f64;
    let d = cfg.hidden_dim;
    let hd = d / cfg.num_heads;
    let t = x.len();
    let ls = |v: &Option<Vec<f32>>, k: usize| match v {
        Some(s) if cfg.use_layerscale => s[k] as f64,
        _ => 1.0,
    };

    let qkv = linear64(&b.qkv, &layernorm64(&b.norm1, x, eps));
    let mut attn = vec![vec![0.0; d]; t];
    for h in 0..cfg.num_heads {
        let off = h * hd;
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| {
                    (0..hd).map(|c| qkv[i][off + c] * qkv[j][d + off + c]).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                attn[i][off + c] = (0..t).map(|j| e[j] / z * qkv[j][2 * d + off + c]).sum();
            }
        }
    }
    let a = linear64(&b.proj, &attn);
    let mut y: Vec<Vec<f64>> = x
        .iter()
        .zip(&a)
        .map(|(r, u)| r.iter().zip(u).enumerate().map(|(k, (p, q))| p + ls(&b.ls1, k) * q).collect())
        .collect();

    let mut hidden = linear64(&b.fc1, &layernorm64(&b.norm2, &y, eps));
    for row in hidden.iter_mut() {
        row.iter_mut().for_each(|v| *v = gelu64(cfg.activation, *v));
    }
    let m = linear64(&b.fc2, &hidden);
    for (r, u) in y.iter_mut().zip(&m) {
        for (k, (p, q)) in r.iter_mut().zip(u).enumerate() {
            *p += ls(&b.ls2, k) * q;
        }
    }
    y
}

/// Whole-model f64 reference: patchify, blocks along `path`, norm, mean-pool, L2.
pub fn naive_embed(image: &ImageTensor, w: &BackboneWeights, cfg: &ModelConfig, path: &[usize]) -> Vec<f64> {
    let p = cfg.patch_size;
    let g = cfg.image_side / p;
    let d = cfg.hidden_dim;
    let regs = cfg.num_register_tokens;
    let mut patches = Vec::new();
    for py in 0..g {
        for px in 0..g {
            let mut v = Vec::new();
            for c in 0..3 {
                for ky in 0..p {
                    for kx in 0..p {
                        v.push(image.at(c, py * p + ky, px * p + kx) as f64);
                    }
                }
            }
            patches.push(v);
        }
    }
    let proj = linear64(&w.patch_embed, &patches);
    let mut x: Vec<Vec<f64>> = Vec::new();
    x.push(w.cls_token.iter().map(|&v| v as f64).collect());
    for r in 0..regs {
        x.push(w.register_tokens[r * d..(r + 1) * d].iter().map(|&v| v as f64).collect());
    }
    x.extend(proj);
    let full = w.pos_embed.len() == x.len() * d;
    for (t, row) in x.iter_mut().enumerate() {
        let pos_row = if full {
            Some(t)
        } else if t == 0 {
            Some(0)
        } else if t > regs {
            Some(t - regs)
        } else {
            None
        };
        if let Some(pr) = pos_row {
            for k in 0..d {
                row[k] += w.pos_embed[pr * d + k] as f64;
            }
        }
    }
    for &l in path {
        x = block64(&w.blocks[l], &x, cfg);
    }
    let x = layernorm64(&w.norm, &x, cfg.layernorm_eps as f64);
    let mut mean = vec![0.0; d];
    for row in &x[1 + regs..] {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    mean.iter().map(|v| v / n).collect()
}

// Linear algebra.

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues descending with unit eigenvectors as rows.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    let vals = order.iter().map(|&i| m[i][i]).collect();
    let vecs = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (vals, vecs)
}

/// Sample covariance with `n - 1` in the denominator.
pub fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    c.iter_mut().for_each(|row| row.iter_mut().for_each(|v| *v /= (n - 1) as f64));
    c
}

/// `(1 - alpha) (I - alpha S)^-1 Y` with `S = D^-1/2 W D^-1/2` built from `w`.
pub fn closed_form_spreading(w: &[Vec<f64>], y: &[Vec<f64>], alpha: f64) -> Vec<Vec<f64>> {
    let n = w.len();
    let k = y[0].len();
    let deg: Vec<f64> = w.iter().map(|r| r.iter().sum()).collect();
    let s = DMatrix::from_fn(n, n, |i, j| {
        if deg[i] > 0.0 && deg[j] > 0.0 {
            w[i][j] / (deg[i] * deg[j]).sqrt()
        } else {
            0.0
        }
    });
    let a = DMatrix::identity(n, n) - s * alpha;
    let inv = a.try_inverse().expect("I - alpha S is invertible");
    let ym = DMatrix::from_fn(n, k, |i, j| y[i][j]);
    let f = inv * ym * (1.0 - alpha);
    (0..n).map(|i| (0..k).map(|j| f[(i, j)]).collect()).collect()
}

/// Sort every labelled point by distance then row, take `k`, majority vote,
/// tie to the class of the nearest tied neighbour.
pub fn brute_knn(points: &[Vec<f64>], labeled: &[(usize, usize)], query: &[f64], k: usize, classes: usize) -> usize {
    let mut all: Vec<(f64, usize, usize)> = labeled
        .iter()
        .map(|&(r, c)| {
            let d: f64 = points[r].iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum();
            (d, r, c)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let top = &all[..k.min(all.len())];
    let mut votes = vec![0; classes];
    for t in top {
        votes[t.2] += 1;
    }
    let best = *votes.iter().max().unwrap();
    top.iter().find(|t| votes[t.2] == best).unwrap().2
}

// Embedding spaces with known structure.

pub fn manifest(num_classes: usize, train: usize, test: usize) -> DatasetManifest {
    let mut records = Vec::new();
    for c in 0..num_classes {
        for (split, n) in [(Split::Train, train), (Split::Test, test)] {
            for k in 0..n {
                records.push(Record {
                    id: records.len(),
                    path: format!("{split}/class{c}/{k:03}.png"),
                    class_name: format!("class{c}"),
                    split,
                });
            }
        }
    }
    DatasetManifest { records }
}

/// Store in which exactly the classes in `separated` have their own
/// direction; all other classes share one noisy centre.
pub fn planted_store(
    manifest: &DatasetManifest,
    circuit: CircuitSpec,
    separated: &[usize],
    dim: usize,
    seed: u64,
) -> EmbeddingStore {
    let classes = manifest.validate().unwrap();
    let labels = manifest.labels(&classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut data = Vec::with_capacity(labels.len() * dim);
    for &c in &labels {
        let mut v: Vec<f64> = (0..dim).map(|_| noise.sample(&mut rng)).collect();
        if separated.contains(&c) {
            v[c] += 3.0;
        } else {
            v[dim - 1] += 3.0;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| (x / n) as f32));
    }
    EmbeddingStore {
        key: StoreKey {
            fingerprint: ModelFingerprint("planted".into()),
            circuit,
            preprocess_hash: "none".into(),
        },
        ids: (0..labels.len()).collect(),
        dim,
        data,
    }
}

/// Synthesized weights with block matrices scaled up so that every layer
/// visibly changes the tokens.
pub fn strong_weights(cfg: &ModelConfig, seed: u64, factor: f32) -> BackboneWeights {
    let mut w = circuitdup_core::model_io::synthesize_weights(cfg, seed);
    for b in w.blocks.iter_mut() {
        for l in [&mut b.qkv, &mut b.proj, &mut b.fc1, &mut b.fc2] {
            l.weight.iter_mut().for_each(|v| *v *= factor);
        }
    }
    w.patch_embed.weight.iter_mut().for_each(|v| *v *= factor);
    w
}
