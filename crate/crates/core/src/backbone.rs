//! Vision-transformer encoder with a re-entrant layer path.
//!
//! The encoder is a standard pre-norm ViT. A [`CircuitSpec`] only changes
//! the order in which the existing blocks are applied; weights are never
//! touched. `Duplicated { entry: i, exit: j }` runs blocks `0..=j`, then
//! re-enters at `i` and runs `i..=j` again before finishing `j+1..L`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact GELU, `0.5 x (1 + erf(x / sqrt 2))`.
    #[default]
    GeluErf,
    /// Tanh approximation used by some checkpoints.
    GeluTanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f32) -> f32 {
        let x = x as f64;
        let y = match self {
            Activation::GeluErf => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::GeluTanh => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
            }
        };
        y as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden_dim: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub num_register_tokens: usize,
    pub layernorm_eps: f32,
    pub use_layerscale: bool,
    pub activation: Activation,
}

impl Default for ModelConfig {
    /// ViT-B/16 geometry at 512x512 input.
    fn default() -> Self {
        Self {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            mlp_hidden_dim: 3072,
            patch_size: 16,
            image_side: 512,
            num_register_tokens: 4,
            layernorm_eps: 1e-6,
            use_layerscale: false,
            activation: Activation::GeluErf,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_layers < 2 {
            return fail(format!("num_layers must be >= 2, got {}", self.num_layers));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.mlp_hidden_dim == 0 {
            return fail("hidden_dim, num_heads and mlp_hidden_dim must be positive".into());
        }
        if self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.patch_size == 0 || self.image_side == 0 || self.image_side % self.patch_size != 0 {
            return fail(format!(
                "image_side {} is not a positive multiple of patch_size {}",
                self.image_side, self.patch_size
            ));
        }
        if !(self.layernorm_eps > 0.0) {
            return fail("layernorm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Index of the first patch token.
    pub fn patch_offset(&self) -> usize {
        1 + self.num_register_tokens
    }

    pub fn num_tokens(&self) -> usize {
        self.patch_offset() + self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn patch_input_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Which layer range, if any, is traversed twice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum CircuitSpec {
    #[default]
    Standard,
    Duplicated { entry: usize, exit: usize },
}

impl CircuitSpec {
    pub fn duplicated(entry: usize, exit: usize) -> Self {
        CircuitSpec::Duplicated { entry, exit }
    }

    pub fn is_standard(&self) -> bool {
        matches!(self, CircuitSpec::Standard)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        match *self {
            CircuitSpec::Standard => Ok(()),
            CircuitSpec::Duplicated { entry, exit } => {
                if entry < exit && exit < num_layers {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!(
                        "circuit ({entry},{exit}) is invalid for {num_layers} layers"
                    )))
                }
            }
        }
    }

    /// Number of repeated layers; zero for the standard pass.
    pub fn span(&self) -> usize {
        match *self {
            CircuitSpec::Standard => 0,
            CircuitSpec::Duplicated { entry, exit } => exit - entry + 1,
        }
    }

    pub fn bounds(&self) -> Option<(usize, usize)> {
        match *self {
            CircuitSpec::Standard => None,
            CircuitSpec::Duplicated { entry, exit } => Some((entry, exit)),
        }
    }
}

impl fmt::Display for CircuitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CircuitSpec::Standard => f.write_str("standard"),
            CircuitSpec::Duplicated { entry, exit } => write!(f, "{entry}-{exit}"),
        }
    }
}

impl FromStr for CircuitSpec {
    type Err = Error;

    /// Accepts `standard`, `i-j` or `i,j`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("standard") {
            return Ok(CircuitSpec::Standard);
        }
        let bad = || Error::InvalidConfig(format!("cannot parse circuit `{s}`"));
        let (a, b) = s.split_once(['-', ',']).ok_or_else(bad)?;
        let entry = a.trim().parse().map_err(|_| bad())?;
        let exit = b.trim().parse().map_err(|_| bad())?;
        if entry >= exit {
            return Err(bad());
        }
        Ok(CircuitSpec::Duplicated { entry, exit })
    }
}

impl Serialize for CircuitSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CircuitSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All duplicated circuits `(i, j)` with `i < j`, in lexicographic order.
pub fn enumerate_circuits(num_layers: usize) -> Result<Vec<CircuitSpec>> {
    if num_layers < 2 {
        return Err(Error::InvalidConfig(format!(
            "num_layers must be >= 2, got {num_layers}"
        )));
    }
    let mut circuits = Vec::with_capacity(num_layers * (num_layers - 1) / 2);
    for entry in 0..num_layers {
        for exit in entry + 1..num_layers {
            circuits.push(CircuitSpec::Duplicated { entry, exit });
        }
    }
    Ok(circuits)
}

/// Layer indices in execution order.
pub fn effective_layer_path(circuit: CircuitSpec, num_layers: usize) -> Vec<usize> {
    match circuit {
        CircuitSpec::Standard => (0..num_layers).collect(),
        CircuitSpec::Duplicated { entry, exit } => (0..=exit)
            .chain(entry..=exit)
            .chain(exit + 1..num_layers)
            .collect(),
    }
}

/// Preprocessed image in channel-major (3 x side x side) layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub side: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * side * side {
            return Err(Error::shape("image", &[3, side, side], &[data.len()]));
        }
        Ok(Self { side, data })
    }

    #[inline]
    pub fn at(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.side + y) * self.side + x]
    }
}

/// Row-major token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub num_tokens: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl TokenSequence {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Affine layer with a torch-layout weight (`out_dim x in_dim`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// `x` is `rows x in_dim`; returns `rows x out_dim`.
    pub fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let mut out = vec![0.0f32; rows * self.out_dim];
        if rows > 0 {
            // SAFETY: slice lengths match the dimensions and strides passed.
            unsafe {
                matrixmultiply::sgemm(
                    rows,
                    self.in_dim,
                    self.out_dim,
                    1.0,
                    x.as_ptr(),
                    self.in_dim as isize,
                    1,
                    self.weight.as_ptr(),
                    1,
                    self.in_dim as isize,
                    0.0,
                    out.as_mut_ptr(),
                    self.out_dim as isize,
                    1,
                );
            }
        }
        for row in out.chunks_exact_mut(self.out_dim) {
            for (o, b) in row.iter_mut().zip(&self.bias) {
                *o += *b;
            }
        }
        out
    }

    fn check(&self, what: &str, in_dim: usize, out_dim: usize) -> Result<()> {
        if self.in_dim != in_dim || self.out_dim != out_dim {
            return Err(Error::shape(what, &[out_dim, in_dim], &[self.out_dim, self.in_dim]));
        }
        if self.weight.len() != in_dim * out_dim {
            return Err(Error::shape(
                format!("{what}.weight"),
                &[out_dim, in_dim],
                &[self.weight.len()],
            ));
        }
        if self.bias.len() != out_dim {
            return Err(Error::shape(format!("{what}.bias"), &[out_dim], &[self.bias.len()]));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &[f32], eps: f32) -> Vec<f32> {
        let dim = self.scale.len();
        let mut out = vec![0.0f32; x.len()];
        for (src, dst) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / dim as f64;
            let var = src
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / dim as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for k in 0..dim {
                let normed = ((src[k] as f64 - mean) * inv) as f32;
                dst[k] = normed * self.scale[k] + self.shift[k];
            }
        }
        out
    }

    fn check(&self, what: &str, dim: usize) -> Result<()> {
        if self.scale.len() != dim || self.shift.len() != dim {
            return Err(Error::shape(what, &[dim], &[self.scale.len(), self.shift.len()]));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub norm1: LayerNorm,
    /// Rows are `[q; k; v]`, each `hidden_dim` wide.
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ls1: Option<Vec<f32>>,
    pub ls2: Option<Vec<f32>>,
}

impl BlockWeights {
    /// One pre-norm residual block: attention then MLP.
    pub fn apply(&self, tokens: &TokenSequence, config: &ModelConfig) -> TokenSequence {
        let t = tokens.num_tokens;
        let dim = tokens.dim;
        let eps = config.layernorm_eps;
        let layerscale = config.use_layerscale;

        let mut x = tokens.data.clone();

        let h = self.norm1.forward(&x, eps);
        let attn = self.proj.forward(&self.attention(&h, t, config), t);
        add_residual(&mut x, &attn, self.ls1.as_deref().filter(|_| layerscale), dim);

        let h = self.norm2.forward(&x, eps);
        let mut hidden = self.fc1.forward(&h, t);
        for v in hidden.iter_mut() {
            *v = config.activation.apply(*v);
        }
        let mlp = self.fc2.forward(&hidden, t);
        add_residual(&mut x, &mlp, self.ls2.as_deref().filter(|_| layerscale), dim);

        TokenSequence {
            num_tokens: t,
            dim,
            data: x,
        }
    }

    /// Multi-head scaled dot-product self-attention before the output projection.
    fn attention(&self, h: &[f32], t: usize, config: &ModelConfig) -> Vec<f32> {
        let dim = config.hidden_dim;
        let hd = config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let qkv = self.qkv.forward(h, t);

        let mut out = vec![0.0f32; t * dim];
        let mut q = vec![0.0f32; t * hd];
        let mut k = vec![0.0f32; t * hd];
        let mut v = vec![0.0f32; t * hd];
        let mut scores = vec![0.0f32; t * t];
        let mut head_out = vec![0.0f32; t * hd];

        for head in 0..config.num_heads {
            for r in 0..t {
                let row = &qkv[r * 3 * dim..(r + 1) * 3 * dim];
                let off = head * hd;
                q[r * hd..(r + 1) * hd].copy_from_slice(&row[off..off + hd]);
                k[r * hd..(r + 1) * hd].copy_from_slice(&row[dim + off..dim + off + hd]);
                v[r * hd..(r + 1) * hd].copy_from_slice(&row[2 * dim + off..2 * dim + off + hd]);
            }
            // scores = scale * q k^T
            // SAFETY: buffers are sized t*hd, t*hd and t*t.
            unsafe {
                matrixmultiply::sgemm(
                    t,
                    hd,
                    t,
                    scale,
                    q.as_ptr(),
                    hd as isize,
                    1,
                    k.as_ptr(),
                    1,
                    hd as isize,
                    0.0,
                    scores.as_mut_ptr(),
                    t as isize,
                    1,
                );
            }
            for row in scores.chunks_exact_mut(t) {
                softmax_in_place(row);
            }
            // SAFETY: buffers are sized t*t, t*hd and t*hd.
            unsafe {
                matrixmultiply::sgemm(
                    t,
                    t,
                    hd,
                    1.0,
                    scores.as_ptr(),
                    t as isize,
                    1,
                    v.as_ptr(),
                    hd as isize,
                    1,
                    0.0,
                    head_out.as_mut_ptr(),
                    hd as isize,
                    1,
                );
            }
            for r in 0..t {
                out[r * dim + head * hd..r * dim + (head + 1) * hd]
                    .copy_from_slice(&head_out[r * hd..(r + 1) * hd]);
            }
        }
        out
    }

    fn validate(&self, n: usize, config: &ModelConfig) -> Result<()> {
        let d = config.hidden_dim;
        let m = config.mlp_hidden_dim;
        self.norm1.check(&format!("blocks.{n}.norm1"), d)?;
        self.qkv.check(&format!("blocks.{n}.attn.qkv"), d, 3 * d)?;
        self.proj.check(&format!("blocks.{n}.attn.proj"), d, d)?;
        self.norm2.check(&format!("blocks.{n}.norm2"), d)?;
        self.fc1.check(&format!("blocks.{n}.mlp.fc1"), d, m)?;
        self.fc2.check(&format!("blocks.{n}.mlp.fc2"), m, d)?;
        for (name, ls) in [("ls1", &self.ls1), ("ls2", &self.ls2)] {
            match ls {
                Some(v) if v.len() != d => {
                    return Err(Error::shape(format!("blocks.{n}.{name}"), &[d], &[v.len()]))
                }
                None if config.use_layerscale => {
                    return Err(Error::Schema(format!("blocks.{n}.{name}")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn add_residual(x: &mut [f32], delta: &[f32], gamma: Option<&[f32]>, dim: usize) {
    match gamma {
        Some(g) => {
            for (xr, dr) in x.chunks_exact_mut(dim).zip(delta.chunks_exact(dim)) {
                for k in 0..dim {
                    xr[k] += g[k] * dr[k];
                }
            }
        }
        None => {
            for (a, b) in x.iter_mut().zip(delta) {
                *a += *b;
            }
        }
    }
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    /// Convolution kernel flattened to `hidden_dim x (3 * p * p)`, channel-major.
    pub patch_embed: Linear,
    pub cls_token: Vec<f32>,
    /// `num_register_tokens x hidden_dim`.
    pub register_tokens: Vec<f32>,
    /// Either one row per token, or `1 + num_patches` rows covering only the
    /// class and patch tokens (register tokens then carry no position).
    pub pos_embed: Vec<f32>,
    pub blocks: Vec<BlockWeights>,
    pub norm: LayerNorm,
}

impl BackboneWeights {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let d = config.hidden_dim;
        self.patch_embed
            .check("patch_embed", config.patch_input_dim(), d)?;
        if self.cls_token.len() != d {
            return Err(Error::shape("cls_token", &[d], &[self.cls_token.len()]));
        }
        let r = config.num_register_tokens;
        if self.register_tokens.len() != r * d {
            return Err(Error::shape(
                "register_tokens",
                &[r, d],
                &[self.register_tokens.len()],
            ));
        }
        let rows = self.pos_embed.len() / d;
        if self.pos_embed.len() % d != 0
            || (rows != config.num_tokens() && rows != 1 + config.num_patches())
        {
            return Err(Error::shape(
                "pos_embed",
                &[config.num_tokens(), d],
                &[self.pos_embed.len()],
            ));
        }
        if self.blocks.len() != config.num_layers {
            return Err(Error::shape(
                "blocks",
                &[config.num_layers],
                &[self.blocks.len()],
            ));
        }
        for (n, block) in self.blocks.iter().enumerate() {
            block.validate(n, config)?;
        }
        self.norm.check("norm", d)
    }
}

/// Patchify, project, prepend class and register tokens, add positions.
pub fn embed_patches(
    image: &ImageTensor,
    weights: &BackboneWeights,
    config: &ModelConfig,
) -> Result<TokenSequence> {
    if image.side != config.image_side || image.data.len() != 3 * image.side * image.side {
        return Err(Error::shape(
            "image",
            &[3, config.image_side, config.image_side],
            &[image.data.len() / (image.side * image.side).max(1), image.side, image.side],
        ));
    }
    let p = config.patch_size;
    let g = config.grid_side();
    let d = config.hidden_dim;
    let kin = config.patch_input_dim();

    let mut patches = vec![0.0f32; g * g * kin];
    for py in 0..g {
        for px in 0..g {
            let dst = &mut patches[(py * g + px) * kin..(py * g + px + 1) * kin];
            let mut idx = 0;
            for c in 0..3 {
                for ky in 0..p {
                    for kx in 0..p {
                        dst[idx] = image.at(c, py * p + ky, px * p + kx);
                        idx += 1;
                    }
                }
            }
        }
    }
    let projected = weights.patch_embed.forward(&patches, g * g);

    let n_tokens = config.num_tokens();
    let offset = config.patch_offset();
    let mut data = vec![0.0f32; n_tokens * d];
    data[..d].copy_from_slice(&weights.cls_token);
    data[d..offset * d].copy_from_slice(&weights.register_tokens);
    data[offset * d..].copy_from_slice(&projected);

    let pos = &weights.pos_embed;
    if pos.len() == n_tokens * d {
        for (a, b) in data.iter_mut().zip(pos) {
            *a += *b;
        }
    } else {
        for k in 0..d {
            data[k] += pos[k];
        }
        for (a, b) in data[offset * d..].iter_mut().zip(&pos[d..]) {
            *a += *b;
        }
    }

    Ok(TokenSequence {
        num_tokens: n_tokens,
        dim: d,
        data,
    })
}

/// Apply the blocks along the circuit's effective path, then the final norm.
pub fn forward(
    tokens: &TokenSequence,
    weights: &BackboneWeights,
    config: &ModelConfig,
    circuit: CircuitSpec,
) -> Result<TokenSequence> {
    circuit.validate(config.num_layers)?;
    if tokens.dim != config.hidden_dim {
        return Err(Error::shape(
            "tokens",
            &[tokens.num_tokens, config.hidden_dim],
            &[tokens.num_tokens, tokens.dim],
        ));
    }
    let mut x = tokens.clone();
    for layer in effective_layer_path(circuit, config.num_layers) {
        x = weights.blocks[layer].apply(&x, config);
        if !x.all_finite() {
            return Err(Error::Numeric { layer });
        }
    }
    x.data = weights.norm.forward(&x.data, config.layernorm_eps);
    Ok(x)
}

/// [`forward`] for several circuits at once.
///
/// Every circuit's path starts with the standard prefix `0..=exit`, so the
/// standard-pass hidden states are computed once and each duplicated circuit
/// resumes from the state after its exit layer. Results are bitwise equal to
/// calling [`forward`] per circuit.
pub fn forward_sweep(
    tokens: &TokenSequence,
    weights: &BackboneWeights,
    config: &ModelConfig,
    circuits: &[CircuitSpec],
) -> Vec<Result<TokenSequence>> {
    let n_layers = config.num_layers;
    // states[k] holds the tokens after layers 0..k.
    let mut states: Vec<TokenSequence> = Vec::with_capacity(n_layers + 1);
    states.push(tokens.clone());
    let mut failed_at = None;
    for layer in 0..n_layers {
        let next = weights.blocks[layer].apply(&states[layer], config);
        if !next.all_finite() {
            failed_at = Some(layer);
            break;
        }
        states.push(next);
    }

    circuits
        .iter()
        .map(|&circuit| {
            circuit.validate(n_layers)?;
            let resume = match circuit {
                CircuitSpec::Standard => n_layers,
                CircuitSpec::Duplicated { exit, .. } => exit + 1,
            };
            if let Some(layer) = failed_at.filter(|&l| l < resume) {
                return Err(Error::Numeric { layer });
            }
            let mut x = states[resume].clone();
            if let CircuitSpec::Duplicated { entry, exit } = circuit {
                for layer in (entry..=exit).chain(exit + 1..n_layers) {
                    x = weights.blocks[layer].apply(&x, config);
                    if !x.all_finite() {
                        return Err(Error::Numeric { layer });
                    }
                }
            }
            x.data = weights.norm.forward(&x.data, config.layernorm_eps);
            Ok(x)
        })
        .collect()
}

/// Mean of the patch tokens, scaled to unit length.
pub fn pool(tokens: &TokenSequence, config: &ModelConfig) -> Result<Vec<f32>> {
    let offset = config.patch_offset();
    let d = tokens.dim;
    let n = tokens.num_tokens.saturating_sub(offset);
    if n == 0 {
        return Err(Error::shape(
            "tokens",
            &[config.num_tokens(), d],
            &[tokens.num_tokens, d],
        ));
    }
    let mut mean = vec![0.0f64; d];
    for t in offset..tokens.num_tokens {
        for (m, &v) in mean.iter_mut().zip(tokens.row(t)) {
            *m += v as f64;
        }
    }
    let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt() / n as f64;
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    let scale = 1.0 / (norm * n as f64);
    Ok(mean.iter().map(|m| (m * scale) as f32).collect())
}

pub fn embed_image(
    image: &ImageTensor,
    weights: &BackboneWeights,
    config: &ModelConfig,
    circuit: CircuitSpec,
) -> Result<Vec<f32>> {
    let tokens = embed_patches(image, weights, config)?;
    let out = forward(&tokens, weights, config, circuit)?;
    pool(&out, config)
}

/// Pooled embeddings of one image for several circuits; see [`forward_sweep`].
pub fn embed_image_sweep(
    image: &ImageTensor,
    weights: &BackboneWeights,
    config: &ModelConfig,
    circuits: &[CircuitSpec],
) -> Result<Vec<Result<Vec<f32>>>> {
    let tokens = embed_patches(image, weights, config)?;
    Ok(forward_sweep(&tokens, weights, config, circuits)
        .into_iter()
        .map(|out| out.and_then(|t| pool(&t, config)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_io::synthesize_weights;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 16,
            num_heads: 2,
            mlp_hidden_dim: 32,
            patch_size: 4,
            image_side: 8,
            num_register_tokens: 2,
            ..ModelConfig::default()
        }
    }

    fn test_image(side: usize, seed: u32) -> ImageTensor {
        let data = (0..3 * side * side)
            .map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 500.0 - 1.0)
            .collect();
        ImageTensor::new(side, data).unwrap()
    }

    #[test]
    fn circuit_enumeration_small_cases() {
        assert_eq!(enumerate_circuits(2).unwrap(), vec![CircuitSpec::duplicated(0, 1)]);
        let four: Vec<_> = enumerate_circuits(4)
            .unwrap()
            .iter()
            .map(|c| c.bounds().unwrap())
            .collect();
        assert_eq!(four, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(enumerate_circuits(12).unwrap().len(), 66);
        assert!(matches!(enumerate_circuits(1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn effective_paths() {
        assert_eq!(
            effective_layer_path(CircuitSpec::Standard, 12),
            (0..12).collect::<Vec<_>>()
        );
        assert_eq!(
            effective_layer_path(CircuitSpec::duplicated(2, 5), 12),
            vec![0, 1, 2, 3, 4, 5, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]
        );
        let whole: Vec<usize> = (0..12).chain(0..12).collect();
        assert_eq!(effective_layer_path(CircuitSpec::duplicated(0, 11), 12), whole);
    }

    #[test]
    fn circuit_parse_and_display() {
        for c in [CircuitSpec::Standard, CircuitSpec::duplicated(3, 7)] {
            assert_eq!(c.to_string().parse::<CircuitSpec>().unwrap(), c);
        }
        assert_eq!("2,5".parse::<CircuitSpec>().unwrap(), CircuitSpec::duplicated(2, 5));
        assert!("5-2".parse::<CircuitSpec>().is_err());
        assert!(CircuitSpec::duplicated(3, 12).validate(12).is_err());
    }

    #[test]
    fn config_invariants() {
        let mut c = tiny_config();
        assert!(c.validate().is_ok());
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.image_side = 10;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.num_layers = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn token_counts() {
        let c = ModelConfig::default();
        assert_eq!(c.num_tokens(), 1029);
        let c = ModelConfig {
            image_side: 64,
            num_register_tokens: 0,
            hidden_dim: 16,
            num_heads: 2,
            mlp_hidden_dim: 32,
            num_layers: 2,
            ..ModelConfig::default()
        };
        let w = synthesize_weights(&c, 0);
        let tokens = embed_patches(&test_image(64, 1), &w, &c).unwrap();
        assert_eq!((tokens.num_tokens, tokens.dim), (17, 16));
    }

    #[test]
    fn wrong_image_side_is_shape_error() {
        let c = tiny_config();
        let w = synthesize_weights(&c, 0);
        let err = embed_patches(&test_image(12, 0), &w, &c).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn pool_excludes_class_and_register_tokens() {
        let c = tiny_config();
        let d = c.hidden_dim;
        let v: Vec<f32> = (0..d).map(|k| k as f32 - 3.5).collect();
        let mut tokens = TokenSequence {
            num_tokens: c.num_tokens(),
            dim: d,
            data: v.iter().copied().cycle().take(c.num_tokens() * d).collect(),
        };
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        let expected: Vec<f32> = v.iter().map(|x| x / norm).collect();
        let pooled = pool(&tokens, &c).unwrap();
        for (a, b) in pooled.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
        tokens.row_mut(0).iter_mut().for_each(|x| *x = 100.0);
        tokens.row_mut(1).iter_mut().for_each(|x| *x = -7.0);
        assert_eq!(pool(&tokens, &c).unwrap(), pooled);
    }

    #[test]
    fn pool_zero_mean_is_degenerate() {
        let c = tiny_config();
        let tokens = TokenSequence {
            num_tokens: c.num_tokens(),
            dim: c.hidden_dim,
            data: vec![0.0; c.num_tokens() * c.hidden_dim],
        };
        assert!(matches!(pool(&tokens, &c), Err(Error::DegenerateEmbedding)));
    }

    #[test]
    fn embedding_is_deterministic_and_unit_norm() {
        let c = tiny_config();
        let w = synthesize_weights(&c, 3);
        let img = test_image(8, 9);
        let a = embed_image(&img, &w, &c, CircuitSpec::duplicated(1, 2)).unwrap();
        let b = embed_image(&img, &w, &c, CircuitSpec::duplicated(1, 2)).unwrap();
        assert_eq!(a, b);
        let norm = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layerscale_scales_residual_updates() {
        let mut c = tiny_config();
        c.use_layerscale = true;
        let mut w = synthesize_weights(&c, 5);
        let tokens = embed_patches(&test_image(8, 2), &w, &c).unwrap();
        for b in w.blocks.iter_mut() {
            b.ls1 = Some(vec![0.0; c.hidden_dim]);
            b.ls2 = Some(vec![0.0; c.hidden_dim]);
        }
        let out = w.blocks[0].apply(&tokens, &c);
        assert_eq!(out, tokens);
    }

    #[test]
    fn gelu_variants_agree_roughly() {
        for x in [-3.0f32, -1.0, -0.1, 0.0, 0.5, 2.0] {
            let a = Activation::GeluErf.apply(x);
            let b = Activation::GeluTanh.apply(x);
            assert!((a - b).abs() < 1e-3, "{x}: {a} vs {b}");
        }
        assert_eq!(Activation::GeluErf.apply(0.0), 0.0);
        assert!((Activation::GeluErf.apply(1.0) - 0.841_344_7).abs() < 1e-6);
    }

    #[test]
    fn non_finite_activation_reports_layer() {
        let c = tiny_config();
        let mut w = synthesize_weights(&c, 0);
        w.blocks[2].fc2.bias[0] = f32::INFINITY;
        let tokens = embed_patches(&test_image(8, 0), &w, &c).unwrap();
        let err = forward(&tokens, &w, &c, CircuitSpec::Standard).unwrap_err();
        assert!(matches!(err, Error::Numeric { layer: 2 }));
    }

    #[test]
    fn sweep_matches_per_circuit_forward_bitwise() {
        let c = tiny_config();
        let w = synthesize_weights(&c, 11);
        let tokens = embed_patches(&test_image(8, 4), &w, &c).unwrap();
        let mut circuits = vec![CircuitSpec::Standard];
        circuits.extend(enumerate_circuits(4).unwrap());
        let swept = forward_sweep(&tokens, &w, &c, &circuits);
        for (circuit, out) in circuits.iter().zip(swept) {
            assert_eq!(out.unwrap(), forward(&tokens, &w, &c, *circuit).unwrap());
        }
    }

    #[test]
    fn sweep_reports_prefix_failure_only_where_reached() {
        let c = tiny_config();
        let mut w = synthesize_weights(&c, 0);
        w.blocks[3].fc2.bias[0] = f32::NAN;
        let tokens = embed_patches(&test_image(8, 0), &w, &c).unwrap();
        let out = forward_sweep(
            &tokens,
            &w,
            &c,
            &[CircuitSpec::Standard, CircuitSpec::duplicated(0, 1)],
        );
        assert!(out.iter().all(|o| matches!(o, Err(Error::Numeric { layer: 3 }))));
    }
}
