//! Minimal Llama-style decoder: RMS norm, rotary attention, gated-SiLU MLP.
//!
//! Weights live in a [`NamedTensorStore`] keyed `layer{i}.{q,k,v,o,gate,up,down}_proj`,
//! `layer{i}.attn_norm`, `layer{i}.mlp_norm`, `embed`, `final_norm`, `lm_head`,
//! plus a `meta.config` row holding the architecture.

mod capture;
pub mod container;
mod quantize;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{QlabError, Result};
use crate::numerics::{dot, Matrix};
pub use capture::CaptureBuffer;
pub use quantize::{capture_activations, quantize_model, QuantizeOutcome, QuantizedStore, StoredTensor};

pub const PROJECTIONS: [&str; 7] = ["q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"];
pub const META_TENSOR: &str = "meta.config";

const RMS_EPS: f64 = 1e-5;
const ROPE_THETA: f64 = 10_000.0;

pub fn projection_name(layer: usize, kind: &str) -> String {
    format!("layer{layer}.{kind}")
}

fn default_vocab() -> usize {
    crate::calibkit::tokenizer::BYTE_VOCAB
}
fn default_d_model() -> usize {
    64
}
fn default_layers() -> usize {
    4
}
fn default_heads() -> usize {
    4
}
fn default_d_ff() -> usize {
    128
}
fn default_context() -> usize {
    128
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_context")]
    pub context_length: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: default_vocab(),
            d_model: default_d_model(),
            n_layers: default_layers(),
            n_heads: default_heads(),
            d_ff: default_d_ff(),
            context_length: default_context(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("/vocab_size", self.vocab_size),
            ("/d_model", self.d_model),
            ("/n_layers", self.n_layers),
            ("/n_heads", self.n_heads),
            ("/d_ff", self.d_ff),
            ("/context_length", self.context_length),
        ];
        for (ptr, v) in dims {
            if v == 0 {
                return Err(QlabError::config(ptr, "must be >= 1"));
            }
            if v > 1 << 24 {
                return Err(QlabError::config(ptr, "too large"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(QlabError::config("/n_heads", "d_model must be divisible by n_heads"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(rows, cols)` of a named tensor, `None` for unknown names.
    pub fn expected_shape(&self, name: &str) -> Option<(usize, usize)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        match name {
            "embed" => return Some((v, d)),
            "lm_head" => return Some((v, d)),
            "final_norm" => return Some((1, d)),
            META_TENSOR => return Some((1, 6)),
            _ => {}
        }
        let (layer, kind) = name.strip_prefix("layer")?.split_once('.')?;
        let layer: usize = layer.parse().ok()?;
        if layer >= self.n_layers {
            return None;
        }
        Some(match kind {
            "attn_norm" | "mlp_norm" => (1, d),
            "q_proj" | "k_proj" | "v_proj" | "o_proj" => (d, d),
            "gate_proj" | "up_proj" => (f, d),
            "down_proj" => (d, f),
            _ => return None,
        })
    }

    pub fn projection_names(&self) -> Vec<String> {
        (0..self.n_layers)
            .flat_map(|l| PROJECTIONS.iter().map(move |k| projection_name(l, k)))
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string(), "final_norm".into(), "lm_head".into(), META_TENSOR.into()];
        for l in 0..self.n_layers {
            names.push(format!("layer{l}.attn_norm"));
            names.push(format!("layer{l}.mlp_norm"));
        }
        names.extend(self.projection_names());
        names.sort();
        names
    }

    fn to_meta(self) -> Matrix {
        let v = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.context_length,
        ];
        Matrix::from_fn(1, 6, |_, c| v[c] as f32)
    }

    fn from_meta(m: &Matrix) -> Result<Self> {
        if m.shape() != (1, 6) {
            return Err(QlabError::Container("meta.config must be 1x6".into()));
        }
        let v: Vec<usize> = m.data().iter().map(|&x| x as usize).collect();
        if m.data().iter().zip(&v).any(|(&x, &u)| x != u as f32) {
            return Err(QlabError::Container("meta.config holds non-integers".into()));
        }
        let cfg = ModelConfig {
            vocab_size: v[0],
            d_model: v[1],
            n_layers: v[2],
            n_heads: v[3],
            d_ff: v[4],
            context_length: v[5],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Options for random initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    /// Residual channels that receive a spike for non-ASCII byte tokens.
    #[serde(default = "default_outlier_channels")]
    pub outlier_channels: usize,
    #[serde(default = "default_outlier_gain")]
    pub outlier_gain: f32,
}

fn default_outlier_channels() -> usize {
    2
}
fn default_outlier_gain() -> f32 {
    6.0
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            outlier_channels: default_outlier_channels(),
            outlier_gain: default_outlier_gain(),
        }
    }
}

/// Name → matrix map with deterministic (sorted) iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedTensorStore {
    tensors: BTreeMap<String, Matrix>,
}

impl NamedTensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn config(&self) -> Result<ModelConfig> {
        let meta = self
            .get(META_TENSOR)
            .ok_or_else(|| QlabError::Container("missing meta.config tensor".into()))?;
        ModelConfig::from_meta(meta)
    }

    /// Every tensor present with the right shape, nothing extra.
    pub fn validate(&self) -> Result<ModelConfig> {
        let cfg = self.config()?;
        for name in cfg.tensor_names() {
            let m = self
                .get(&name)
                .ok_or_else(|| QlabError::ShapeMismatch(format!("missing tensor `{name}`")))?;
            let want = cfg.expected_shape(&name).expect("known name");
            if m.shape() != want {
                return Err(QlabError::ShapeMismatch(format!(
                    "`{name}` is {:?}, expected {want:?}",
                    m.shape()
                )));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|n| cfg.expected_shape(n).is_none()) {
            return Err(QlabError::ShapeMismatch(format!("unexpected tensor `{extra}`")));
        }
        Ok(cfg)
    }

    /// Random Llama-style initialization. Embedding rows of non-ASCII bytes
    /// (ids 128..256) get a spike of `outlier_gain` on a few fixed channels,
    /// which produces heavy-tailed activations for non-Latin text.
    pub fn init_random(cfg: &ModelConfig, init: &InitOptions, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = |rows: usize, cols: usize, std: f32, rng: &mut ChaCha8Rng| {
            Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f32, _>(StandardNormal))
        };
        let mut store = NamedTensorStore::new();
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let mut embed = normal(v, d, 1.0, &mut rng);
        let k = init.outlier_channels.min(d);
        let mut channels: Vec<usize> = rand::seq::index::sample(&mut rng, d, k).into_vec();
        channels.sort_unstable();
        for id in 128..v.min(256) {
            for &c in &channels {
                let cur = embed.get(id, c);
                embed.set(id, c, cur + init.outlier_gain);
            }
        }
        store.insert("embed", embed);
        for l in 0..cfg.n_layers {
            for kind in PROJECTIONS {
                let name = projection_name(l, kind);
                let (rows, cols) = cfg.expected_shape(&name).expect("projection");
                store.insert(name, normal(rows, cols, 1.0 / (cols as f32).sqrt(), &mut rng));
            }
            store.insert(format!("layer{l}.attn_norm"), Matrix::from_fn(1, d, |_, _| 1.0));
            store.insert(format!("layer{l}.mlp_norm"), Matrix::from_fn(1, d, |_, _| 1.0));
        }
        store.insert("final_norm", Matrix::from_fn(1, d, |_, _| 1.0));
        store.insert("lm_head", normal(v, d, 1.0 / (d as f32).sqrt(), &mut rng));
        store.insert(META_TENSOR, cfg.to_meta());
        Ok(store)
    }
}

/// A linear map `y = W·(x ⊘ s)`; `s` is absent for plain projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Matrix,
    pub input_scales: Option<Vec<f32>>,
}

impl Projection {
    pub fn plain(weight: Matrix) -> Self {
        Self {
            weight,
            input_scales: None,
        }
    }

    /// Applies the map to every row of `x` (tokens × in) → tokens × out.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let (out_dim, in_dim) = self.weight.shape();
        if x.cols() != in_dim {
            return Err(QlabError::DimMismatch {
                context: "projection input",
                expected: in_dim,
                got: x.cols(),
            });
        }
        let mut y = Matrix::zeros(x.rows(), out_dim);
        let mut scaled = vec![0f32; in_dim];
        for t in 0..x.rows() {
            let input: &[f32] = match &self.input_scales {
                Some(s) => {
                    for ((dst, &v), &sc) in scaled.iter_mut().zip(x.row(t)).zip(s) {
                        *dst = v / sc;
                    }
                    &scaled
                }
                None => x.row(t),
            };
            let row = y.row_mut(t);
            for (o, slot) in row.iter_mut().enumerate() {
                *slot = dot(self.weight.row(o), input) as f32;
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    attn_norm: Vec<f32>,
    mlp_norm: Vec<f32>,
    proj: [Projection; 7],
}

/// Runnable model assembled from a tensor store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embed: Matrix,
    blocks: Vec<Block>,
    final_norm: Vec<f32>,
    lm_head: Projection,
}

/// Anything that maps a token sequence to next-token logits.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    fn context_length(&self) -> usize;
    /// Logits of shape (tokens, vocab).
    fn logits(&self, ids: &[u32]) -> Result<Matrix>;
}

impl Model {
    pub fn from_store(store: &NamedTensorStore) -> Result<Self> {
        let cfg = store.validate()?;
        let take = |n: &str| store.get(n).cloned().expect("validated");
        let row = |n: &str| take(n).into_data();
        let blocks = (0..cfg.n_layers)
            .map(|l| Block {
                attn_norm: row(&format!("layer{l}.attn_norm")),
                mlp_norm: row(&format!("layer{l}.mlp_norm")),
                proj: PROJECTIONS.map(|k| Projection::plain(take(&projection_name(l, k)))),
            })
            .collect();
        Ok(Self {
            config: cfg,
            embed: take("embed"),
            blocks,
            final_norm: row("final_norm"),
            lm_head: Projection::plain(take("lm_head")),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Mutable access to a named layer projection.
    pub fn projection_mut(&mut self, name: &str) -> Result<&mut Projection> {
        let (layer, idx) = self.locate(name)?;
        Ok(&mut self.blocks[layer].proj[idx])
    }

    pub fn projection(&self, name: &str) -> Result<&Projection> {
        let (layer, idx) = self.locate(name)?;
        Ok(&self.blocks[layer].proj[idx])
    }

    fn locate(&self, name: &str) -> Result<(usize, usize)> {
        let unknown = || QlabError::UnknownProjection(name.to_string());
        let (layer, kind) = name
            .strip_prefix("layer")
            .and_then(|s| s.split_once('.'))
            .ok_or_else(unknown)?;
        let layer: usize = layer.parse().map_err(|_| unknown())?;
        let idx = PROJECTIONS.iter().position(|&k| k == kind).ok_or_else(unknown)?;
        if layer >= self.blocks.len() {
            return Err(unknown());
        }
        Ok((layer, idx))
    }

    /// Causal forward pass. When `capture` is given, the exact inputs of each
    /// requested projection are appended to it as columns.
    pub fn forward(&self, ids: &[u32], mut capture: Option<&mut CaptureBuffer>) -> Result<Matrix> {
        let cfg = &self.config;
        if ids.len() > cfg.context_length {
            return Err(QlabError::ContextOverflow {
                tokens: ids.len(),
                context: cfg.context_length,
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
            return Err(QlabError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        if let Some(buf) = capture.as_deref() {
            for name in buf.requested() {
                self.locate(name)?;
            }
        }
        let n = ids.len();
        let d = cfg.d_model;
        let mut x = Matrix::from_fn(n, d, |t, c| self.embed.get(ids[t] as usize, c));

        for (l, block) in self.blocks.iter().enumerate() {
            let mut run = |idx: usize, input: &Matrix| -> Result<Matrix> {
                if let Some(buf) = capture.as_deref_mut() {
                    buf.record(&projection_name(l, PROJECTIONS[idx]), input);
                }
                block.proj[idx].apply(input)
            };
            let h = rms_norm(&x, &block.attn_norm);
            let mut q = run(0, &h)?;
            let mut k = run(1, &h)?;
            let v = run(2, &h)?;
            apply_rope(&mut q, cfg.n_heads);
            apply_rope(&mut k, cfg.n_heads);
            let attn = causal_attention(&q, &k, &v, cfg.n_heads);
            let o = run(3, &attn)?;
            add_in_place(&mut x, &o);

            let h = rms_norm(&x, &block.mlp_norm);
            let gate = run(4, &h)?;
            let up = run(5, &h)?;
            let act = Matrix::from_fn(n, cfg.d_ff, |t, c| silu(gate.get(t, c)) * up.get(t, c));
            let down = run(6, &act)?;
            add_in_place(&mut x, &down);
        }
        let h = rms_norm(&x, &self.final_norm);
        self.lm_head.apply(&h)
    }
}

impl NextTokenModel for Model {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_length(&self) -> usize {
        self.config.context_length
    }

    fn logits(&self, ids: &[u32]) -> Result<Matrix> {
        self.forward(ids, None)
    }
}

fn add_in_place(x: &mut Matrix, y: &Matrix) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

fn silu(v: f32) -> f32 {
    let v = v as f64;
    (v / (1.0 + (-v).exp())) as f32
}

fn rms_norm(x: &Matrix, gain: &[f32]) -> Matrix {
    let mut out = x.clone();
    for t in 0..x.rows() {
        let row = x.row(t);
        let ms = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for ((o, &v), &g) in out.row_mut(t).iter_mut().zip(row).zip(gain) {
            *o = (v as f64 * inv * g as f64) as f32;
        }
    }
    out
}

/// Rotates adjacent pairs within each head; an odd trailing dim is left as is.
fn apply_rope(x: &mut Matrix, n_heads: usize) {
    let hd = x.cols() / n_heads;
    for t in 0..x.rows() {
        let row = x.row_mut(t);
        for h in 0..n_heads {
            let base = h * hd;
            for i in 0..hd / 2 {
                let freq = ROPE_THETA.powf(-((2 * i) as f64) / hd as f64);
                let (sin, cos) = (t as f64 * freq).sin_cos();
                let (a, b) = (row[base + 2 * i] as f64, row[base + 2 * i + 1] as f64);
                row[base + 2 * i] = (a * cos - b * sin) as f32;
                row[base + 2 * i + 1] = (a * sin + b * cos) as f32;
            }
        }
    }
}

fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize) -> Matrix {
    let (n, d) = q.shape();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut weights = vec![0f64; n];
    for h in 0..n_heads {
        let span = h * hd..(h + 1) * hd;
        for t in 0..n {
            let qt = &q.row(t)[span.clone()];
            let mut max = f64::NEG_INFINITY;
            for s in 0..=t {
                let w = dot(qt, &k.row(s)[span.clone()]) * scale;
                weights[s] = w;
                max = max.max(w);
            }
            let mut z = 0.0;
            for w in &mut weights[..=t] {
                *w = (*w - max).exp();
                z += *w;
            }
            let orow = &mut out.row_mut(t)[span.clone()];
            for c in 0..hd {
                let acc: f64 = (0..=t).map(|s| weights[s] * v.get(s, h * hd + c) as f64).sum();
                orow[c] = (acc / z) as f32;
            }
        }
    }
    out
}

fn log_softmax_at(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    logits[target] as f64 - lse
}

/// Perplexity over non-overlapping windows of `context_length` tokens:
/// `exp` of the token-weighted mean next-token NLL (natural log).
pub fn perplexity<M: NextTokenModel + ?Sized>(model: &M, stream: &[u32], context_length: usize) -> Result<f64> {
    let (nll, count) = nll_sum(model, stream, context_length)?;
    Ok((nll / count as f64).exp())
}

/// Summed NLL and number of predicted tokens.
pub fn nll_sum<M: NextTokenModel + ?Sized>(model: &M, stream: &[u32], context_length: usize) -> Result<(f64, usize)> {
    if context_length < 2 {
        return Err(QlabError::config("/context", "context length must be >= 2"));
    }
    if context_length > model.context_length() {
        return Err(QlabError::ContextOverflow {
            tokens: context_length,
            context: model.context_length(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for window in stream.chunks(context_length) {
        if window.len() < 2 {
            continue;
        }
        let logits = model.logits(window)?;
        for p in 0..window.len() - 1 {
            let target = window[p + 1] as usize;
            total -= log_softmax_at(logits.row(p), target);
            count += 1;
        }
    }
    if count == 0 {
        return Err(QlabError::EmptyStream);
    }
    Ok((total, count))
}
