//! A small deterministic causal decoder that exposes its raw logits.
//!
//! Each block is pre-norm:
//!
//! ```text
//! n  = rmsnorm(x)
//! x += Wo · concat_h( softmax(hook(q_h · k_h / sqrt(d_head) + prior)) · v_h ) + bo
//! x += W2 · relu(W1 · rmsnorm(x) + b1) + b2
//! ```
//!
//! `rmsnorm` has no gain, so an all-zero embedding stays zero through the
//! first norm and its key/value vectors are exactly the projection biases.
//! `prior` is an optional per-key-position additive logit offset, shared by
//! every layer and head, used to give the toy model a content-agnostic
//! positional preference.
//!
//! Weights come from `ChaCha8Rng::seed_from_u64(seed)`, drawn layer by layer
//! in the order `Wq bq Wk bk Wv bv Wo bo W1 b1 W2 b2`; matrices are uniform on
//! `±sqrt(3 / fan_in)`, biases uniform on `±0.1`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layout::{FrameLayout, Stage, TokenKind};
use crate::tensor::{LayerLogits, LogitTensor, MASKED_LOGIT};

const NORM_EPS: f64 = 1e-6;
const FFN_MULT: usize = 4;
const BIAS_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "layers, heads and dim must be positive: {self:?}"
            )));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::InvalidDim {
                dim: self.model_dim,
                heads: self.num_heads,
            });
        }
        Ok(())
    }
}

/// Where a hook is being invoked.
#[derive(Debug, Clone, Copy)]
pub struct HookContext<'a> {
    pub layer: usize,
    pub num_layers: usize,
    pub stage: Stage,
    pub layout: &'a FrameLayout,
}

/// Pre-softmax intervention point.
///
/// `apply` receives the layer's logits for the rows computed in this pass
/// (all rows in prefill, the new row in a decode step) and may rewrite them
/// in place. Attention weights are the softmax of whatever it leaves behind.
pub trait LogitHook: Send + Sync {
    /// Checks the hook against the model before a pass starts.
    fn bind(&self, _num_layers: usize, _layout: &FrameLayout) -> Result<()> {
        Ok(())
    }

    fn apply(&self, ctx: &HookContext<'_>, logits: &mut LayerLogits) -> Result<()>;
}

/// Applies hooks in order; later hooks see earlier hooks' edits.
pub struct HookChain<'a>(pub Vec<&'a dyn LogitHook>);

impl LogitHook for HookChain<'_> {
    fn bind(&self, num_layers: usize, layout: &FrameLayout) -> Result<()> {
        self.0.iter().try_for_each(|h| h.bind(num_layers, layout))
    }

    fn apply(&self, ctx: &HookContext<'_>, logits: &mut LayerLogits) -> Result<()> {
        self.0.iter().try_for_each(|h| h.apply(ctx, logits))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    out_dim: usize,
    in_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Linear {
    fn random(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Self {
        let limit = libm::sqrt(3.0 / in_dim as f64);
        let weight = (0..out_dim * in_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        let bias = (0..out_dim)
            .map(|_| rng.gen_range(-BIAS_RANGE..BIAS_RANGE))
            .collect();
        Self {
            out_dim,
            in_dim,
            weight,
            bias,
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + dot(w, x)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    blocks: Vec<Block>,
    key_prior: Vec<f64>,
    fingerprint: u64,
}

/// Keys and values of every position seen so far, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedState {
    fingerprint: u64,
    prefill_len: usize,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

impl CachedState {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of decode steps already appended.
    pub fn steps(&self) -> usize {
        self.len() - self.prefill_len
    }
}

/// Everything a forward pass records, for the rows it computed.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub stage: Stage,
    /// Raw logits before any hook.
    pub original: LogitTensor,
    /// Logits the softmax actually consumed.
    pub modified: LogitTensor,
    pub attention: LogitTensor,
    /// Residual stream after the last block, one vector per computed row.
    pub hidden: Vec<Vec<f64>>,
}

pub fn init_model(config: ModelConfig) -> Result<Model> {
    Model::new(config)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                query: Linear::random(&mut rng, d, d),
                key: Linear::random(&mut rng, d, d),
                value: Linear::random(&mut rng, d, d),
                output: Linear::random(&mut rng, d, d),
                up: Linear::random(&mut rng, FFN_MULT * d, d),
                down: Linear::random(&mut rng, d, FFN_MULT * d),
            })
            .collect();
        let mut model = Self {
            config,
            blocks,
            key_prior: Vec::new(),
            fingerprint: 0,
        };
        model.fingerprint = model.compute_fingerprint();
        Ok(model)
    }

    /// Adds `prior[j]` to every raw logit targeting key `j` (all layers and
    /// heads). Positions past the end of `prior` get no offset.
    pub fn with_key_prior(mut self, prior: Vec<f64>) -> Self {
        self.key_prior = prior;
        self.fingerprint = self.compute_fingerprint();
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn key_prior(&self) -> &[f64] {
        &self.key_prior
    }

    /// Identity tag; equal for bit-identical models.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Key bias of `layer` in head-major order; this is the key vector of
    /// an all-zero input at that layer.
    pub fn key_bias(&self, layer: usize) -> &[f64] {
        &self.blocks[layer].key.bias
    }

    /// Query projection of an already normalized input at `layer`.
    pub fn project_query(&self, layer: usize, normed: &[f64]) -> Vec<f64> {
        self.blocks[layer].query.forward(normed)
    }

    pub fn logit_scale(&self) -> f64 {
        1.0 / libm::sqrt(self.config.head_dim() as f64)
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.config.num_layers as u64);
        h.write_u64(self.config.num_heads as u64);
        h.write_u64(self.config.model_dim as u64);
        h.write_u64(self.config.seed);
        for &p in &self.key_prior {
            h.write_u64(p.to_bits());
        }
        h.finish()
    }

    fn check_embedding(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.config.model_dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding has dim {}, model expects {}",
                e.len(),
                self.config.model_dim
            )));
        }
        Ok(())
    }

    fn prior(&self, j: usize) -> f64 {
        self.key_prior.get(j).copied().unwrap_or(0.0)
    }

    /// Raw logits of one query row against keys `0..=row`; later keys up to
    /// `num_keys` are masked.
    fn raw_row(&self, q: &[f64], keys: &[Vec<f64>], head: usize, row: usize, num_keys: usize) -> Vec<f64> {
        let dh = self.config.head_dim();
        let scale = self.logit_scale();
        let hs = head * dh..(head + 1) * dh;
        let qh = &q[hs.clone()];
        (0..num_keys)
            .map(|j| {
                if j <= row {
                    dot(qh, &keys[j][hs.clone()]) * scale + self.prior(j)
                } else {
                    MASKED_LOGIT
                }
            })
            .collect()
    }

    fn mix_values(&self, weights: &[f64], values: &[Vec<f64>], head: usize, row: usize, out: &mut [f64]) {
        let dh = self.config.head_dim();
        let hs = head * dh..(head + 1) * dh;
        for (j, v) in values.iter().enumerate().take(row + 1) {
            let w = weights[j];
            for (o, &vv) in out[hs.clone()].iter_mut().zip(&v[hs.clone()]) {
                *o += w * vv;
            }
        }
    }

    fn finish_row(&self, block: &Block, x: &mut [f64], mixed: &[f64]) {
        let attn_out = block.output.forward(mixed);
        for (xi, a) in x.iter_mut().zip(&attn_out) {
            *xi += a;
        }
        let mut hidden = block.up.forward(&rmsnorm(x));
        for h in &mut hidden {
            *h = h.max(0.0);
        }
        let ffn = block.down.forward(&hidden);
        for (xi, f) in x.iter_mut().zip(&ffn) {
            *xi += f;
        }
    }

    pub fn prefill(
        &self,
        embeddings: &[Vec<f64>],
        layout: &FrameLayout,
        hook: Option<&dyn LogitHook>,
    ) -> Result<ForwardResult> {
        self.prefill_with_cache(embeddings, layout, hook).map(|(r, _)| r)
    }

    pub fn prefill_with_cache(
        &self,
        embeddings: &[Vec<f64>],
        layout: &FrameLayout,
        hook: Option<&dyn LogitHook>,
    ) -> Result<(ForwardResult, CachedState)> {
        let len = layout.total_len();
        if embeddings.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "{} embeddings for a layout of {len} tokens",
                embeddings.len()
            )));
        }
        embeddings.iter().try_for_each(|e| self.check_embedding(e))?;
        if let Some(h) = hook {
            h.bind(self.config.num_layers, layout)?;
        }

        let heads = self.config.num_heads;
        let stage = Stage::Prefill;
        let rows: Vec<usize> = (0..len).collect();
        let mut x: Vec<Vec<f64>> = embeddings.to_vec();
        let mut cache = CachedState {
            fingerprint: self.fingerprint,
            prefill_len: len,
            keys: Vec::with_capacity(self.blocks.len()),
            values: Vec::with_capacity(self.blocks.len()),
        };
        let mut original = Vec::with_capacity(self.blocks.len());
        let mut modified = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());

        for (l, block) in self.blocks.iter().enumerate() {
            let normed: Vec<Vec<f64>> = x.iter().map(|r| rmsnorm(r)).collect();
            let q: Vec<Vec<f64>> = normed.iter().map(|n| block.query.forward(n)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|n| block.key.forward(n)).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|n| block.value.forward(n)).collect();

            let mut raw = LayerLogits::zeros(heads, rows.clone(), len);
            for h in 0..heads {
                for r in 0..len {
                    let row = self.raw_row(&q[r], &k, h, r, len);
                    raw.row_mut(h, r).copy_from_slice(&row);
                }
            }
            let mut edited = raw.clone();
            if let Some(hook) = hook {
                let ctx = HookContext {
                    layer: l,
                    num_layers: self.config.num_layers,
                    stage,
                    layout,
                };
                hook.apply(&ctx, &mut edited)?;
            }
            let weights = edited.softmax();

            for (r, xr) in x.iter_mut().enumerate() {
                let mut mixed = vec![0.0; self.config.model_dim];
                for h in 0..heads {
                    self.mix_values(weights.row(h, r), &v, h, r, &mut mixed);
                }
                self.finish_row(block, xr, &mixed);
            }

            cache.keys.push(k);
            cache.values.push(v);
            original.push(raw);
            modified.push(edited);
            attention.push(weights);
        }

        let result = ForwardResult {
            stage,
            original: LogitTensor::new(original),
            modified: LogitTensor::new(modified),
            attention: LogitTensor::new(attention),
            hidden: x,
        };
        Ok((result, cache))
    }

    /// Appends one token and computes only its row against the cache.
    pub fn decode_step(
        &self,
        state: CachedState,
        new_embedding: &[f64],
        layout: &FrameLayout,
        hook: Option<&dyn LogitHook>,
    ) -> Result<(ForwardResult, CachedState)> {
        if state.fingerprint != self.fingerprint || state.keys.len() != self.blocks.len() {
            return Err(Error::StaleCache);
        }
        if state.prefill_len != layout.total_len() {
            return Err(Error::ShapeMismatch(format!(
                "cache was prefilled with {} tokens, layout has {}",
                state.prefill_len,
                layout.total_len()
            )));
        }
        self.check_embedding(new_embedding)?;
        if let Some(h) = hook {
            h.bind(self.config.num_layers, layout)?;
        }

        let mut state = state;
        let heads = self.config.num_heads;
        let row = state.len();
        let num_keys = row + 1;
        let stage = Stage::Decode(state.steps());
        let mut x = new_embedding.to_vec();
        let mut original = Vec::with_capacity(self.blocks.len());
        let mut modified = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());

        for (l, block) in self.blocks.iter().enumerate() {
            let normed = rmsnorm(&x);
            let q = block.query.forward(&normed);
            state.keys[l].push(block.key.forward(&normed));
            state.values[l].push(block.value.forward(&normed));
            let keys = &state.keys[l];
            let values = &state.values[l];

            let mut raw = LayerLogits::zeros(heads, vec![row], num_keys);
            for h in 0..heads {
                let r = self.raw_row(&q, keys, h, row, num_keys);
                raw.row_mut(h, 0).copy_from_slice(&r);
            }
            let mut edited = raw.clone();
            if let Some(hook) = hook {
                let ctx = HookContext {
                    layer: l,
                    num_layers: self.config.num_layers,
                    stage,
                    layout,
                };
                hook.apply(&ctx, &mut edited)?;
            }
            let weights = edited.softmax();

            let mut mixed = vec![0.0; self.config.model_dim];
            for h in 0..heads {
                self.mix_values(weights.row(h, 0), values, h, row, &mut mixed);
            }
            self.finish_row(block, &mut x, &mixed);

            original.push(raw);
            modified.push(edited);
            attention.push(weights);
        }

        let result = ForwardResult {
            stage,
            original: LogitTensor::new(original),
            modified: LogitTensor::new(modified),
            attention: LogitTensor::new(attention),
            hidden: vec![x],
        };
        Ok((result, state))
    }
}

/// The content-free "black frame" stand-in.
pub fn blank_embedding(dim: usize) -> Vec<f64> {
    vec![0.0; dim]
}

/// Deterministic embeddings, one ChaCha stream per token.
///
/// Visual token `m` of frame `i` uses stream `(1 << 48) | (i << 24) | m`;
/// text position `j` uses stream `(2 << 48) | j`. Components are uniform on
/// `±sqrt(3)` (unit variance).
pub fn seeded_embeddings(layout: &FrameLayout, seed: u64, dim: usize) -> Vec<Vec<f64>> {
    (0..layout.total_len())
        .map(|j| match layout.frame_of_token(j) {
            Ok(TokenKind::Frame(i)) => {
                let m = j - layout.frame_spans()[i].start;
                token_embedding(seed, (1 << 48) | ((i as u64) << 24) | m as u64, dim)
            }
            _ => token_embedding(seed, (2 << 48) | j as u64, dim),
        })
        .collect()
}

/// Embedding for the `t`-th generated token.
pub fn seeded_decode_embedding(seed: u64, step: usize, dim: usize) -> Vec<f64> {
    token_embedding(seed, (3 << 48) | step as u64, dim)
}

fn token_embedding(seed: u64, stream: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let limit = libm::sqrt(3.0);
    (0..dim).map(|_| rng.gen_range(-limit..limit)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rmsnorm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / libm::sqrt(ms + NORM_EPS);
    x.iter().map(|v| v * inv).collect()
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
