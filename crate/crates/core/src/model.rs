//! A fixed-context feed-forward next-token model.
//!
//! Given the previous `context` tokens (front-padded with [`PAD`]), their
//! embeddings are concatenated, passed through one `tanh` hidden layer and a
//! linear output layer, and normalised with a log-softmax. Parameters live in
//! three named modules, in this order:
//!
//! | module   | contents                                               |
//! |----------|--------------------------------------------------------|
//! | `embed`  | `V x d` embedding table, row per token                 |
//! | `hidden` | `(c*d) x h` weight, row-major, followed by `h` biases  |
//! | `out`    | `h x V` weight, row-major, followed by `V` biases      |
//!
//! Gradients are computed by hand-written backpropagation; [`finite_diff_grad`]
//! is the independent central-difference oracle used to check them.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{GradVector, ModuleGradients, Schema};

/// Reserved padding token; fills context slots before the start of a sequence.
pub const PAD: u32 = 0;
pub const DEFAULT_PARAM_CAP: usize = 100_000;

pub const MODULE_EMBED: &str = "embed";
pub const MODULE_HIDDEN: &str = "hidden";
pub const MODULE_OUT: &str = "out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            vocab_size: 32,
            embed_dim: 16,
            hidden_dim: 32,
            context: 2,
        }
    }
}

impl ModelDims {
    pub fn embed_len(&self) -> usize {
        self.vocab_size * self.embed_dim
    }

    pub fn input_width(&self) -> usize {
        self.context * self.embed_dim
    }

    pub fn hidden_len(&self) -> usize {
        self.input_width() * self.hidden_dim + self.hidden_dim
    }

    pub fn out_len(&self) -> usize {
        self.hidden_dim * self.vocab_size + self.vocab_size
    }

    pub fn num_params(&self) -> usize {
        self.embed_len() + self.hidden_len() + self.out_len()
    }

    pub fn schema(&self) -> Schema {
        Schema(vec![
            (MODULE_EMBED.to_string(), self.embed_len()),
            (MODULE_HIDDEN.to_string(), self.hidden_len()),
            (MODULE_OUT.to_string(), self.out_len()),
        ])
    }

    pub fn validate(&self, param_cap: usize) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::input("vocab_size must be at least 2"));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.context == 0 {
            return Err(Error::input(
                "embed_dim, hidden_dim and context must be at least 1",
            ));
        }
        let n = (|| {
            let embed = self.vocab_size.checked_mul(self.embed_dim)?;
            let hidden = self
                .context
                .checked_mul(self.embed_dim)?
                .checked_mul(self.hidden_dim)?
                .checked_add(self.hidden_dim)?;
            let out = self
                .hidden_dim
                .checked_mul(self.vocab_size)?
                .checked_add(self.vocab_size)?;
            embed.checked_add(hidden)?.checked_add(out)
        })();
        match n {
            Some(n) if n <= param_cap => Ok(()),
            _ => Err(Error::input(format!(
                "model would exceed the parameter cap of {param_cap}"
            ))),
        }
    }
}

/// A token sequence. Every id must be below the vocabulary size of the model it is fed to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        TokenSequence(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of predicted positions (every token but the first).
    pub fn prediction_positions(&self) -> usize {
        self.0.len().saturating_sub(1)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        TokenSequence(v)
    }
}

/// Anything that scores the next token given a fixed-length context.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    fn context_len(&self) -> usize;
    /// Log-probabilities over the vocabulary; `context.len() == self.context_len()`.
    fn next_log_probs(&self, context: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    dims: ModelDims,
    embed: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

/// Output of [`TinyLM::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// One row of `V` log-probabilities per predicted position.
    pub log_probs: Vec<Vec<f64>>,
    /// `sum_t log p(x_t | context_t)`.
    pub total: f64,
}

/// Flat per-module gradient buffers matching the parameter layout.
#[derive(Debug, Clone)]
pub(crate) struct GradBuffers {
    pub embed: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl GradBuffers {
    fn zeros(dims: &ModelDims) -> Self {
        GradBuffers {
            embed: vec![0.0; dims.embed_len()],
            hidden: vec![0.0; dims.hidden_len()],
            out: vec![0.0; dims.out_len()],
        }
    }

    fn into_module_gradients(self) -> Result<ModuleGradients> {
        let mut m = ModuleGradients::new();
        m.insert(MODULE_EMBED, GradVector::from_computed(self.embed, "embed gradient")?)?;
        m.insert(MODULE_HIDDEN, GradVector::from_computed(self.hidden, "hidden gradient")?)?;
        m.insert(MODULE_OUT, GradVector::from_computed(self.out, "out gradient")?)?;
        Ok(m)
    }
}

/// Activations of one prediction position, kept for backprop.
struct PositionCache {
    context: Vec<u32>,
    input: Vec<f64>,
    act: Vec<f64>,
    log_probs: Vec<f64>,
}

fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    for z in logits.iter_mut() {
        *z -= lse;
    }
}

impl TinyLM {
    /// Seeded initialisation: weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// (fan-in 1 for the embedding table), biases zero.
    pub fn init(seed: u64, dims: ModelDims) -> Result<Self> {
        Self::init_with_cap(seed, dims, DEFAULT_PARAM_CAP)
    }

    pub fn init_with_cap(seed: u64, dims: ModelDims, param_cap: usize) -> Result<Self> {
        dims.validate(param_cap)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-s..s)).collect()
        };
        let embed = uniform(dims.embed_len(), 1);
        let mut hidden = uniform(dims.input_width() * dims.hidden_dim, dims.input_width());
        hidden.resize(dims.hidden_len(), 0.0);
        let mut out = uniform(dims.hidden_dim * dims.vocab_size, dims.hidden_dim);
        out.resize(dims.out_len(), 0.0);
        Ok(TinyLM {
            dims,
            embed,
            hidden,
            out,
        })
    }

    /// Builds a model from explicit parameters laid out as [`ModelDims::schema`].
    pub fn from_parameters(dims: ModelDims, params: &ModuleGradients) -> Result<Self> {
        dims.validate(usize::MAX)?;
        let schema = dims.schema();
        if params.schema() != schema {
            return Err(Error::alignment(format!(
                "parameters {:?} do not match model schema {:?}",
                params.schema().0,
                schema.0
            )));
        }
        let take = |name: &str| params.get(name).map(|v| v.as_slice().to_vec()).unwrap();
        Ok(TinyLM {
            dims,
            embed: take(MODULE_EMBED),
            hidden: take(MODULE_HIDDEN),
            out: take(MODULE_OUT),
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn schema(&self) -> Schema {
        self.dims.schema()
    }

    pub fn num_params(&self) -> usize {
        self.dims.num_params()
    }

    pub fn parameters(&self) -> ModuleGradients {
        let mut m = ModuleGradients::new();
        for (name, v) in self.modules() {
            m.insert(name, GradVector::new(v.to_vec()).expect("parameters are finite"))
                .expect("module names are unique");
        }
        m
    }

    pub(crate) fn modules(&self) -> [(&'static str, &[f64]); 3] {
        [
            (MODULE_EMBED, &self.embed),
            (MODULE_HIDDEN, &self.hidden),
            (MODULE_OUT, &self.out),
        ]
    }

    pub(crate) fn modules_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 3] {
        [
            (MODULE_EMBED, &mut self.embed),
            (MODULE_HIDDEN, &mut self.hidden),
            (MODULE_OUT, &mut self.out),
        ]
    }

    /// Deep copy, used as the frozen reference model.
    pub fn snapshot(&self) -> TinyLM {
        self.clone()
    }

    /// Sets the output layer (weights and biases) to zero, making every prediction uniform.
    pub fn zero_output_layer(&mut self) {
        self.out.iter_mut().for_each(|w| *w = 0.0);
    }

    /// Every parameter of every module, in order. Mutable access for tests and oracles.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.modules().iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }

    pub fn set_flat_parameter(&mut self, index: usize, value: f64) {
        let mut i = index;
        for (_, v) in self.modules_mut() {
            if i < v.len() {
                v[i] = value;
                return;
            }
            i -= v.len();
        }
        panic!("parameter index {index} out of range");
    }

    fn check_sequence(&self, x: &TokenSequence) -> Result<()> {
        if x.len() < 2 {
            return Err(Error::input(format!(
                "sequence needs at least 2 tokens, got {}",
                x.len()
            )));
        }
        self.check_tokens(x.tokens())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.dims.vocab_size) {
            return Err(Error::input(format!(
                "token id {t} out of vocabulary (size {})",
                self.dims.vocab_size
            )));
        }
        Ok(())
    }

    /// Context window for predicting position `t` (tokens `t-c .. t-1`, front-padded).
    fn context_at(&self, tokens: &[u32], t: usize) -> Vec<u32> {
        let c = self.dims.context;
        (0..c)
            .map(|k| {
                let back = c - k;
                if t >= back {
                    tokens[t - back]
                } else {
                    PAD
                }
            })
            .collect()
    }

    fn forward_context(&self, context: &[u32]) -> PositionCache {
        let ModelDims {
            vocab_size: v,
            embed_dim: d,
            hidden_dim: h,
            ..
        } = self.dims;
        let width = self.dims.input_width();
        let mut input = Vec::with_capacity(width);
        for &tok in context {
            let row = tok as usize * d;
            input.extend_from_slice(&self.embed[row..row + d]);
        }
        let (w1, b1) = self.hidden.split_at(width * h);
        let mut act = b1.to_vec();
        for (i, &e) in input.iter().enumerate() {
            if e != 0.0 {
                let row = &w1[i * h..(i + 1) * h];
                for (a, w) in act.iter_mut().zip(row) {
                    *a += e * w;
                }
            }
        }
        act.iter_mut().for_each(|a| *a = a.tanh());
        let (w2, b2) = self.out.split_at(h * v);
        let mut logits = b2.to_vec();
        for (j, &a) in act.iter().enumerate() {
            let row = &w2[j * v..(j + 1) * v];
            for (z, w) in logits.iter_mut().zip(row) {
                *z += a * w;
            }
        }
        log_softmax(&mut logits);
        PositionCache {
            context: context.to_vec(),
            input,
            act,
            log_probs: logits,
        }
    }

    pub fn forward(&self, x: &TokenSequence) -> Result<ForwardPass> {
        self.check_sequence(x)?;
        let tokens = x.tokens();
        let mut log_probs = Vec::with_capacity(x.len() - 1);
        let mut total = 0.0;
        for t in 1..tokens.len() {
            let cache = self.forward_context(&self.context_at(tokens, t));
            total += cache.log_probs[tokens[t] as usize];
            log_probs.push(cache.log_probs);
        }
        Ok(ForwardPass { log_probs, total })
    }

    /// `log p(x; theta) = sum_t log p(x_t | x_{<t})` over positions `1..len`.
    pub fn log_prob(&self, x: &TokenSequence) -> Result<f64> {
        Ok(self.forward(x)?.total)
    }

    /// Backprop of `weight * log p(x)` into `grads`; returns `log p(x)`.
    fn accumulate_log_prob_grad(
        &self,
        x: &TokenSequence,
        weight: f64,
        grads: &mut GradBuffers,
    ) -> f64 {
        let ModelDims {
            vocab_size: v,
            embed_dim: d,
            hidden_dim: h,
            ..
        } = self.dims;
        let width = self.dims.input_width();
        let tokens = x.tokens();
        let (w1, _) = self.hidden.split_at(width * h);
        let (w2, _) = self.out.split_at(h * v);
        let mut total = 0.0;
        let mut dlogits = vec![0.0; v];
        let mut dz = vec![0.0; h];
        for t in 1..tokens.len() {
            let cache = self.forward_context(&self.context_at(tokens, t));
            let target = tokens[t] as usize;
            total += cache.log_probs[target];

            // d(w * log p_target)/d logits = w * (onehot - softmax)
            for (k, (g, lp)) in dlogits.iter_mut().zip(&cache.log_probs).enumerate() {
                let onehot = if k == target { 1.0 } else { 0.0 };
                *g = weight * (onehot - lp.exp());
            }

            let (gw2, gb2) = grads.out.split_at_mut(h * v);
            for (b, g) in gb2.iter_mut().zip(&dlogits) {
                *b += g;
            }
            for (j, &a) in cache.act.iter().enumerate() {
                let grow = &mut gw2[j * v..(j + 1) * v];
                let wrow = &w2[j * v..(j + 1) * v];
                let mut da = 0.0;
                for ((gw, w), g) in grow.iter_mut().zip(wrow).zip(&dlogits) {
                    *gw += a * g;
                    da += w * g;
                }
                dz[j] = da * (1.0 - a * a);
            }

            let (gw1, gb1) = grads.hidden.split_at_mut(width * h);
            for (b, g) in gb1.iter_mut().zip(&dz) {
                *b += g;
            }
            for (i, &e) in cache.input.iter().enumerate() {
                let grow = &mut gw1[i * h..(i + 1) * h];
                let wrow = &w1[i * h..(i + 1) * h];
                let mut de = 0.0;
                for ((gw, w), g) in grow.iter_mut().zip(wrow).zip(&dz) {
                    *gw += e * g;
                    de += w * g;
                }
                let slot = i / d;
                let tok = cache.context[slot] as usize;
                grads.embed[tok * d + i % d] += de;
            }
        }
        total
    }

    /// Gradient of `sum_b weights[b] * log p(batch[b])`. Returns the gradient and each
    /// sequence's `log p`.
    pub fn weighted_log_prob_grad(
        &self,
        batch: &[TokenSequence],
        weights: &[f64],
    ) -> Result<(ModuleGradients, Vec<f64>)> {
        if batch.len() != weights.len() {
            return Err(Error::input("one weight per sequence required"));
        }
        for x in batch {
            self.check_sequence(x)?;
        }
        let mut grads = GradBuffers::zeros(&self.dims);
        let log_probs = batch
            .iter()
            .zip(weights)
            .map(|(x, &w)| self.accumulate_log_prob_grad(x, w, &mut grads))
            .collect();
        Ok((grads.into_module_gradients()?, log_probs))
    }

    /// `theta <- theta - eta * g_final`.
    pub fn apply_update(&mut self, g_final: &ModuleGradients, eta: f64) -> Result<()> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::input(format!("learning rate must be positive, got {eta}")));
        }
        let schema = self.schema();
        if g_final.schema() != schema {
            return Err(Error::alignment(format!(
                "update {:?} does not match model schema {:?}",
                g_final.schema().0,
                schema.0
            )));
        }
        for ((_, params), (_, g)) in self.modules_mut().into_iter().zip(g_final.iter()) {
            for (p, gi) in params.iter_mut().zip(g.as_slice()) {
                *p -= eta * gi;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            dims: self.dims,
            modules: self
                .modules()
                .iter()
                .map(|(name, v)| CheckpointModule {
                    name: name.to_string(),
                    values: v.iter().map(|x| format!("{:016x}", x.to_bits())).collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::input(format!(
                "unsupported checkpoint format {:?}",
                ckpt.format
            )));
        }
        let mut params = ModuleGradients::new();
        for m in &ckpt.modules {
            let values = m
                .values
                .iter()
                .map(|s| {
                    u64::from_str_radix(s, 16)
                        .map(f64::from_bits)
                        .map_err(|e| Error::input(format!("bad parameter {s:?} in {}: {e}", m.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            params.insert(m.name.clone(), GradVector::new(values)?)?;
        }
        TinyLM::from_parameters(ckpt.dims, &params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        TinyLM::from_checkpoint(&ckpt)
    }
}

impl NextTokenModel for TinyLM {
    fn vocab_size(&self) -> usize {
        self.dims.vocab_size
    }

    fn context_len(&self) -> usize {
        self.dims.context
    }

    fn next_log_probs(&self, context: &[u32]) -> Result<Vec<f64>> {
        if context.len() != self.dims.context {
            return Err(Error::input(format!(
                "context has {} tokens, model expects {}",
                context.len(),
                self.dims.context
            )));
        }
        self.check_tokens(context)?;
        Ok(self.forward_context(context).log_probs)
    }
}

pub const CHECKPOINT_FORMAT: &str = "tinylm-checkpoint-v1";

/// On-disk checkpoint. Parameters are stored as the hex of their IEEE-754 bits so
/// that save/load is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub dims: ModelDims,
    pub modules: Vec<CheckpointModule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointModule {
    pub name: String,
    pub values: Vec<String>,
}

/// Central differences `(L(theta + h e_i) - L(theta - h e_i)) / 2h` for every parameter.
pub fn finite_diff_grad<F>(model: &TinyLM, h: f64, loss: F) -> Result<ModuleGradients>
where
    F: Fn(&TinyLM) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::input(format!("step h must be positive, got {h}")));
    }
    let base = model.flat_parameters();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(base.len());
    for (i, &theta) in base.iter().enumerate() {
        probe.set_flat_parameter(i, theta + h);
        let up = loss(&probe)?;
        probe.set_flat_parameter(i, theta - h);
        let down = loss(&probe)?;
        probe.set_flat_parameter(i, theta);
        out.push((up - down) / (2.0 * h));
    }
    crate::gradcore::unflatten(&GradVector::from_computed(out, "finite difference")?, &model.schema())
}
