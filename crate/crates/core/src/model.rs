//! Fixed-context autoregressive token model with analytic gradients.
//!
//! The model maps the last `k` tokens to a next-token distribution:
//! `softmax(W2 · tanh(W1 · concat(embeddings) + b1) + b2)`. Parameters live
//! in one flat [`ParamVector`] laid out as embedding table, hidden weights,
//! hidden bias, output weights, output bias.

use std::io::{Read, Write};
use std::ops::{Index, IndexMut};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LwfError, Result};

pub type Token = u32;

const CHECKPOINT_MAGIC: &[u8; 4] = b"LWF1";
const CHECKPOINT_VERSION: u32 = 1;
const INIT_RANGE: f64 = 0.08;

/// Flat, ordered parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scaled(&self, scale: f64) -> ParamVector {
        Self(self.0.iter().map(|v| v * scale).collect())
    }

    pub(crate) fn check_dim(&self, what: &'static str, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(LwfError::DimensionMismatch {
                what,
                got: self.dim(),
                expected,
            });
        }
        Ok(())
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// A prompt/answer pair. Only answer positions are scored by the loss.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub prompt: Vec<Token>,
    pub answer: Vec<Token>,
    pub domain_id: String,
}

impl Example {
    pub fn new(prompt: Vec<Token>, answer: Vec<Token>, domain_id: impl Into<String>) -> Self {
        Self {
            prompt,
            answer,
            domain_id: domain_id.into(),
        }
    }

    /// Checks that every token fits the vocabulary. Positions count through
    /// the prompt and then the answer.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (position, &token) in self.prompt.iter().chain(&self.answer).enumerate() {
            if token as usize >= vocab_size {
                return Err(LwfError::TokenOutOfRange {
                    position,
                    token,
                    vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// A model whose loss over samples is differentiable in a flat parameter
/// vector. Implemented by [`TinyLm`] and by the linear-Gaussian oracle model.
pub trait Differentiable: Clone + Send + Sync {
    type Sample: Clone + Send + Sync;

    fn params(&self) -> &ParamVector;

    fn params_mut(&mut self) -> &mut ParamVector;

    fn loss(&self, sample: &Self::Sample) -> Result<f64>;

    /// Adds `scale * dL/dθ` into `grad` and returns the unscaled loss.
    fn accumulate_grad(&self, sample: &Self::Sample, scale: f64, grad: &mut [f64]) -> Result<f64>;

    fn grad(&self, sample: &Self::Sample) -> Result<ParamVector> {
        let mut g = vec![0.0; self.params().dim()];
        self.accumulate_grad(sample, 1.0, &mut g)?;
        Ok(ParamVector::new(g))
    }

    fn with_params(&self, params: ParamVector) -> Result<Self> {
        params.check_dim("params", self.params().dim())?;
        let mut model = self.clone();
        *model.params_mut() = params;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyLmConfig {
    pub vocab_size: usize,
    /// Number of tokens the model conditions on.
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub pad_token: Token,
}

impl TinyLmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(LwfError::InvalidConfig(msg.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.context == 0 {
            return bad("context must be positive");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be positive");
        }
        if self.pad_token as usize >= self.vocab_size {
            return bad("pad_token must be below vocab_size");
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let l = self.layout();
        l.b2 + self.vocab_size
    }

    fn input_dim(&self) -> usize {
        self.context * self.embed_dim
    }

    fn layout(&self) -> Layout {
        let emb = 0;
        let w1 = emb + self.vocab_size * self.embed_dim;
        let b1 = w1 + self.input_dim() * self.hidden_dim;
        let w2 = b1 + self.hidden_dim;
        let b2 = w2 + self.hidden_dim * self.vocab_size;
        Layout { emb, w1, b1, w2, b2 }
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    config: TinyLmConfig,
    params: ParamVector,
}

/// Per-context activations kept for the backward pass.
struct Activations {
    input: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl TinyLm {
    pub fn zeros(config: TinyLmConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: ParamVector::zeros(config.param_count()),
            config,
        })
    }

    /// Uniform(-0.08, 0.08) initialization from a seeded ChaCha stream.
    pub fn init(config: TinyLmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..config.param_count())
            .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
            .collect();
        Ok(Self {
            config,
            params: ParamVector::new(values),
        })
    }

    pub fn from_params(config: TinyLmConfig, params: ParamVector) -> Result<Self> {
        config.validate()?;
        params.check_dim("params", config.param_count())?;
        if !params.is_finite() {
            return Err(LwfError::InvalidConfig("parameters must be finite".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TinyLmConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn into_params(self) -> ParamVector {
        self.params
    }

    /// Embedding row of `token`, used by the bag-of-embedding encoder.
    pub fn embedding(&self, token: Token) -> &[f64] {
        let e = self.config.embed_dim;
        let start = self.config.layout().emb + token as usize * e;
        &self.params.as_slice()[start..start + e]
    }

    /// Next-token distribution for a context of exactly `k` tokens.
    pub fn forward(&self, context: &[Token]) -> Result<Vec<f64>> {
        if context.len() != self.config.context {
            return Err(LwfError::ContextLength {
                got: context.len(),
                expected: self.config.context,
            });
        }
        self.check_tokens(context)?;
        Ok(self.activations(context).probs)
    }

    /// The last `k` tokens of `tokens`, left-padded with the pad token.
    pub fn window(&self, tokens: &[Token]) -> Vec<Token> {
        let k = self.config.context;
        let mut ctx = Vec::with_capacity(k);
        let take = tokens.len().min(k);
        ctx.resize(k - take, self.config.pad_token);
        ctx.extend_from_slice(&tokens[tokens.len() - take..]);
        ctx
    }

    /// Mean cross-entropy over the answer tokens.
    pub fn loss(&self, x: &Example) -> Result<f64> {
        self.check_example(x)?;
        let mut seq = x.prompt.clone();
        let mut total = 0.0;
        for &target in &x.answer {
            let act = self.activations(&self.window(&seq));
            total -= act.log_probs[target as usize];
            seq.push(target);
        }
        Ok(total / x.answer.len() as f64)
    }

    /// Adds `scale * dL/dθ` into `grad`; returns the loss.
    pub fn accumulate_grad(&self, x: &Example, scale: f64, grad: &mut [f64]) -> Result<f64> {
        self.check_example(x)?;
        if grad.len() != self.params.dim() {
            return Err(LwfError::DimensionMismatch {
                what: "gradient buffer",
                got: grad.len(),
                expected: self.params.dim(),
            });
        }
        let cfg = &self.config;
        let lay = cfg.layout();
        let (e, h_dim, v_dim, in_dim) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size, cfg.input_dim());
        let p = self.params.as_slice();
        let weight = scale / x.answer.len() as f64;

        let mut seq = x.prompt.clone();
        let mut total = 0.0;
        let mut d_hidden = vec![0.0; h_dim];
        let mut d_input = vec![0.0; in_dim];
        for &target in &x.answer {
            let ctx = self.window(&seq);
            let act = self.activations(&ctx);
            total -= act.log_probs[target as usize];

            // output layer
            d_hidden.iter_mut().for_each(|v| *v = 0.0);
            for v in 0..v_dim {
                let indicator = if v == target as usize { 1.0 } else { 0.0 };
                let d_out = weight * (act.probs[v] - indicator);
                grad[lay.b2 + v] += d_out;
                let row = lay.w2 + v * h_dim;
                for h in 0..h_dim {
                    grad[row + h] += d_out * act.hidden[h];
                    d_hidden[h] += p[row + h] * d_out;
                }
            }

            // hidden layer
            d_input.iter_mut().for_each(|v| *v = 0.0);
            for h in 0..h_dim {
                let d_pre = d_hidden[h] * (1.0 - act.hidden[h] * act.hidden[h]);
                grad[lay.b1 + h] += d_pre;
                let row = lay.w1 + h * in_dim;
                for j in 0..in_dim {
                    grad[row + j] += d_pre * act.input[j];
                    d_input[j] += p[row + j] * d_pre;
                }
            }

            // embeddings
            for (slot, &tok) in ctx.iter().enumerate() {
                let row = lay.emb + tok as usize * e;
                for c in 0..e {
                    grad[row + c] += d_input[slot * e + c];
                }
            }
            seq.push(target);
        }
        Ok(total / x.answer.len() as f64)
    }

    pub fn grad(&self, x: &Example) -> Result<ParamVector> {
        let mut g = vec![0.0; self.params.dim()];
        self.accumulate_grad(x, 1.0, &mut g)?;
        Ok(ParamVector::new(g))
    }

    /// Appends argmax tokens until `stop_token` is produced or `max_tokens`
    /// have been generated. The stop token is kept in the output. Ties go to
    /// the lowest token id.
    pub fn greedy_decode(&self, prompt: &[Token], max_tokens: usize, stop_token: Token) -> Result<Vec<Token>> {
        self.check_tokens(prompt)?;
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_tokens {
            let act = self.activations(&self.window(&seq));
            let next = argmax(&act.log_probs) as Token;
            out.push(next);
            seq.push(next);
            if next == stop_token {
                break;
            }
        }
        Ok(out)
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        let vocab_size = self.config.vocab_size;
        match tokens.iter().position(|&t| t as usize >= vocab_size) {
            Some(position) => Err(LwfError::TokenOutOfRange {
                position,
                token: tokens[position],
                vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn check_example(&self, x: &Example) -> Result<()> {
        x.validate(self.config.vocab_size)?;
        if x.answer.is_empty() {
            return Err(LwfError::EmptyAnswer);
        }
        Ok(())
    }

    fn activations(&self, ctx: &[Token]) -> Activations {
        let cfg = &self.config;
        let lay = cfg.layout();
        let (e, h_dim, v_dim, in_dim) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size, cfg.input_dim());
        let p = self.params.as_slice();

        let mut input = Vec::with_capacity(in_dim);
        for &tok in ctx {
            let row = lay.emb + tok as usize * e;
            input.extend_from_slice(&p[row..row + e]);
        }

        let hidden: Vec<f64> = (0..h_dim)
            .map(|h| {
                let row = &p[lay.w1 + h * in_dim..lay.w1 + (h + 1) * in_dim];
                let pre = p[lay.b1 + h] + row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>();
                pre.tanh()
            })
            .collect();

        let logits: Vec<f64> = (0..v_dim)
            .map(|v| {
                let row = &p[lay.w2 + v * h_dim..lay.w2 + (v + 1) * h_dim];
                p[lay.b2 + v] + row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();

        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = logits.iter().map(|l| l - log_z).collect();
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Activations {
            input,
            hidden,
            probs,
            log_probs,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 8 * self.params.dim());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for field in [
            self.config.vocab_size as u32,
            self.config.context as u32,
            self.config.embed_dim as u32,
            self.config.hidden_dim as u32,
            self.config.pad_token,
        ] {
            out.extend_from_slice(&field.to_le_bytes());
        }
        for v in self.params.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 4];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| LwfError::BadCheckpoint("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(LwfError::BadCheckpoint("bad magic".into()));
        }
        let read_u32 = |cursor: &mut &[u8]| -> Result<u32> {
            let mut buf = [0u8; 4];
            cursor
                .read_exact(&mut buf)
                .map_err(|_| LwfError::BadCheckpoint("truncated header".into()))?;
            Ok(u32::from_le_bytes(buf))
        };
        let version = read_u32(&mut cursor)?;
        if version != CHECKPOINT_VERSION {
            return Err(LwfError::BadCheckpoint(format!("unsupported version {version}")));
        }
        let config = TinyLmConfig {
            vocab_size: read_u32(&mut cursor)? as usize,
            context: read_u32(&mut cursor)? as usize,
            embed_dim: read_u32(&mut cursor)? as usize,
            hidden_dim: read_u32(&mut cursor)? as usize,
            pad_token: read_u32(&mut cursor)?,
        };
        config.validate()?;
        let n = config.param_count();
        if cursor.len() != 8 * n {
            return Err(LwfError::BadCheckpoint(format!(
                "expected {} parameter bytes, found {}",
                8 * n,
                cursor.len()
            )));
        }
        let values = cursor
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_params(config, ParamVector::new(values))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl Differentiable for TinyLm {
    type Sample = Example;

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn loss(&self, sample: &Example) -> Result<f64> {
        TinyLm::loss(self, sample)
    }

    fn accumulate_grad(&self, sample: &Example, scale: f64, grad: &mut [f64]) -> Result<f64> {
        TinyLm::accumulate_grad(self, sample, scale, grad)
    }
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
