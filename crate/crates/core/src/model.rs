//! A small attention encoder-decoder standing in for a frozen NMT model.
//!
//! One decoding step:
//!
//! ```text
//! q      = (E[y_{t-1}] + P(t)) · Wq
//! k_j    = (E[x_j]     + P(j)) · Wk
//! a      = softmax(q · k_j / sqrt(d))          cross-attention over the source
//! c      = Σ_j a_j E[x_j]
//! h      = c + relu(c · W1 + b1) · W2 + b2     decoder state, used as datastore key
//! p_NMT  = softmax(h · Wout + bout)
//! ```
//!
//! `P` is a fixed sinusoidal position code (no parameters). Source keys only
//! depend on the source, so they are computed once per sentence in
//! [`EncodedSource`].
//!
//! Parameters live in memory as `f64`. Initialization draws `f32` values and
//! training rounds its result to `f32`, so the on-disk `f32` format is exact.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ParallelPair, TokenId, BOS};
use crate::error::{Error, Result};
use crate::linalg::{self, axpy, dot, Matrix};

const MODEL_MAGIC: &[u8; 4] = b"RGDM";
const MODEL_VERSION: u32 = 1;
const INIT_BOUND: f32 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub d: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 0.003,
            batch_size: 32,
            d: 64,
            d_ff: 128,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub vocab_size: usize,
    pub d: usize,
    pub d_ff: usize,
    pub seed: u64,
    pub embed: Matrix,
    pub attn_query: Matrix,
    pub attn_key: Matrix,
    pub ff1: Matrix,
    pub ff1_bias: Vec<f64>,
    pub ff2: Matrix,
    pub ff2_bias: Vec<f64>,
    pub out_proj: Matrix,
    pub out_bias: Vec<f64>,
}

/// What the decoder exposes at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStepOutput {
    /// Pre-projection decoder state.
    pub hidden: Vec<f64>,
    /// Softmax over the vocabulary.
    pub dist: Vec<f64>,
    /// Cross-attention weights over source positions.
    pub attn: Vec<f64>,
}

fn uniform_f32(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-INIT_BOUND..INIT_BOUND) as f64)
        .collect();
    Matrix { rows, cols, data }
}

impl ModelParams {
    /// Seeded uniform(-0.08, 0.08) initialization.
    pub fn init(vocab_size: usize, d: usize, d_ff: usize, seed: u64) -> Result<Self> {
        if d == 0 || d_ff == 0 || vocab_size == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bias = |n: usize| -> Vec<f64> { uniform_f32(1, n, &mut rng).data };
        let ff1_bias = bias(d_ff);
        let ff2_bias = bias(d);
        let out_bias = bias(vocab_size);
        Ok(Self {
            vocab_size,
            d,
            d_ff,
            seed,
            embed: uniform_f32(vocab_size, d, &mut rng),
            attn_query: uniform_f32(d, d, &mut rng),
            attn_key: uniform_f32(d, d, &mut rng),
            ff1: uniform_f32(d, d_ff, &mut rng),
            ff1_bias,
            ff2: uniform_f32(d_ff, d, &mut rng),
            ff2_bias,
            out_proj: uniform_f32(d, vocab_size, &mut rng),
            out_bias,
        })
    }

    pub fn zeros(vocab_size: usize, d: usize, d_ff: usize) -> Self {
        Self {
            vocab_size,
            d,
            d_ff,
            seed: 0,
            embed: Matrix::zeros(vocab_size, d),
            attn_query: Matrix::zeros(d, d),
            attn_key: Matrix::zeros(d, d),
            ff1: Matrix::zeros(d, d_ff),
            ff1_bias: vec![0.0; d_ff],
            ff2: Matrix::zeros(d_ff, d),
            ff2_bias: vec![0.0; d],
            out_proj: Matrix::zeros(d, vocab_size),
            out_bias: vec![0.0; vocab_size],
        }
    }

    /// Flat views of every parameter block, in file order.
    pub fn blocks(&self) -> [&[f64]; 9] {
        [
            &self.embed.data,
            &self.attn_query.data,
            &self.attn_key.data,
            &self.ff1.data,
            &self.ff1_bias,
            &self.ff2.data,
            &self.ff2_bias,
            &self.out_proj.data,
            &self.out_bias,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.embed.data,
            &mut self.attn_query.data,
            &mut self.attn_key.data,
            &mut self.ff1.data,
            &mut self.ff1_bias,
            &mut self.ff2.data,
            &mut self.ff2_bias,
            &mut self.out_proj.data,
            &mut self.out_bias,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn round_to_f32(&mut self) {
        for block in self.blocks_mut() {
            for v in block.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn check_token(&self, id: TokenId) -> Result<()> {
        if id as usize >= self.vocab_size {
            return Err(Error::validation(format!(
                "token id {id} out of range for model vocab {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// First 8 bytes of SHA-256 over the serialized model.
    pub fn content_hash(&self) -> u64 {
        let digest = Sha256::digest(model_to_bytes(self));
        u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
    }

    /// Projects the source once; reused by every step of a sentence.
    pub fn encode_source(&self, source: &[TokenId]) -> Result<EncodedSource> {
        if source.is_empty() {
            return Err(Error::validation("source must be non-empty"));
        }
        for &s in source {
            self.check_token(s)?;
        }
        let mut inputs = Vec::with_capacity(source.len());
        let mut keys = Vec::with_capacity(source.len());
        for (j, &s) in source.iter().enumerate() {
            let mut u = position_code(j, self.d);
            axpy(1.0, self.embed.row(s as usize), &mut u);
            keys.push(self.attn_key.vec_mul(&u));
            inputs.push(u);
        }
        Ok(EncodedSource {
            tokens: source.to_vec(),
            key_inputs: inputs,
            keys,
        })
    }

    /// One decoder step given the last prefix token and its timestep.
    pub fn step(&self, enc: &EncodedSource, last: TokenId, t: usize) -> DecoderStepOutput {
        let cache = self.forward(enc, last, t);
        DecoderStepOutput {
            hidden: cache.hidden,
            dist: cache.dist,
            attn: cache.attn,
        }
    }

    fn forward(&self, enc: &EncodedSource, last: TokenId, t: usize) -> StepCache {
        let d = self.d;
        let mut w = position_code(t, d);
        axpy(1.0, self.embed.row(last as usize), &mut w);
        let q = self.attn_query.vec_mul(&w);

        let scale = 1.0 / (d as f64).sqrt();
        let mut attn: Vec<f64> = enc.keys.iter().map(|k| dot(&q, k) * scale).collect();
        linalg::softmax_in_place(&mut attn);

        let mut context = vec![0.0; d];
        for (&a, &s) in attn.iter().zip(&enc.tokens) {
            axpy(a, self.embed.row(s as usize), &mut context);
        }

        let mut pre = self.ff1.vec_mul(&context);
        axpy(1.0, &self.ff1_bias, &mut pre);
        let act: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let mut hidden = self.ff2.vec_mul(&act);
        axpy(1.0, &self.ff2_bias, &mut hidden);
        axpy(1.0, &context, &mut hidden);

        let mut dist = self.out_proj.vec_mul(&hidden);
        axpy(1.0, &self.out_bias, &mut dist);
        linalg::softmax_in_place(&mut dist);

        StepCache {
            query_input: w,
            query: q,
            attn,
            context,
            pre,
            act,
            hidden,
            dist,
        }
    }
}

/// Source-side state shared by all steps of one sentence.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    tokens: Vec<TokenId>,
    key_inputs: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
}

impl EncodedSource {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

struct StepCache {
    query_input: Vec<f64>,
    query: Vec<f64>,
    attn: Vec<f64>,
    context: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    hidden: Vec<f64>,
    dist: Vec<f64>,
}

/// Sinusoidal position code of length `d`.
pub fn position_code(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Single step with an explicit prefix. `prefix` must start with BOS; the
/// step index is `prefix.len() - 1`.
pub fn decode_step(
    params: &ModelParams,
    source: &[TokenId],
    prefix: &[TokenId],
) -> Result<DecoderStepOutput> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::validation("prefix must begin with BOS"));
    }
    for &p in prefix {
        params.check_token(p)?;
    }
    let enc = params.encode_source(source)?;
    Ok(params.step(&enc, *prefix.last().expect("non-empty"), prefix.len() - 1))
}

/// Gold-prefix pass: one output per target position, EOS step included.
pub fn teacher_force_pass(
    params: &ModelParams,
    pair: &ParallelPair,
) -> Result<Vec<DecoderStepOutput>> {
    let enc = params.encode_source(&pair.source)?;
    let mut last = BOS;
    let mut out = Vec::with_capacity(pair.target.len());
    for (t, &y) in pair.target.iter().enumerate() {
        params.check_token(y)?;
        out.push(params.step(&enc, last, t));
        last = y;
    }
    Ok(out)
}

/// Fraction of gold-prefix steps whose argmax equals the gold token.
pub fn teacher_forced_accuracy(params: &ModelParams, pairs: &[ParallelPair]) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for pair in pairs {
        for (step, &y) in teacher_force_pass(params, pair)?.iter().zip(&pair.target) {
            hit += (linalg::argmax(&step.dist) == y as usize) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::validation("no target tokens to score"));
    }
    Ok(hit as f64 / total as f64)
}

/// Mean token cross-entropy over `pairs` and its gradient.
pub fn loss_and_grads(params: &ModelParams, pairs: &[ParallelPair]) -> Result<(f64, ModelParams)> {
    let n_tokens: usize = pairs.iter().map(|p| p.target.len()).sum();
    if n_tokens == 0 {
        return Err(Error::validation("empty batch"));
    }
    let scale = 1.0 / n_tokens as f64;
    let mut grads = ModelParams::zeros(params.vocab_size, params.d, params.d_ff);
    let mut loss = 0.0;
    for pair in pairs {
        loss += accumulate_pair(params, pair, scale, &mut grads)?;
    }
    Ok((loss * scale, grads))
}

fn accumulate_pair(
    params: &ModelParams,
    pair: &ParallelPair,
    scale: f64,
    g: &mut ModelParams,
) -> Result<f64> {
    let d = params.d;
    let enc = params.encode_source(&pair.source)?;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut key_grads = vec![vec![0.0; d]; enc.len()];
    let mut last = BOS;
    let mut loss = 0.0;

    let mut d_logits = vec![0.0; params.vocab_size];
    let mut d_hidden = vec![0.0; d];
    let mut d_act = vec![0.0; params.d_ff];
    let mut d_context = vec![0.0; d];
    let mut d_query = vec![0.0; d];

    for (t, &y) in pair.target.iter().enumerate() {
        params.check_token(y)?;
        let c = params.forward(&enc, last, t);
        loss -= c.dist[y as usize].max(1e-300).ln();

        // Output layer.
        for (dl, &p) in d_logits.iter_mut().zip(&c.dist) {
            *dl = p * scale;
        }
        d_logits[y as usize] -= scale;
        g.out_proj.add_outer(1.0, &c.hidden, &d_logits);
        axpy(1.0, &d_logits, &mut g.out_bias);
        params.out_proj.mul_vec_into(&d_logits, &mut d_hidden);

        // Feed-forward block with residual.
        g.ff2.add_outer(1.0, &c.act, &d_hidden);
        axpy(1.0, &d_hidden, &mut g.ff2_bias);
        params.ff2.mul_vec_into(&d_hidden, &mut d_act);
        for (da, &z) in d_act.iter_mut().zip(&c.pre) {
            if z <= 0.0 {
                *da = 0.0;
            }
        }
        g.ff1.add_outer(1.0, &c.context, &d_act);
        axpy(1.0, &d_act, &mut g.ff1_bias);
        params.ff1.mul_vec_into(&d_act, &mut d_context);
        axpy(1.0, &d_hidden, &mut d_context);

        // Attention: values are raw source embeddings.
        let mut d_scores = Vec::with_capacity(enc.len());
        for (&a, &s) in c.attn.iter().zip(&enc.tokens) {
            axpy(a, &d_context, g.embed.row_mut(s as usize));
            d_scores.push(dot(&d_context, params.embed.row(s as usize)));
        }
        let mean: f64 = c.attn.iter().zip(&d_scores).map(|(a, ds)| a * ds).sum();
        d_query.fill(0.0);
        for j in 0..enc.len() {
            let ds = c.attn[j] * (d_scores[j] - mean) * inv_sqrt_d;
            axpy(ds, &enc.keys[j], &mut d_query);
            axpy(ds, &c.query, &mut key_grads[j]);
        }
        g.attn_query.add_outer(1.0, &c.query_input, &d_query);
        let d_w = params.attn_query.mul_vec(&d_query);
        axpy(1.0, &d_w, g.embed.row_mut(last as usize));

        last = y;
    }

    for (j, dk) in key_grads.iter().enumerate() {
        g.attn_key.add_outer(1.0, &enc.key_inputs[j], dk);
        let du = params.attn_key.mul_vec(dk);
        axpy(1.0, &du, g.embed.row_mut(enc.tokens[j] as usize));
    }
    Ok(loss)
}

/// Trains with minibatch Adam on token cross-entropy. The result is rounded
/// to `f32` precision and is not modified afterwards.
pub fn train_base(
    pairs: &[ParallelPair],
    vocab_size: usize,
    cfg: &ModelConfig,
) -> Result<ModelParams> {
    if pairs.is_empty() {
        return Err(Error::validation("base training corpus is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::config("lr must be positive"));
    }
    let mut params = ModelParams::init(vocab_size, cfg.d, cfg.d_ff, cfg.seed)?;
    if cfg.epochs == 0 {
        return Ok(params);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut adam = Adam::new(&params);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| pairs[i].clone()));
            let (loss, grads) = loss_and_grads(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            epoch_loss += loss;
            adam.step(&mut params, &grads, cfg.lr);
        }
        let batches = order.len().div_ceil(cfg.batch_size);
        log::info!(
            "base epoch {epoch}: mean loss {:.4}",
            epoch_loss / batches as f64
        );
    }
    if !params.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs - 1,
            batch: 0,
        });
    }
    params.round_to_f32();
    Ok(params)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let m: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((p, g), m), v) in params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

pub fn model_to_bytes(params: &ModelParams) -> Vec<u8> {
    let floats: usize = params.blocks().iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(28 + floats * 4);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for dim in [params.vocab_size, params.d, params.d_ff] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&params.seed.to_le_bytes());
    for block in params.blocks() {
        for &v in block {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = crate::binio::Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    r.version(MODEL_VERSION)?;
    let vocab_size = r.u32()? as usize;
    let d = r.u32()? as usize;
    let d_ff = r.u32()? as usize;
    let seed = r.u64()?;
    let mut params = ModelParams::zeros(vocab_size, d, d_ff);
    params.seed = seed;
    for block in params.blocks_mut() {
        for v in block.iter_mut() {
            *v = r.f32()? as f64;
        }
    }
    r.finish()?;
    Ok(params)
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
