//! Transformer decoder: masked self-attention, cross-attention over the
//! encoder memory and a position-wise feed-forward network, each followed
//! by a residual connection and layer normalization.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::{sinusoid, Memory};
use crate::nn::{LayerNorm, Linear, Module, Phase, Visitor};
use crate::numerics::float::{gemm, MatRef};
use crate::numerics::{init, AttnMask, Float, RngState, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Including the reserved ids.
    pub vocab_size: usize,
    /// Longest input sequence (start symbol included).
    pub max_positions: usize,
    /// Reuse the embedding table as the output projection.
    pub tie_embeddings: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: 256,
            heads: 8,
            d_ff: 1024,
            layers: 3,
            dropout: 0.3,
            vocab_size: 0,
            max_positions: 256,
            tie_embeddings: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.d_ff == 0 || self.layers == 0 || self.max_positions == 0 {
            return bad(format!("decoder extents must be positive: {self:?}"));
        }
        if self.vocab_size <= crate::data::RESERVED {
            return bad(format!("vocab_size {} leaves no regular tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Word position encoding: `[2i] = sin(pos / 10000^(2i/d))`,
/// `[2i+1] = cos(pos / 10000^(2i/d))`.
pub fn word_pos_encoding(pos: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    sinusoid(pos as f64, d, &mut out);
    out
}

/// Additive `[L, L]` mask: `0` on and below the diagonal, `-inf` above.
pub fn causal_mask(len: usize) -> Vec<f64> {
    (0..len * len)
        .map(|i| if i % len <= i / len { 0.0 } else { f64::NEG_INFINITY })
        .collect()
}

/// `softmax(Q K^T / sqrt(d_k) + mask) V` for `Q[m, d_k]`, `K[n, d_k]`,
/// `V[n, d_v]` and an optional additive `[m, n]` mask of `0` / `-inf`.
pub fn attention<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, mask: Option<&[f64]>) -> Result<Tensor<T>> {
    let dk = *q.shape().last().unwrap_or(&1);
    let mut scores = q.matmul_t(k)?.scale(1.0 / (dk as f64).sqrt())?;
    if let Some(m) = mask {
        let mt = Tensor::new(m.iter().map(|&x| T::lit(x)).collect(), scores.shape())?;
        scores = scores.add(&mt)?;
    }
    Ok(scores.softmax()?.matmul(v)?)
}

/// `[B, L, h*dk] -> [B*h, L, dk]`.
fn split_heads<T: Float>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Ok(x.reshape(&[b, l, heads, d / heads])?.permute(&[0, 2, 1, 3])?.reshape(&[b * heads, l, d / heads])?)
}

/// `[B*h, L, dk] -> [B, L, h*dk]`.
fn merge_heads<T: Float>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (g, l, dk) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let b = g / heads;
    Ok(x.reshape(&[b, heads, l, dk])?.permute(&[0, 2, 1, 3])?.reshape(&[b, l, heads * dk])?)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention<T: Float = f32> {
    pub heads: usize,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

impl<T: Float> MultiHeadAttention<T> {
    pub fn new(rng: &mut RngState, d_model: usize, heads: usize) -> Result<Self> {
        Ok(MultiHeadAttention {
            heads,
            wq: Linear::new(rng, d_model, d_model, true)?,
            wk: Linear::new(rng, d_model, d_model, true)?,
            wv: Linear::new(rng, d_model, d_model, true)?,
            wo: Linear::new(rng, d_model, d_model, true)?,
        })
    }

    /// Projected keys and values `[B, n, d]`, before the head split.
    pub fn project_kv(&self, kv: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((self.wk.forward(kv)?, self.wv.forward(kv)?))
    }

    /// Attention of `x[B, m, d]` over already projected `k, v[B, n, d]`.
    pub fn attend(
        &self,
        x: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        mask: &AttnMask,
        phase: &mut Phase<'_>,
        dropout: f64,
    ) -> Result<Tensor<T>> {
        let h = self.heads;
        let dk = x.shape()[2] / h;
        let q = split_heads(&self.wq.forward(x)?, h)?;
        let (k, v) = (split_heads(k, h)?, split_heads(v, h)?);
        let scores = q.bmm(&k, true)?.scale(1.0 / (dk as f64).sqrt())?;
        let weights = phase.dropout(&scores.softmax_masked(mask)?, dropout)?;
        Ok(self.wo.forward(&merge_heads(&weights.bmm(&v, false)?, h)?)?)
    }

    /// Multi-head attention of `q[m, d]` over `kv[n, d]` for one sequence.
    pub fn forward(&self, q: &Tensor<T>, kv: &Tensor<T>, mask: &AttnMask) -> Result<Tensor<T>> {
        let d = q.shape()[1];
        let q3 = q.reshape(&[1, q.shape()[0], d])?;
        let kv3 = kv.reshape(&[1, kv.shape()[0], d])?;
        let (k, v) = self.project_kv(&kv3)?;
        let y = self.attend(&q3, &k, &v, mask, &mut Phase::Eval, 0.0)?;
        Ok(y.reshape(&[q.shape()[0], d])?)
    }
}

impl<T: Float> Module<T> for MultiHeadAttention<T> {
    fn visit(&mut self, v: &mut Visitor<'_, T>) {
        v.scope("wq", |v| self.wq.visit(v));
        v.scope("wk", |v| self.wk.visit(v));
        v.scope("wv", |v| self.wv.visit(v));
        v.scope("wo", |v| self.wo.visit(v));
    }
}

/// `max(0, x W1 + b1) W2 + b2`, position-wise.
#[derive(Clone, Debug)]
pub struct FeedForward<T: Float = f32> {
    pub w1: Linear<T>,
    pub w2: Linear<T>,
}

impl<T: Float> FeedForward<T> {
    pub fn new(rng: &mut RngState, d_model: usize, d_ff: usize) -> Result<Self> {
        Ok(FeedForward { w1: Linear::new(rng, d_model, d_ff, true)?, w2: Linear::new(rng, d_ff, d_model, true)? })
    }

    pub fn forward(&self, x: &Tensor<T>, phase: &mut Phase<'_>, dropout: f64) -> Result<Tensor<T>> {
        let hidden = phase.dropout(&self.w1.forward(x)?.relu()?, dropout)?;
        Ok(self.w2.forward(&hidden)?)
    }
}

impl<T: Float> Module<T> for FeedForward<T> {
    fn visit(&mut self, v: &mut Visitor<'_, T>) {
        v.scope("w1", |v| self.w1.visit(v));
        v.scope("w2", |v| self.w2.visit(v));
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer<T: Float = f32> {
    pub self_attn: MultiHeadAttention<T>,
    pub norm1: LayerNorm<T>,
    pub cross_attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
    pub norm3: LayerNorm<T>,
}

impl<T: Float> Module<T> for DecoderLayer<T> {
    fn visit(&mut self, v: &mut Visitor<'_, T>) {
        v.scope("self_attn", |v| self.self_attn.visit(v));
        v.scope("norm1", |v| self.norm1.visit(v));
        v.scope("cross_attn", |v| self.cross_attn.visit(v));
        v.scope("norm2", |v| self.norm2.visit(v));
        v.scope("ffn", |v| self.ffn.visit(v));
        v.scope("norm3", |v| self.norm3.visit(v));
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<T: Float = f32> {
    pub config: DecoderConfig,
    /// `[vocab, d_model]`.
    pub embed: Tensor<T>,
    pub layers: Vec<DecoderLayer<T>>,
    /// `[d_model, vocab]`; `None` when tied to `embed`.
    pub out_weight: Option<Tensor<T>>,
    pub out_bias: Tensor<T>,
    /// `[max_positions, d_model]` word position encodings.
    pos_table: Arc<Vec<T>>,
}

impl<T: Float> Decoder<T> {
    pub fn new(config: &DecoderConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embed = init::fan_in_uniform(rng, &[config.vocab_size, d], d)?;
        let layers = (0..config.layers)
            .map(|_| {
                Ok(DecoderLayer {
                    self_attn: MultiHeadAttention::new(rng, d, config.heads)?,
                    norm1: LayerNorm::new(d)?,
                    cross_attn: MultiHeadAttention::new(rng, d, config.heads)?,
                    norm2: LayerNorm::new(d)?,
                    ffn: FeedForward::new(rng, d, config.d_ff)?,
                    norm3: LayerNorm::new(d)?,
                })
            })
            .collect::<Result<_>>()?;
        let out_weight = if config.tie_embeddings {
            None
        } else {
            Some(init::fan_in_uniform(rng, &[d, config.vocab_size], d)?)
        };
        Ok(Decoder {
            config: config.clone(),
            embed,
            layers,
            out_weight,
            out_bias: init::zeros(&[config.vocab_size])?,
            pos_table: Arc::new(Self::pos_table(config)),
        })
    }

    fn pos_table(config: &DecoderConfig) -> Vec<T> {
        (0..config.max_positions)
            .flat_map(|p| word_pos_encoding(p, config.d_model))
            .map(T::lit)
            .collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Embedding times `sqrt(d)` plus position encoding, `[B, L, d]`.
    fn embed_inputs(&self, ids: &[usize], batch: usize, len: usize) -> Result<Tensor<T>> {
        let d = self.config.d_model;
        if len > self.config.max_positions {
            return Err(Error::Config(format!(
                "sequence length {len} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let e = self.embed.embedding(ids)?.scale((d as f64).sqrt())?.reshape(&[batch, len, d])?;
        let pos: Vec<T> = (0..batch).flat_map(|_| self.pos_table[..len * d].iter().copied()).collect();
        Ok(e.add(&Tensor::new(pos, &[batch, len, d])?)?)
    }

    fn project_out(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = match &self.out_weight {
            Some(w) => x.matmul(w)?,
            None => x.matmul_t(&self.embed)?,
        };
        Ok(y.add_bias(&self.out_bias)?)
    }

    /// Logits `[Bq, L, vocab]` for `input_ids[Bq * L]` in one causal pass.
    ///
    /// Row `r` attends to memory entry `memory_rows[r]`, so both target
    /// directions of a sample can share one encoded image. Positions after
    /// a row's first `PAD` produce logits that callers must ignore.
    pub fn forward_teacher_forced(
        &self,
        memory: &Memory<T>,
        memory_rows: &[usize],
        input_ids: &[usize],
        len: usize,
        phase: &mut Phase<'_>,
    ) -> Result<Tensor<T>> {
        let bq = memory_rows.len();
        if bq == 0 || input_ids.len() != bq * len {
            return Err(Error::Config(format!(
                "{} input ids for {bq} rows of length {len}",
                input_ids.len()
            )));
        }
        let s = memory.len();
        if let Some(&bad) = memory_rows.iter().find(|&&r| r >= memory.batch()) {
            return Err(Error::Config(format!("memory row {bad} outside batch of {}", memory.batch())));
        }
        let keys: Vec<bool> = memory_rows.iter().flat_map(|&r| memory.key_mask[r * s..(r + 1) * s].iter().copied()).collect();
        let cross_mask = AttnMask::Keys { valid: Arc::new(keys), groups_per_row: self.config.heads };
        let self_mask = AttnMask::Causal { offset: 0 };
        let p = self.config.dropout;

        let mut x = self.embed_inputs(input_ids, bq, len)?;
        x = phase.dropout(&x, p)?;
        for layer in &self.layers {
            let (k, v) = layer.self_attn.project_kv(&x)?;
            let a = layer.self_attn.attend(&x, &k, &v, &self_mask, phase, p)?;
            x = layer.norm1.forward(&x.add(&a)?)?;
            let (mk, mv) = layer.cross_attn.project_kv(&memory.features)?;
            let (mk, mv) = (mk.gather_rows(memory_rows)?, mv.gather_rows(memory_rows)?);
            let c = layer.cross_attn.attend(&x, &mk, &mv, &cross_mask, phase, p)?;
            x = layer.norm2.forward(&x.add(&c)?)?;
            let f = layer.ffn.forward(&x, phase, p)?;
            x = layer.norm3.forward(&x.add(&f)?)?;
        }
        self.project_out(&x)
    }

    /// Projects one memory entry for incremental decoding.
    pub fn memory_cache(&self, memory: &Memory<T>, entry: usize) -> Result<MemoryCache<T>> {
        let s = memory.len();
        let d = self.config.d_model;
        if entry >= memory.batch() {
            return Err(Error::Config(format!("memory entry {entry} outside batch of {}", memory.batch())));
        }
        let feats = &memory.features.data()[entry * s * d..(entry + 1) * s * d];
        let layers = self
            .layers
            .iter()
            .map(|l| (dense(feats, s, &l.cross_attn.wk), dense(feats, s, &l.cross_attn.wv)))
            .collect();
        Ok(MemoryCache { layers, valid: memory.key_mask[entry * s..(entry + 1) * s].to_vec(), len: s })
    }

    /// Next-token logits for each state after feeding `tokens[i]` to
    /// `states[i]`; every state advances by one position. Eval mode.
    pub fn decode_step(&self, cache: &MemoryCache<T>, states: &mut [DecoderState<T>], tokens: &[usize]) -> Result<Vec<Vec<T>>> {
        let n = states.len();
        let cfg = &self.config;
        let (d, h) = (cfg.d_model, cfg.heads);
        if tokens.len() != n {
            return Err(Error::Config(format!("{} tokens for {n} states", tokens.len())));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(Error::Config("memory cache built for a different decoder".into()));
        }
        let scale = T::lit((d as f64).sqrt());
        let mut x = vec![T::zero(); n * d];
        for (i, (st, &tok)) in states.iter().zip(tokens).enumerate() {
            if st.len >= cfg.max_positions {
                return Err(Error::Config(format!("prefix length exceeds max_positions {}", cfg.max_positions)));
            }
            if tok >= cfg.vocab_size {
                return Err(crate::numerics::NumericsError::Range { what: "token id", index: tok, bound: cfg.vocab_size }.into());
            }
            let e = &self.embed.data()[tok * d..(tok + 1) * d];
            let p = &self.pos_table[st.len * d..(st.len + 1) * d];
            for ((o, &a), &b) in x[i * d..(i + 1) * d].iter_mut().zip(e).zip(p) {
                *o = a * scale + b;
            }
        }
        for (li, layer) in self.layers.iter().enumerate() {
            // Masked self-attention over the cached prefix plus this step.
            let q = dense(&x, n, &layer.self_attn.wq);
            let k = dense(&x, n, &layer.self_attn.wk);
            let v = dense(&x, n, &layer.self_attn.wv);
            let mut ctx = vec![T::zero(); n * d];
            for (i, st) in states.iter_mut().enumerate() {
                let kv = &mut st.layers[li];
                kv.0.extend_from_slice(&k[i * d..(i + 1) * d]);
                kv.1.extend_from_slice(&v[i * d..(i + 1) * d]);
                let t = kv.0.len() / d;
                attend_rows(&q[i * d..(i + 1) * d], 1, &kv.0, &kv.1, t, None, h, &mut ctx[i * d..(i + 1) * d]);
            }
            let a = dense(&ctx, n, &layer.self_attn.wo);
            x = add_norm(&x, &a, &layer.norm1);

            let q = dense(&x, n, &layer.cross_attn.wq);
            let mut ctx = vec![T::zero(); n * d];
            let (mk, mv) = &cache.layers[li];
            attend_rows(&q, n, mk, mv, cache.len, Some(&cache.valid), h, &mut ctx);
            let c = dense(&ctx, n, &layer.cross_attn.wo);
            x = add_norm(&x, &c, &layer.norm2);

            let mut hidden = dense(&x, n, &layer.ffn.w1);
            for v in hidden.iter_mut() {
                *v = v.max(T::zero());
            }
            let f = dense(&hidden, n, &layer.ffn.w2);
            x = add_norm(&x, &f, &layer.norm3);
        }
        for st in states.iter_mut() {
            st.len += 1;
        }
        let vsz = cfg.vocab_size;
        let mut logits = vec![T::zero(); n * vsz];
        match &self.out_weight {
            Some(w) => gemm(n, d, vsz, T::one(), MatRef::rm(&x, d), MatRef::rm(w.data(), vsz), T::zero(), &mut logits),
            None => gemm(n, d, vsz, T::one(), MatRef::rm(&x, d), MatRef::rm_t(self.embed.data(), d), T::zero(), &mut logits),
        }
        for row in logits.chunks_exact_mut(vsz) {
            for (l, &b) in row.iter_mut().zip(self.out_bias.data()) {
                *l += b;
            }
        }
        Ok(logits.chunks_exact(vsz).map(<[T]>::to_vec).collect())
    }

    /// Logits after feeding a whole prefix to a fresh state.
    pub fn decode_prefix(&self, cache: &MemoryCache<T>, prefix: &[usize]) -> Result<Vec<T>> {
        if prefix.is_empty() {
            return Err(Error::Config("empty prefix".into()));
        }
        let mut st = [DecoderState::new(self.layers.len())];
        let mut last = Vec::new();
        for &t in prefix {
            last = self.decode_step(cache, &mut st, &[t])?.pop().expect("one state");
        }
        Ok(last)
    }
}

/// `x[rows, d_in] W + b`.
fn dense<T: Float>(x: &[T], rows: usize, lin: &Linear<T>) -> Vec<T> {
    let (di, dout) = (lin.d_in(), lin.d_out());
    let mut y = vec![T::zero(); rows * dout];
    gemm(rows, di, dout, T::one(), MatRef::rm(x, di), MatRef::rm(lin.weight.data(), dout), T::zero(), &mut y);
    if let Some(b) = &lin.bias {
        for row in y.chunks_exact_mut(dout) {
            for (a, &bb) in row.iter_mut().zip(b.data()) {
                *a += bb;
            }
        }
    }
    y
}

fn add_norm<T: Float>(x: &[T], y: &[T], ln: &LayerNorm<T>) -> Vec<T> {
    let d = ln.gamma.numel();
    let mut out = vec![T::zero(); x.len()];
    for ((xr, yr), or) in x.chunks_exact(d).zip(y.chunks_exact(d)).zip(out.chunks_exact_mut(d)) {
        let s: Vec<f64> = xr.iter().zip(yr).map(|(&a, &b)| (a + b).f64()).collect();
        let mean = s.iter().sum::<f64>() / d as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + crate::nn::LN_EPS).sqrt();
        for (i, o) in or.iter_mut().enumerate() {
            *o = T::lit((s[i] - mean) * inv) * ln.gamma.data()[i] + ln.beta.data()[i];
        }
    }
    out
}

/// Multi-head attention of `q[m, d]` over `k, v[t, d]` into `out[m, d]`,
/// with optional key validity.
#[allow(clippy::too_many_arguments)]
fn attend_rows<T: Float>(q: &[T], m: usize, k: &[T], v: &[T], t: usize, valid: Option<&[bool]>, heads: usize, out: &mut [T]) {
    let d = q.len() / m;
    let dk = d / heads;
    let inv = T::lit(1.0 / (dk as f64).sqrt());
    let mut scores = vec![T::zero(); m * t];
    let mut ctx = vec![T::zero(); m * dk];
    for hd in 0..heads {
        let o = hd * dk;
        let qh = MatRef { data: &q[o..], rs: d, cs: 1 };
        let kt = MatRef { data: &k[o..], rs: 1, cs: d };
        gemm(m, dk, t, inv, qh, kt, T::zero(), &mut scores);
        for row in scores.chunks_exact_mut(t) {
            let mut mx = f64::NEG_INFINITY;
            for (j, s) in row.iter().enumerate() {
                if valid.is_none_or(|vm| vm[j]) {
                    mx = mx.max(s.f64());
                }
            }
            let mut sum = 0f64;
            for (j, s) in row.iter_mut().enumerate() {
                let e = if mx.is_finite() && valid.is_none_or(|vm| vm[j]) { (s.f64() - mx).exp() } else { 0.0 };
                sum += e;
                *s = T::lit(e);
            }
            if sum > 0.0 {
                let r = T::lit(1.0 / sum);
                for s in row.iter_mut() {
                    *s *= r;
                }
            }
        }
        let vh = MatRef { data: &v[o..], rs: d, cs: 1 };
        gemm(m, t, dk, T::one(), MatRef::rm(&scores, t), vh, T::zero(), &mut ctx);
        for i in 0..m {
            out[i * d + o..i * d + o + dk].copy_from_slice(&ctx[i * dk..(i + 1) * dk]);
        }
    }
}

/// Cross-attention keys and values of one memory entry, per layer.
#[derive(Clone, Debug)]
pub struct MemoryCache<T: Float = f32> {
    /// `([S, d] keys, [S, d] values)` per layer.
    pub layers: Vec<(Vec<T>, Vec<T>)>,
    pub valid: Vec<bool>,
    pub len: usize,
}

/// Self-attention keys and values of one decoded prefix.
#[derive(Clone, Debug)]
pub struct DecoderState<T: Float = f32> {
    /// `([t, d] keys, [t, d] values)` per layer.
    pub layers: Vec<(Vec<T>, Vec<T>)>,
    /// Tokens consumed so far.
    pub len: usize,
}

impl<T: Float> DecoderState<T> {
    pub fn new(layers: usize) -> Self {
        DecoderState { layers: vec![(Vec::new(), Vec::new()); layers], len: 0 }
    }
}

impl<T: Float> Module<T> for Decoder<T> {
    fn visit(&mut self, v: &mut Visitor<'_, T>) {
        v.param("embed", &mut self.embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.scope(format!("layers.{i}"), |v| l.visit(v));
        }
        if let Some(w) = &mut self.out_weight {
            v.param("out.weight", w);
        }
        v.param("out.bias", &mut self.out_bias);
    }
}
